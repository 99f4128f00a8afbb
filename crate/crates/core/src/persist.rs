//! Episode files, offline construction and tree snapshots.
//!
//! Snapshot layout (all integers little-endian):
//!
//! ```text
//! header (24 bytes)
//!   magic           8  b"HMTSNAP\0"
//!   schema_version  4  u32
//!   crc32           4  u32, CRC-32 (IEEE) of the body
//!   body_len        8  u64
//! body
//!   json_len        8  u64
//!   json            json_len bytes, UTF-8 tree section
//!   dimension       4  u32
//!   count           8  u64
//!   count records, ascending node id:
//!     node_id       8  u64
//!     level         1  u8 (0 task, 1 subgoal, 2 step)
//!     vector        dimension × f32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::embedding::{Embedder, IndexEntry, Level, Vector, VectorIndex};
use crate::inference::SideIndex;
use crate::memory::{
    Instruction, MemoryTree, NodeId, StepNode, SubgoalNode, TaskNode, Trajectory, TrajectoryStep, SCHEMA_VERSION,
};
use crate::pipeline::{insert_trajectory, PipelineConfig};

pub const MAGIC: &[u8; 8] = b"HMTSNAP\0";
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub instruction: Instruction,
    pub steps: Vec<TrajectoryStep>,
    pub success: bool,
    #[serde(default)]
    pub source_site: String,
}

impl EpisodeRecord {
    pub fn from_trajectory(t: &Trajectory, source_site: impl Into<String>) -> Self {
        Self { instruction: t.instruction.clone(), steps: t.steps.clone(), success: t.success, source_site: source_site.into() }
    }

    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory { instruction: self.instruction.clone(), steps: self.steps.clone(), success: self.success }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedEpisodes {
    pub records: Vec<EpisodeRecord>,
    pub skipped: Vec<SkippedRecord>,
}

fn check_record(line: &str) -> Result<EpisodeRecord, String> {
    let rec: EpisodeRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.to_trajectory().validate().map_err(|e| e.to_string())?;
    Ok(rec)
}

/// Parses JSON-lines episodes. Blank lines are ignored.
pub fn parse_episodes(text: &str, mode: LoadMode) -> Result<LoadedEpisodes, EpisodeError> {
    let mut out = LoadedEpisodes::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match check_record(line) {
            Ok(r) => out.records.push(r),
            Err(reason) if mode == LoadMode::Lenient => out.skipped.push(SkippedRecord { line: i + 1, reason }),
            Err(reason) => return Err(EpisodeError::Invalid { line: i + 1, reason }),
        }
    }
    Ok(out)
}

pub fn load_episodes(path: &Path, mode: LoadMode) -> Result<LoadedEpisodes, EpisodeError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| EpisodeError::Io { path: path.display().to_string(), source })?;
    parse_episodes(&text, mode)
}

pub fn write_episodes(records: &[EpisodeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("episodes serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeBuild {
    pub index: usize,
    pub source_site: String,
    pub segments: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildFailure {
    pub index: usize,
    pub source_site: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BuildReport {
    pub episodes: usize,
    pub filtered_unsuccessful: usize,
    pub inserted: Vec<EpisodeBuild>,
    pub failures: Vec<BuildFailure>,
    pub tasks: usize,
    pub subgoals: usize,
    pub steps: usize,
}

pub struct OfflineBuild {
    pub tree: MemoryTree,
    pub side: SideIndex,
    pub report: BuildReport,
}

/// Inserts every successful episode in file order; per-episode failures are
/// recorded and skipped.
pub fn build_offline(
    episodes: &[EpisodeRecord],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    cfg: &PipelineConfig,
) -> OfflineBuild {
    let mut tree = MemoryTree::new(embedder.dimension());
    let mut side = SideIndex::default();
    let mut report = BuildReport { episodes: episodes.len(), ..Default::default() };
    for (index, rec) in episodes.iter().enumerate() {
        if !rec.success {
            report.filtered_unsuccessful += 1;
            continue;
        }
        let traj = rec.to_trajectory();
        let before = tree.subgoals().len();
        match insert_trajectory(&mut tree, &traj, backend, embedder, cfg) {
            Ok(ids) => {
                side.record(&ids, &traj, cfg.n_e);
                report.inserted.push(EpisodeBuild {
                    index,
                    source_site: rec.source_site.clone(),
                    segments: tree.subgoals().len() - before,
                    steps: ids.steps.len(),
                });
            }
            Err(e) => report.failures.push(BuildFailure {
                index,
                source_site: rec.source_site.clone(),
                reason: e.to_string(),
            }),
        }
    }
    report.tasks = tree.tasks().len();
    report.subgoals = tree.subgoals().len();
    report.steps = tree.steps().len();
    OfflineBuild { tree, side, report }
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a tree snapshot (bad magic)")]
    BadMagic,
    #[error("snapshot schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("snapshot checksum mismatch or truncated payload")]
    Checksum,
    #[error("corrupted snapshot: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeSection {
    schema_version: u32,
    next_id: u64,
    tasks: Vec<TaskNode>,
    subgoals: Vec<SubgoalNode>,
    steps: Vec<StepNode>,
}

pub fn encode_snapshot(tree: &MemoryTree) -> Vec<u8> {
    let section = TreeSection {
        schema_version: tree.schema_version,
        next_id: tree.next_id,
        tasks: tree.tasks.values().cloned().collect(),
        subgoals: tree.subgoals.values().cloned().collect(),
        steps: tree.steps.values().cloned().collect(),
    };
    let json = serde_json::to_vec(&section).expect("tree serializes");
    let dim = tree.index.dimension();
    let mut body = Vec::with_capacity(json.len() + 32 + tree.index.len() * (9 + 4 * dim));
    body.extend_from_slice(&(json.len() as u64).to_le_bytes());
    body.extend_from_slice(&json);
    body.extend_from_slice(&(dim as u32).to_le_bytes());
    body.extend_from_slice(&(tree.index.len() as u64).to_le_bytes());
    for e in tree.index.entries() {
        body.extend_from_slice(&e.node_id.0.to_le_bytes());
        body.push(e.level.code());
        for x in e.vector.as_slice() {
            body.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| SnapshotError::Corrupt("section runs past the body".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<MemoryTree, SnapshotError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) && !bytes.is_empty() { SnapshotError::Checksum } else { SnapshotError::BadMagic });
    }
    if &bytes[..8] != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(SnapshotError::Checksum);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != SCHEMA_VERSION {
        return Err(SnapshotError::Version { found: version, expected: SCHEMA_VERSION });
    }
    let crc = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let body_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    if body.len() as u64 != body_len || crc32fast::hash(body) != crc {
        return Err(SnapshotError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 0 };
    let json_len = r.u64()? as usize;
    let json = r.take(json_len)?;
    let section: TreeSection = serde_json::from_slice(json).map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
    if section.schema_version != SCHEMA_VERSION {
        return Err(SnapshotError::Version { found: section.schema_version, expected: SCHEMA_VERSION });
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut index = VectorIndex::new(dim);
    for _ in 0..count {
        let node_id = NodeId(r.u64()?);
        let level = Level::from_code(r.take(1)?[0]).ok_or_else(|| SnapshotError::Corrupt("unknown level code".into()))?;
        let raw = r.take(dim.checked_mul(4).ok_or_else(|| SnapshotError::Corrupt("dimension overflow".into()))?)?;
        let vector = Vector(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
        if index.get(node_id).is_some() {
            return Err(SnapshotError::Corrupt(format!("duplicate vector for node {node_id}")));
        }
        index.insert(IndexEntry { node_id, level, vector });
    }
    if r.pos != body.len() {
        return Err(SnapshotError::Corrupt("trailing bytes after vector section".into()));
    }
    let mut tree = MemoryTree::new(dim);
    tree.next_id = section.next_id;
    tree.schema_version = section.schema_version;
    tree.tasks = section.tasks.into_iter().map(|t| (t.id, t)).collect();
    tree.subgoals = section.subgoals.into_iter().map(|t| (t.id, t)).collect();
    tree.steps = section.steps.into_iter().map(|t| (t.id, t)).collect();
    tree.attach_index(index).map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
    tree.validate().map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
    Ok(tree)
}

pub fn save_tree(tree: &MemoryTree, path: &Path) -> Result<(), SnapshotError> {
    std::fs::write(path, encode_snapshot(tree))
        .map_err(|source| SnapshotError::Io { path: path.display().to_string(), source })
}

pub fn load_tree(path: &Path) -> Result<MemoryTree, SnapshotError> {
    let bytes = std::fs::read(path).map_err(|source| SnapshotError::Io { path: path.display().to_string(), source })?;
    decode_snapshot(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::embedding::HashEmbedder;
    use crate::memory::{Action, Element, Observation, Role};

    fn step(uid: &str, text: &str, url: &str) -> TrajectoryStep {
        TrajectoryStep {
            observation: Observation {
                elements: vec![Element { uid: uid.into(), role: Role::Button, text: text.into(), context: vec![], bbox: None }],
                page_title: url.into(),
                url: url.into(),
            },
            action: Action::click(uid),
        }
    }

    fn record(q: &str, success: bool) -> EpisodeRecord {
        EpisodeRecord {
            instruction: Instruction::new(q).unwrap(),
            steps: vec![step("x-1", "Search", "/a"), step("x-2", "Select", "/b")],
            success,
            source_site: "s".into(),
        }
    }

    #[test]
    fn strict_and_lenient_loading() {
        let good = serde_json::to_string(&record("buy shoes", true)).unwrap();
        let mut bad = record("buy shoes", true);
        bad.steps[0].action.target = "missing".into();
        let bad = serde_json::to_string(&bad).unwrap();
        let two = format!("{good}\n{good}\n");
        assert_eq!(parse_episodes(&two, LoadMode::Strict).unwrap().records.len(), 2);
        let mixed = format!("{good}\n{bad}\n");
        match parse_episodes(&mixed, LoadMode::Strict) {
            Err(EpisodeError::Invalid { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let l = parse_episodes(&mixed, LoadMode::Lenient).unwrap();
        assert_eq!((l.records.len(), l.skipped.len()), (1, 1));
        assert!(parse_episodes("{\"instruction\":\"x\",\"steps\":[],\"success\":true,\"extra\":1}", LoadMode::Strict).is_err());
    }

    #[test]
    fn offline_build_filters_failures() {
        let eps = vec![record("buy shoes", true), record("buy a hat", true), record("buy socks", true), record("x", false)];
        let b = build_offline(&eps, &ScriptedBackend::new(), &HashEmbedder::default(), &PipelineConfig::default());
        assert_eq!(b.report.filtered_unsuccessful, 1);
        assert_eq!(b.report.inserted.len(), 3);
        // All three normalize to the same intent with no constraint keys.
        assert_eq!((b.report.tasks, b.report.subgoals, b.report.steps), (1, 6, 6));
        let empty = build_offline(&[], &ScriptedBackend::new(), &HashEmbedder::default(), &PipelineConfig::default());
        assert!(empty.tree.is_empty() && empty.report.inserted.is_empty());
    }

    #[test]
    fn snapshot_round_trip_and_errors() {
        let eps = vec![record("buy shoes", true), record("book a flight to Paris", true)];
        let b = build_offline(&eps, &ScriptedBackend::new(), &HashEmbedder::default(), &PipelineConfig::default());
        let bytes = encode_snapshot(&b.tree);
        let back = decode_snapshot(&bytes).unwrap();
        assert_eq!(back, b.tree);
        assert_eq!(encode_snapshot(&back), bytes);
        assert!(matches!(decode_snapshot(&bytes[..bytes.len() - 3]), Err(SnapshotError::Checksum)));
        assert!(matches!(decode_snapshot(&bytes[..10]), Err(SnapshotError::Checksum)));
        let mut old = bytes.clone();
        old[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_snapshot(&old), Err(SnapshotError::Version { found: 0, .. })));
        assert!(matches!(decode_snapshot(b"not a snapshot at all"), Err(SnapshotError::BadMagic)));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(decode_snapshot(&flipped), Err(SnapshotError::Checksum)));
        let text = String::from_utf8_lossy(&bytes);
        assert!(!text.contains("x-1") && !text.contains("x-2"));
    }
}
