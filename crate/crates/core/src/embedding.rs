//! Embedding providers, similarity primitives and an exact top-K index.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{ElementDescriptor, NodeId, Role, SubgoalNode};

pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedding service failed (retryable): {0}")]
    Remote(String),
    #[error("embedding service returned a malformed response: {0}")]
    Malformed(String),
    #[error("expected dimension {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Remote(_))
    }
}

/// Dense embedding. Entries are finite; node embeddings are unit-norm.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f32>);

impl Vector {
    pub fn zeros(dimension: usize) -> Self {
        Self(vec![0.0; dimension])
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
    }

    /// All-zero (or empty) vectors carry no content.
    pub fn is_degenerate(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn normalized(values: &[f64]) -> Self {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Self(vec![0.0; values.len()]);
        }
        Self(values.iter().map(|x| (x / norm) as f32).collect())
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vector, EmbedError>;
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed bag-of-tokens embedder. Platform independent: FNV-1a over UTF-8
/// token bytes selects the bucket, counts are L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vector, EmbedError> {
        let mut counts = vec![0.0f64; self.dimension];
        for tok in tokenize(text) {
            let bucket = (fnv1a(tok.as_bytes()) % self.dimension as u64) as usize;
            counts[bucket] += 1.0;
        }
        Ok(Vector::normalized(&counts))
    }
}

/// Embedder backed by an embeddings endpoint (`POST {base_url}/embeddings`).
pub struct RemoteEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, dimension: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(crate::backend::API_KEY_ENV).ok(),
            dimension,
            agent,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vector, EmbedError> {
        if tokenize(text).is_empty() {
            return Ok(Vector::zeros(self.dimension));
        }
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let body = serde_json::json!({ "model": self.model, "input": text }).to_string();
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| EmbedError::Remote(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EmbedError::Remote(e.to_string()))?;
        if status >= 400 {
            return Err(EmbedError::Remote(format!("HTTP {status}: {text}")));
        }
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| EmbedError::Malformed(e.to_string()))?;
        let values: Vec<f64> = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| EmbedError::Malformed("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().filter(|f| f.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| EmbedError::Malformed("non-numeric embedding entry".into()))?;
        if values.len() != self.dimension {
            return Err(EmbedError::Dimension { expected: self.dimension, actual: values.len() });
        }
        Ok(Vector::normalized(&values))
    }
}

/// Cosine similarity in f64. Degenerate vectors or mismatched dimensions
/// score 0.
pub fn cosine(u: &Vector, v: &Vector) -> f64 {
    if u.dimension() != v.dimension() || u.is_degenerate() || v.is_degenerate() {
        return 0.0;
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    (dot / (u.norm() * v.norm())).clamp(-1.0, 1.0)
}

/// |a ∩ b| / |a ∪ b|; two empty sets match vacuously (1.0).
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Which condition lists participate in condition matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    #[default]
    Union,
    PreOnly,
}

pub fn condition_tokens(pre: &[String], post: &[String], mode: CondMode) -> BTreeSet<String> {
    let mut tokens: BTreeSet<String> = pre.iter().flat_map(|c| tokenize(c)).collect();
    if mode == CondMode::Union {
        tokens.extend(post.iter().flat_map(|c| tokenize(c)));
    }
    tokens
}

/// Lexical overlap between a subgoal's conditions and an observation summary.
pub fn cond_match(g: &SubgoalNode, obs_summary: &str, mode: CondMode) -> f64 {
    jaccard(
        &condition_tokens(&g.pre_conditions, &g.post_conditions, mode),
        &token_set(obs_summary),
    )
}

/// Weights of the element grounding score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingWeights {
    pub role: f64,
    pub label: f64,
    pub context: f64,
}

impl Default for GroundingWeights {
    fn default() -> Self {
        Self { role: 0.5, label: 0.3, context: 0.2 }
    }
}

/// Match between a stored descriptor and a live element:
/// `role·[roles equal] + label·J(label, text) + context·J(contexts)`.
pub fn element_match_score(
    desc: &ElementDescriptor,
    role: Role,
    text: &str,
    context: &[String],
    w: &GroundingWeights,
) -> f64 {
    let role_term = if desc.role == role { 1.0 } else { 0.0 };
    let label_term = jaccard(&token_set(&desc.label), &token_set(text));
    let desc_ctx: BTreeSet<String> = desc.context.iter().flat_map(|c| tokenize(c)).collect();
    let elem_ctx: BTreeSet<String> = context.iter().flat_map(|c| tokenize(c)).collect();
    let ctx_term = jaccard(&desc_ctx, &elem_ctx);
    w.role * role_term + w.label * label_term + w.context * ctx_term
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Task,
    Subgoal,
    Step,
}

impl Level {
    pub fn code(self) -> u8 {
        match self {
            Level::Task => 0,
            Level::Subgoal => 1,
            Level::Step => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Level::Task),
            1 => Some(Level::Subgoal),
            2 => Some(Level::Step),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub node_id: NodeId,
    pub level: Level,
    pub vector: Vector,
}

/// A scored node; higher is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub node_id: NodeId,
    pub score: f64,
}

/// Descending score, ascending id on ties.
pub fn rank_order(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.node_id.cmp(&b.node_id))
}

/// Exact, brute-force cosine index keyed by node id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorIndex {
    dimension: usize,
    entries: BTreeMap<NodeId, IndexEntry>,
}

impl VectorIndex {
    pub fn new(dimension: usize) -> Self {
        Self { dimension, entries: BTreeMap::new() }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: NodeId) -> Option<&IndexEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries.values()
    }

    /// Inserts or replaces the entry for `entry.node_id`.
    pub fn insert(&mut self, entry: IndexEntry) {
        self.entries.insert(entry.node_id, entry);
    }

    fn top(mut scored: Vec<Scored>, k: usize) -> Vec<Scored> {
        scored.sort_by(rank_order);
        scored.truncate(k);
        scored
    }

    /// Top-`k` nodes of one level by cosine to `query`.
    pub fn topk(&self, query: &Vector, level: Level, k: usize) -> Vec<Scored> {
        let scored = self
            .entries
            .values()
            .filter(|e| e.level == level)
            .map(|e| Scored { node_id: e.node_id, score: cosine(query, &e.vector) })
            .collect();
        Self::top(scored, k)
    }

    /// Top-`k` among an explicit candidate set; unknown ids are skipped.
    pub fn topk_among(&self, ids: &[NodeId], query: &Vector, k: usize) -> Vec<Scored> {
        let scored = ids
            .iter()
            .filter_map(|id| self.entries.get(id))
            .map(|e| Scored { node_id: e.node_id, score: cosine(query, &e.vector) })
            .collect();
        Self::top(scored, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::PositionHint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn embedding_is_deterministic_and_order_invariant() {
        let e = HashEmbedder::default();
        let a = e.embed("search flights").unwrap();
        assert_eq!(a, e.embed("search flights").unwrap());
        assert_eq!(a, e.embed("Flights, SEARCH!").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_text_is_degenerate() {
        let e = HashEmbedder::default();
        let z = e.embed("").unwrap();
        assert!(z.is_degenerate());
        assert_eq!(cosine(&z, &e.embed("anything").unwrap()), 0.0);
        assert_eq!(cosine(&z, &z), 0.0);
    }

    #[test]
    fn hashed_buckets_are_pinned() {
        let e = HashEmbedder::new(256);
        let v = e.embed("search").unwrap();
        let hot: Vec<usize> = v.0.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, _)| i).collect();
        assert_eq!(hot, vec![(fnv1a(b"search") % 256) as usize]);
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn cosine_closed_forms() {
        let u = Vector(vec![1.0, 0.0]);
        let v = Vector(vec![1.0, 1.0]);
        assert!((cosine(&u, &u) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&u, &Vector(vec![0.0, 1.0])), 0.0);
        assert!((cosine(&u, &v) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard(&set(&["a", "b"]), &set(&["a", "b"])), 1.0);
        assert_eq!(jaccard(&set(&["a"]), &set(&["b"])), 0.0);
        assert_eq!(jaccard(&set(&["a", "b", "c"]), &set(&["b", "c", "d"])), 0.5);
        assert_eq!(jaccard::<String>(&BTreeSet::new(), &BTreeSet::new()), 1.0);
    }

    fn subgoal(pre: &[&str], post: &[&str]) -> SubgoalNode {
        SubgoalNode {
            id: NodeId(1),
            name: "x".into(),
            pre_conditions: pre.iter().map(|s| s.to_string()).collect(),
            post_conditions: post.iter().map(|s| s.to_string()).collect(),
            embedding: Vector::default(),
            children: vec![],
            parent: NodeId(0),
        }
    }

    #[test]
    fn cond_match_cases() {
        let g = subgoal(&["Search results visible"], &["Price filter applied"]);
        assert_eq!(
            cond_match(&g, "search results visible price filter applied", CondMode::Union),
            1.0
        );
        assert_eq!(cond_match(&g, "checkout basket", CondMode::Union), 0.0);
        // {search, results, visible} shared; union of 8 tokens.
        assert_eq!(
            cond_match(&g, "button:Search; results visible; sort button", CondMode::Union),
            0.375
        );
        // Pre-only: {search, results, visible} vs summary {search, results, visible, sort, button}.
        assert_eq!(
            cond_match(&g, "button:Search; results visible; sort button", CondMode::PreOnly),
            0.6
        );
    }

    #[test]
    fn grounding_score_distractor_case() {
        let w = GroundingWeights::default();
        let desc = ElementDescriptor {
            role: Role::Button,
            label: "Select flight".into(),
            position_hint: PositionHint::Unknown,
            context: vec![],
        };
        let promo = element_match_score(&desc, Role::Link, "Best flight deals", &[], &w);
        let select = element_match_score(&desc, Role::Button, "Select", &[], &w);
        // Context terms are both the vacuous empty/empty match (0.2).
        assert!((promo - (0.3 * 0.25 + 0.2)).abs() < 1e-12);
        assert!((select - (0.5 + 0.3 * 0.5 + 0.2)).abs() < 1e-12);
        assert!(select > promo);
        let exact = element_match_score(&desc, Role::Button, "Select flight", &[], &w);
        assert!((exact - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_small_cases() {
        let mut idx = VectorIndex::new(2);
        let v = Vector(vec![1.0, 0.0]);
        for id in [3, 1, 2] {
            idx.insert(IndexEntry { node_id: NodeId(id), level: Level::Step, vector: v.clone() });
        }
        idx.insert(IndexEntry { node_id: NodeId(9), level: Level::Task, vector: v.clone() });
        let got = idx.topk(&v, Level::Step, 10);
        assert_eq!(got.iter().map(|s| s.node_id.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(idx.topk(&v, Level::Subgoal, 3).is_empty());
    }

    // Brute-force oracle: score everything, sort by (-score, id).
    fn brute(entries: &[(u64, Vector)], q: &Vector, k: usize) -> Vec<u64> {
        let mut all: Vec<(f64, u64)> = entries.iter().map(|(id, v)| (cosine(q, v), *id)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, id)| id).collect()
    }

    #[test]
    fn topk_matches_brute_force_on_ten_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rand_vec = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Vector::normalized(&raw)
        };
        let entries: Vec<(u64, Vector)> = (1..=10).map(|id| (id, rand_vec(&mut rng))).collect();
        let mut idx = VectorIndex::new(8);
        for (id, v) in &entries {
            idx.insert(IndexEntry { node_id: NodeId(*id), level: Level::Subgoal, vector: v.clone() });
        }
        let q = rand_vec(&mut rng);
        let got: Vec<u64> = idx.topk(&q, Level::Subgoal, 3).iter().map(|s| s.node_id.0).collect();
        assert_eq!(got, brute(&entries, &q, 3));
    }

    proptest! {
        #[test]
        fn cosine_and_jaccard_are_symmetric(
            a in proptest::collection::vec(-1.0f32..1.0, 6),
            b in proptest::collection::vec(-1.0f32..1.0, 6),
            s in proptest::collection::btree_set("[a-d]", 0..4),
            t in proptest::collection::btree_set("[a-d]", 0..4),
        ) {
            let (u, v) = (Vector(a), Vector(b));
            prop_assert_eq!(cosine(&u, &v), cosine(&v, &u));
            let c = cosine(&u, &v);
            prop_assert!((-1.0..=1.0).contains(&c));
            let j = jaccard(&s, &t);
            prop_assert_eq!(j, jaccard(&t, &s));
            prop_assert!((0.0..=1.0).contains(&j));
        }

        #[test]
        fn local_provider_cosines_are_non_negative(a in "[a-z ]{0,40}", b in "[a-z ]{0,40}") {
            let e = HashEmbedder::new(32);
            let c = cosine(&e.embed(&a).unwrap(), &e.embed(&b).unwrap());
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        }
    }
}
