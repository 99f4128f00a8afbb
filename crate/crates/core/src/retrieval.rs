//! Top-down retrieval over the memory tree and the text summaries that feed
//! its queries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cond_match, cosine, rank_order, CondMode, EmbedError, Embedder, Level, Scored, Vector};
use crate::memory::{MemoryTree, NodeId, Observation, Op, Role, SubgoalNode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_t: usize,
    pub k_g: usize,
    pub k_s: usize,
    pub n_h: usize,
    pub n_e: usize,
    pub lambda: f64,
    pub cond_mode: CondMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k_t: 5, k_g: 8, k_s: 5, n_h: 6, n_e: 30, lambda: 0.3, cond_mode: CondMode::Union }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid retrieval config: {0}")]
pub struct ConfigError(pub String);

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, k) in [("k_t", self.k_t), ("k_g", self.k_g), ("k_s", self.k_s), ("n_h", self.n_h), ("n_e", self.n_e)] {
            if k == 0 {
                return Err(ConfigError(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ConfigError(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub node_id: NodeId,
    pub total: f64,
    pub cosine: f64,
    pub cond: f64,
}

/// Sorted by total descending, ascending id on ties.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub entries: Vec<RankedEntry>,
}

impl RankedCandidates {
    fn from_entries(mut entries: Vec<RankedEntry>, k: usize) -> Self {
        entries.sort_by(|a, b| {
            rank_order(&Scored { node_id: a.node_id, score: a.total }, &Scored { node_id: b.node_id, score: b.total })
        });
        entries.truncate(k);
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.node_id).collect()
    }
}

/// Indices of `elements` by salience: interactive roles first, then longer
/// visible text, then document order.
pub fn salience_order(elements: &[(Role, &str)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..elements.len()).collect();
    order.sort_by_key(|&i| {
        let (role, text) = elements[i];
        (!role.is_interactive(), std::cmp::Reverse(text.trim().chars().count()), i)
    });
    order
}

fn clean(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn summarize_observation(o: &Observation, n_e: usize) -> String {
    let pairs: Vec<(Role, &str)> = o.elements.iter().map(|e| (e.role, e.text.as_str())).collect();
    salience_order(&pairs)
        .into_iter()
        .take(n_e)
        .map(|i| format!("{}:{}", pairs[i].0, clean(pairs[i].1)))
        .collect::<Vec<_>>()
        .join("; ")
}

/// One executed action as remembered for history summaries. `label` is the
/// stored descriptor label when known, else the element's visible text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub op: Op,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<String>,
}

pub fn summarize_history(h: &[HistoryItem], n_h: usize) -> String {
    h[h.len().saturating_sub(n_h)..]
        .iter()
        .map(|a| {
            let mut parts = Vec::new();
            if !a.label.trim().is_empty() {
                parts.push(clean(&a.label));
            }
            if let Some(arg) = &a.arg {
                parts.push(arg.clone());
            }
            format!("{}({})", a.op, parts.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_subgoal_query(q: &str, h_summary: &str, o_summary: &str) -> String {
    format!("task: {q} | history: {h_summary} | page: {o_summary}")
}

/// Blended subgoal score; returns `(total, cosine_part, cond_part)`.
pub fn score_subgoal(g: &SubgoalNode, q_vec: &Vector, o_summary: &str, lambda: f64, mode: CondMode) -> (f64, f64, f64) {
    let cos = cosine(q_vec, &g.embedding);
    let cond = cond_match(g, o_summary, mode);
    ((1.0 - lambda) * cos + lambda * cond, cos, cond)
}

pub fn retrieve_tasks(
    tree: &MemoryTree,
    embedder: &dyn Embedder,
    q: &str,
    cfg: &RetrievalConfig,
) -> Result<RankedCandidates, EmbedError> {
    if tree.tasks().is_empty() {
        return Ok(RankedCandidates::default());
    }
    let qv = embedder.embed(q)?;
    let entries = tree
        .index()
        .topk(&qv, Level::Task, cfg.k_t)
        .into_iter()
        .map(|s| RankedEntry { node_id: s.node_id, total: s.score, cosine: s.score, cond: 0.0 })
        .collect();
    Ok(RankedCandidates { entries })
}

/// Subgoal children of the given tasks, in task rank order.
pub fn subgoal_pool(tree: &MemoryTree, tasks: &RankedCandidates) -> Vec<NodeId> {
    tasks
        .entries
        .iter()
        .filter_map(|t| tree.task(t.node_id))
        .flat_map(|t| t.children.iter().copied())
        .collect()
}

/// Scores every subgoal under the retrieved tasks and keeps the top `k`.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_subgoals_k(
    tree: &MemoryTree,
    embedder: &dyn Embedder,
    tasks: &RankedCandidates,
    q: &str,
    h_summary: &str,
    o_summary: &str,
    cfg: &RetrievalConfig,
    k: usize,
) -> Result<RankedCandidates, EmbedError> {
    let qv = embedder.embed(&build_subgoal_query(q, h_summary, o_summary))?;
    let entries = subgoal_pool(tree, tasks)
        .into_iter()
        .filter_map(|id| tree.subgoal(id))
        .map(|g| {
            let (total, cosine, cond) = score_subgoal(g, &qv, o_summary, cfg.lambda, cfg.cond_mode);
            RankedEntry { node_id: g.id, total, cosine, cond }
        })
        .collect();
    Ok(RankedCandidates::from_entries(entries, k))
}

pub fn retrieve_subgoals(
    tree: &MemoryTree,
    embedder: &dyn Embedder,
    tasks: &RankedCandidates,
    q: &str,
    h_summary: &str,
    o_summary: &str,
    cfg: &RetrievalConfig,
) -> Result<RankedCandidates, EmbedError> {
    retrieve_subgoals_k(tree, embedder, tasks, q, h_summary, o_summary, cfg, cfg.k_g)
}

/// Exemplar steps under `g`, ranked by similarity to the page summary.
pub fn retrieve_steps(
    tree: &MemoryTree,
    embedder: &dyn Embedder,
    g: &SubgoalNode,
    o: &Observation,
    cfg: &RetrievalConfig,
) -> Result<Vec<Scored>, EmbedError> {
    debug_assert!(!g.children.is_empty(), "committed subgoals always have steps");
    let qv = embedder.embed(&summarize_observation(o, cfg.n_e))?;
    Ok(tree.index().topk_among(&g.children, &qv, cfg.k_s))
}
