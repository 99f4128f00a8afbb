//! Mechanism metrics: retrieval recall, grounding success, step and task
//! success, and context size.

use std::collections::{BTreeMap, BTreeSet};

use hmt_core::backend::Backend;
use hmt_core::embedding::{element_match_score, Embedder};
use hmt_core::inference::{pick_element, run_episode, Agent, AgentSettings, Environment, SideIndex, StepTrace};
use hmt_core::memory::{Action, Instruction, MemoryTree, NodeId};
use hmt_core::retrieval::HistoryItem;
use serde::{Deserialize, Serialize};

use crate::site::{SimEnv, SimTask, SiteSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingMode {
    Descriptor,
    RawId,
}

/// Memory plus the bookkeeping that maps stored steps back to the logical
/// element they were recorded on.
pub struct Memory<'a> {
    pub tree: &'a MemoryTree,
    pub side: &'a SideIndex,
    /// Source uid → logical key, over every site seen at build time.
    pub source_keys: &'a BTreeMap<String, String>,
}

impl Memory<'_> {
    pub fn key_of(&self, step: NodeId) -> Option<&str> {
        self.side.raw_ids.get(&step).and_then(|uid| self.source_keys.get(uid)).map(String::as_str)
    }

    pub fn covered_keys(&self) -> BTreeSet<&str> {
        self.tree.steps().keys().filter_map(|id| self.key_of(*id)).collect()
    }

    /// Lowest-id stored step recorded on the logical element `key`.
    pub fn exemplar_for(&self, key: &str) -> Option<NodeId> {
        self.tree.steps().keys().copied().find(|id| self.key_of(*id) == Some(key))
    }
}

/// One evaluated step under teacher forcing.
#[derive(Debug, Clone)]
pub struct ForcedStep {
    pub key: String,
    pub expected: Action,
    pub chosen: Action,
    pub trace: StepTrace,
}

fn history_item(site: &SiteSpec, page: &str, a: &Action) -> HistoryItem {
    let label = site.pages[page].elements.iter().find(|e| e.uid == a.target).map(|e| e.text.clone()).unwrap_or_default();
    HistoryItem { op: a.op, label, arg: a.arg.clone() }
}

/// Runs the agent at every ground-truth step, then executes the ground-truth
/// action, so each step sees the intended page and history.
pub fn teacher_forced(
    agent: &mut Agent<'_>,
    site: &SiteSpec,
    task: &SimTask,
) -> Vec<ForcedStep> {
    agent.reset();
    let mut env = SimEnv::for_task(site, task);
    let mut history: Vec<HistoryItem> = Vec::new();
    let mut out = Vec::new();
    for gt in &task.ground_truth {
        let o = env.observe();
        let (chosen, trace) = agent.run_step(&task.instruction, &history, &o);
        let key = site.keys.get(&gt.action.target).cloned().unwrap_or_default();
        out.push(ForcedStep { key, expected: gt.action.clone(), chosen, trace });
        history.push(history_item(site, env.page_id(), &gt.action));
        let resolved = hmt_core::resolver::EnvAction::ById {
            op: gt.action.op,
            uid: gt.action.target.clone(),
            arg: gt.action.arg.clone(),
        };
        env.apply(&resolved).expect("ground truth is executable");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    /// Over every evaluated step.
    pub all_steps: f64,
    /// Over steps whose element has at least one stored step.
    pub covered_steps: f64,
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Recall over already collected traces: a step is a hit when any retrieved
/// exemplar was recorded on the same logical element.
pub fn recall_of(mem: &Memory<'_>, steps: &[ForcedStep]) -> Recall {
    let covered = mem.covered_keys();
    let mut hits = 0;
    let mut covered_hits = 0;
    let mut covered_n = 0;
    for s in steps {
        let hit = s.trace.exemplars.iter().any(|e| mem.key_of(e.node_id) == Some(s.key.as_str()));
        hits += usize::from(hit);
        if covered.contains(s.key.as_str()) {
            covered_n += 1;
            covered_hits += usize::from(hit);
        }
    }
    Recall { all_steps: fraction(hits, steps.len()), covered_steps: fraction(covered_hits, covered_n) }
}

/// Recall@k of the agent's exemplar retrieval on `tasks`.
pub fn measure_recall(
    mem: &Memory<'_>,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    settings: &AgentSettings,
    site: &SiteSpec,
    tasks: &[SimTask],
    k: usize,
) -> Recall {
    let mut s = settings.clone();
    s.retrieval.k_s = k;
    let mut agent = Agent::new(mem.tree, backend, embedder, s).with_side_index(mem.side);
    let steps: Vec<ForcedStep> = tasks.iter().flat_map(|t| teacher_forced(&mut agent, site, t)).collect();
    recall_of(mem, &steps)
}

/// Grounding with the oracle exemplar for each ground-truth step, isolating
/// grounding from retrieval. Steps without a stored exemplar count as misses.
pub fn measure_grounding(
    mem: &Memory<'_>,
    settings: &AgentSettings,
    site: &SiteSpec,
    tasks: &[SimTask],
    mode: GroundingMode,
) -> f64 {
    let mut hits = 0;
    let mut n = 0;
    for task in tasks {
        for gt in &task.ground_truth {
            n += 1;
            let Some(key) = site.keys.get(&gt.action.target) else { continue };
            let Some(id) = mem.exemplar_for(key) else { continue };
            let page = &site.pages[&gt.page];
            let ok = match mode {
                GroundingMode::RawId => mem
                    .side
                    .raw_ids
                    .get(&id)
                    .is_some_and(|uid| *uid == gt.action.target && page.elements.iter().any(|e| e.uid == *uid)),
                GroundingMode::Descriptor => {
                    let desc = &mem.tree.steps()[&id].descriptor;
                    let w = &settings.grounding.weights;
                    let scores: Vec<f64> = page
                        .elements
                        .iter()
                        .map(|e| element_match_score(desc, e.role, &e.text, &e.context, w))
                        .collect();
                    pick_element(&scores, settings.grounding.floor)
                        .is_some_and(|i| page.elements[i].uid == gt.action.target)
                }
            };
            hits += usize::from(ok);
        }
    }
    fraction(hits, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at_k: f64,
    pub recall_at_k_covered: f64,
    pub grounding_success: f64,
    pub step_sr: f64,
    pub task_sr: f64,
    pub avg_steps: f64,
    pub avg_context_tokens: u64,
    pub tasks: usize,
    pub steps: usize,
}

/// Every metric for one variant on one split.
pub fn evaluate(
    mem: &Memory<'_>,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    settings: &AgentSettings,
    split: &[(&SiteSpec, Vec<SimTask>)],
) -> MetricsReport {
    let mut forced: Vec<ForcedStep> = Vec::new();
    let mut agent = Agent::new(mem.tree, backend, embedder, settings.clone()).with_side_index(mem.side);
    for (site, tasks) in split {
        for t in tasks {
            forced.extend(teacher_forced(&mut agent, site, t));
        }
    }
    let recall = recall_of(mem, &forced);
    let correct = forced.iter().filter(|s| s.chosen == s.expected).count();
    let tokens: usize = forced.iter().map(|s| s.trace.context_tokens).sum();

    let mode = if settings.toggles.use_raw_ids { GroundingMode::RawId } else { GroundingMode::Descriptor };
    let mut grounded = 0.0;
    let mut tasks = 0;
    let mut successes = 0;
    let mut steps_taken = 0;
    let mut tree = mem.tree.clone();
    let mut side = mem.side.clone();
    for (site, ts) in split {
        grounded += measure_grounding(mem, settings, site, ts, mode) * ts.iter().map(|t| t.ground_truth.len()).sum::<usize>() as f64;
        for t in ts {
            tasks += 1;
            let mut env = SimEnv::for_task(site, t);
            let q = Instruction::new(t.instruction.clone()).expect("task instructions are non-empty");
            let max_steps = t.ground_truth.len() + 3;
            if let Ok(out) = run_episode(&mut env, &mut tree, &mut side, backend, embedder, settings, &q, max_steps, false) {
                successes += usize::from(out.success);
                steps_taken += out.trajectory.len();
            }
        }
    }
    let n = forced.len();
    MetricsReport {
        recall_at_k: recall.all_steps,
        recall_at_k_covered: recall.covered_steps,
        grounding_success: if n == 0 { 0.0 } else { grounded / n as f64 },
        step_sr: fraction(correct, n),
        task_sr: fraction(successes, tasks),
        avg_steps: if tasks == 0 { 0.0 } else { steps_taken as f64 / tasks as f64 },
        avg_context_tokens: if n == 0 { 0 } else { (tokens as f64 / n as f64).round() as u64 },
        tasks,
        steps: n,
    }
}
