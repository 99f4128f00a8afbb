//! Stage-aware inference: task and stage retrieval, planner selection with a
//! confidence-gated fallback ladder, exemplar grounding, and the episode loop.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::schema::*;
use crate::backend::{call_structured, Backend, BackendError, BackendRequest, CallError, RequestRole};
use crate::embedding::{cond_match, CondMode, Embedder, GroundingWeights, Level, Scored};
use crate::memory::{
    Action, CommitIds, Constraint, MemoryTree, NodeId, Observation, Op, StepNode, SubgoalNode, Trajectory,
    TrajectoryStep,
};
use crate::pipeline::{normalize_instruction, online_insert, PipelineConfig, PipelineError};
use crate::resolver::{resolve, EnvAction, EnvironmentKind};
use crate::retrieval::{
    build_subgoal_query, retrieve_steps, retrieve_subgoals_k, retrieve_tasks, subgoal_pool, summarize_history,
    summarize_observation, HistoryItem, RankedCandidates, RankedEntry, RetrievalConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FallbackConfig {
    pub delta: f64,
    pub tau: f64,
    pub expand_factor: usize,
    pub max_expansions: usize,
    /// Post-condition match above which the previous stage counts as done.
    pub verify_threshold: f64,
}

impl Default for FallbackConfig {
    fn default() -> Self {
        Self { delta: 0.1, tau: 0.15, expand_factor: 2, max_expansions: 1, verify_threshold: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationToggles {
    pub flat_memory: bool,
    pub use_conditions: bool,
    pub use_raw_ids: bool,
    pub use_planner: bool,
    pub use_fallback: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        Self { flat_memory: false, use_conditions: true, use_raw_ids: false, use_planner: true, use_fallback: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    pub weights: GroundingWeights,
    /// Scores must be strictly above this to ground.
    pub floor: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self { weights: GroundingWeights::default(), floor: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSettings {
    pub retrieval: RetrievalConfig,
    pub fallback: FallbackConfig,
    pub grounding: GroundingConfig,
    pub toggles: AblationToggles,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerDecision {
    pub selected: usize,
    pub confidence: f64,
    pub distribution: Vec<f64>,
}

impl PlannerDecision {
    /// Normalizes a raw distribution; rejects wrong length, negative or
    /// non-finite entries and all-zero mass.
    pub fn from_raw(raw: &[f64], expected_len: usize) -> Result<Self, String> {
        if raw.len() != expected_len || expected_len == 0 {
            return Err(format!("distribution has {} entries, expected {expected_len}", raw.len()));
        }
        if raw.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err("distribution has negative or non-finite entries".into());
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err("distribution cannot be normalized".into());
        }
        let distribution: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let mut selected = 0;
        for (i, p) in distribution.iter().enumerate() {
            if *p > distribution[selected] {
                selected = i;
            }
        }
        Ok(Self { selected, confidence: distribution[selected], distribution })
    }

    /// Top-1 minus top-2 probability; the confidence itself for one candidate.
    pub fn margin(&self) -> f64 {
        let mut sorted = self.distribution.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        match sorted.as_slice() {
            [only] => *only,
            [a, b, ..] => a - b,
            [] => 0.0,
        }
    }
}

/// Low iff `margin < delta` or `confidence < tau`. Strict comparisons.
pub fn low_confidence_rule(margin: f64, confidence: f64, fb: &FallbackConfig) -> bool {
    margin < fb.delta || confidence < fb.tau
}

pub fn is_low_confidence(d: &PlannerDecision, fb: &FallbackConfig) -> bool {
    low_confidence_rule(d.margin(), d.confidence, fb)
}

/// Retrieval width after one expansion, capped by the pool size.
pub fn expanded_width(k_g: usize, pool: usize, fb: &FallbackConfig) -> usize {
    (k_g.saturating_mul(fb.expand_factor.max(1))).min(pool)
}

/// Step-id side tables kept outside the tree: recorded source uids for the
/// raw-id ablation and raw trajectory text for the flat baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SideIndex {
    pub raw_ids: BTreeMap<NodeId, String>,
    pub raw_context: BTreeMap<NodeId, String>,
}

/// Raw trajectory text: instruction, then each page summary and action with
/// its recorded target.
pub fn render_raw_trajectory(traj: &Trajectory, n_e: usize) -> String {
    let mut lines = vec![format!("instruction: {}", traj.instruction)];
    for (i, s) in traj.steps.iter().enumerate() {
        lines.push(format!(
            "step {}: page {} | {} | {} {} {}",
            i + 1,
            s.observation.url,
            summarize_observation(&s.observation, n_e),
            s.action.op,
            s.action.target,
            s.action.arg.as_deref().unwrap_or("")
        ));
    }
    lines.join("\n")
}

impl SideIndex {
    pub fn record(&mut self, ids: &CommitIds, traj: &Trajectory, n_e: usize) {
        let raw = render_raw_trajectory(traj, n_e);
        for (id, step) in ids.steps.iter().zip(&traj.steps) {
            if !step.action.target.is_empty() {
                self.raw_ids.insert(*id, step.action.target.clone());
            }
            self.raw_context.insert(*id, raw.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    EmptyMemory,
    NoTasks,
    RetrievalError { reason: String },
    StateFallback { reason: String },
    PlannerError { reason: String },
    LowConfidence { margin: f64, confidence: f64 },
    Expanded { k_g: usize },
    ExpansionUnavailable,
    NoExemplars,
    GroundingFailed { reason: String },
    BasePolicy,
    BasePolicyError { reason: String },
    StageVerified { subgoal: NodeId, post_match: f64, complete: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    Memory,
    BasePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRecord {
    pub candidates: Vec<NodeId>,
    pub distribution: Vec<f64>,
    pub selected: usize,
    pub margin: f64,
    pub low: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub tasks: Vec<RankedEntry>,
    pub subgoals: Vec<RankedEntry>,
    pub planner: Vec<PlannerRecord>,
    pub chosen_subgoal: Option<NodeId>,
    pub exemplars: Vec<Scored>,
    pub grounding_scores: Vec<f64>,
    pub chosen_exemplar: Option<NodeId>,
    pub events: Vec<TraceEvent>,
    pub source: Option<ActionSource>,
    pub action: Option<Action>,
    pub context_tokens: usize,
}

impl StepTrace {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("traces serialize")
    }

    pub fn expansions(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, TraceEvent::Expanded { .. })).count()
    }
}

/// Counts context words across every request of one step.
struct Metered<'a> {
    inner: &'a dyn Backend,
    tokens: AtomicUsize,
}

impl Backend for Metered<'_> {
    fn complete(&self, req: &BackendRequest) -> Result<String, BackendError> {
        self.tokens.fetch_add(req.context_tokens(), Ordering::Relaxed);
        self.inner.complete(req)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundError {
    #[error("no exemplars")]
    NoExemplars,
    #[error("no element scored above the floor")]
    BelowFloor,
    #[error("no recorded source id for the exemplar")]
    NoRawId,
    #[error(transparent)]
    Backend(#[from] CallError),
}

pub fn abstract_state(o: &Observation, backend: &dyn Backend, n_e: usize, retries: usize) -> Result<String, CallError> {
    let req = BackendRequest::new(RequestRole::AbstractState, &AbstractStatePayload { observation_summary: summarize_observation(o, n_e) });
    call_structured(backend, &req, retries, |_: &AbstractStateResponse| Ok(())).map(|r| r.state)
}

pub fn planner_select(
    q: &str,
    state: &str,
    subgoals: &[&SubgoalNode],
    use_conditions: bool,
    backend: &dyn Backend,
    retries: usize,
) -> Result<PlannerDecision, CallError> {
    let payload = PlannerPayload {
        instruction: q.into(),
        state: state.into(),
        candidates: subgoals
            .iter()
            .map(|g| PlannerCandidate {
                name: g.name.clone(),
                pre_conditions: if use_conditions { g.pre_conditions.clone() } else { Vec::new() },
                post_conditions: if use_conditions { g.post_conditions.clone() } else { Vec::new() },
            })
            .collect(),
    };
    let n = subgoals.len();
    let req = BackendRequest::new(RequestRole::Planner, &payload);
    let r: PlannerResponse =
        call_structured(backend, &req, retries, |r: &PlannerResponse| PlannerDecision::from_raw(&r.distribution, n).map(|_| ()))?;
    PlannerDecision::from_raw(&r.distribution, n)
        .map_err(|reason| CallError { role: RequestRole::Planner, attempts: 1, reason, raw: None })
}

fn candidates(o: &Observation) -> Vec<CandidateElement> {
    o.elements
        .iter()
        .enumerate()
        .map(|(index, e)| CandidateElement { index, role: e.role, text: e.text.clone(), context: e.context.clone() })
        .collect()
}

/// Memory-free policy from instruction, history and page only. Failures
/// yield STOP.
pub fn fallback_base_policy(
    q: &str,
    h_summary: &str,
    o: &Observation,
    backend: &dyn Backend,
    n_e: usize,
    retries: usize,
) -> (Action, Option<String>) {
    let payload = BasePolicyPayload {
        instruction: q.into(),
        history: h_summary.into(),
        page: summarize_observation(o, n_e),
        elements: candidates(o),
    };
    let req = BackendRequest::new(RequestRole::BasePolicy, &payload);
    let n = o.elements.len();
    let result = call_structured(backend, &req, retries, |r: &BasePolicyResponse| {
        if r.op.targets_element() && !r.element_index.is_some_and(|i| i < n) {
            return Err("element_index missing or out of range".into());
        }
        Ok(())
    });
    match result {
        Ok(r) if r.op.targets_element() => {
            let uid = r.element_index.and_then(|i| o.elements.get(i)).map(|e| e.uid.clone()).unwrap_or_default();
            (Action { op: r.op, target: uid, arg: r.arg }, None)
        }
        Ok(r) => (Action { op: r.op, target: String::new(), arg: r.arg }, None),
        Err(e) => (Action::stop(), Some(e.to_string())),
    }
}

/// Fills `{key}` placeholders; unknown keys stay literal.
pub fn instantiate(template: &str, constraints: &[Constraint]) -> String {
    let mut out = template.to_string();
    for c in constraints {
        out = out.replace(&format!("{{{}}}", c.key), &c.value);
    }
    out
}

/// Argmax above `floor`, earliest index on ties.
pub fn pick_element(scores: &[f64], floor: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() || *s <= floor {
            continue;
        }
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

pub struct GroundOutcome {
    pub action: Action,
    pub exemplar: NodeId,
    pub scores: Vec<f64>,
}

/// True when `done` already holds this action on the same element text.
fn repeats(action: &Action, o: &Observation, done: &[HistoryItem]) -> bool {
    let Some(e) = o.element(&action.target) else {
        return false;
    };
    done.iter().any(|h| h.op == action.op && h.label == e.text && h.arg == action.arg)
}

/// Grounds the first exemplar that has an element above the floor and whose
/// action is not already in `done`. If every grounded action repeats one in
/// `done`, the first of them is returned.
#[allow(clippy::too_many_arguments)]
pub fn actor_ground(
    q: &str,
    o: &Observation,
    exemplars: &[&StepNode],
    constraints: &[Constraint],
    backend: &dyn Backend,
    settings: &AgentSettings,
    side: Option<&SideIndex>,
    exemplar_context: &[String],
    done: &[HistoryItem],
) -> Result<GroundOutcome, GroundError> {
    if exemplars.is_empty() {
        return Err(GroundError::NoExemplars);
    }
    let mut first_repeat: Option<GroundOutcome> = None;
    for ex in exemplars {
        let arg = ex.pattern.arg_template.as_deref().map(|t| instantiate(t, constraints));
        if !ex.pattern.op.targets_element() {
            return Ok(GroundOutcome {
                action: Action { op: ex.pattern.op, target: String::new(), arg },
                exemplar: ex.id,
                scores: Vec::new(),
            });
        }
        if settings.toggles.use_raw_ids {
            let uid = side.and_then(|s| s.raw_ids.get(&ex.id)).ok_or(GroundError::NoRawId)?;
            let outcome = GroundOutcome {
                action: Action { op: ex.pattern.op, target: uid.clone(), arg },
                exemplar: ex.id,
                scores: Vec::new(),
            };
            if repeats(&outcome.action, o, done) {
                first_repeat.get_or_insert(outcome);
                continue;
            }
            return Ok(outcome);
        }
        let payload = ActorPayload {
            instruction: q.into(),
            op: ex.pattern.op,
            descriptor: ex.descriptor.clone(),
            elements: candidates(o),
            weights: settings.grounding.weights,
            exemplar_context: exemplar_context.to_vec(),
        };
        let n = o.elements.len();
        let req = BackendRequest::new(RequestRole::Actor, &payload);
        let r: ActorResponse = call_structured(backend, &req, settings.pipeline.retries, |r: &ActorResponse| {
            if r.scores.len() == n { Ok(()) } else { Err(format!("{} scores for {n} elements", r.scores.len())) }
        })?;
        if let Some(i) = pick_element(&r.scores, settings.grounding.floor) {
            let outcome = GroundOutcome {
                action: Action { op: ex.pattern.op, target: o.elements[i].uid.clone(), arg },
                exemplar: ex.id,
                scores: r.scores,
            };
            if repeats(&outcome.action, o, done) {
                first_repeat.get_or_insert(outcome);
                continue;
            }
            return Ok(outcome);
        }
    }
    first_repeat.ok_or(GroundError::BelowFloor)
}

/// Per-episode inference state over a read-only tree.
pub struct Agent<'a> {
    tree: &'a MemoryTree,
    backend: &'a dyn Backend,
    embedder: &'a dyn Embedder,
    settings: AgentSettings,
    side: Option<&'a SideIndex>,
    constraints: BTreeMap<String, Vec<Constraint>>,
    last_stage: Option<NodeId>,
    step: usize,
}

impl<'a> Agent<'a> {
    pub fn new(tree: &'a MemoryTree, backend: &'a dyn Backend, embedder: &'a dyn Embedder, settings: AgentSettings) -> Self {
        Self { tree, backend, embedder, settings, side: None, constraints: BTreeMap::new(), last_stage: None, step: 0 }
    }

    pub fn with_side_index(mut self, side: &'a SideIndex) -> Self {
        self.side = Some(side);
        self
    }

    pub fn settings(&self) -> &AgentSettings {
        &self.settings
    }

    /// Clears per-episode state.
    pub fn reset(&mut self) {
        self.last_stage = None;
        self.step = 0;
    }

    fn constraints_for(&mut self, q: &str, backend: &dyn Backend) -> Vec<Constraint> {
        if let Some(c) = self.constraints.get(q) {
            return c.clone();
        }
        let c = normalize_instruction(q, backend, self.settings.pipeline.retries)
            .map(|n| n.constraints)
            .unwrap_or_default();
        self.constraints.insert(q.to_string(), c.clone());
        c
    }

    /// Chooses the next action. Never fails: every internal error routes to
    /// the base policy.
    pub fn run_step(&mut self, q: &str, history: &[HistoryItem], o: &Observation) -> (Action, StepTrace) {
        self.step += 1;
        let metered = Metered { inner: self.backend, tokens: AtomicUsize::new(0) };
        let mut trace = StepTrace { step: self.step, ..Default::default() };
        let h_summary = summarize_history(history, self.settings.retrieval.n_h);
        let done = &history[history.len().saturating_sub(self.settings.retrieval.n_h)..];
        let result = if self.settings.toggles.flat_memory {
            self.flat_step(q, &h_summary, done, o, &metered, &mut trace)
        } else {
            self.hierarchical_step(q, &h_summary, done, o, &metered, &mut trace)
        };
        let action = match result {
            Some(a) => {
                trace.source = Some(ActionSource::Memory);
                a
            }
            None => {
                trace.events.push(TraceEvent::BasePolicy);
                let (a, err) = fallback_base_policy(
                    q,
                    &h_summary,
                    o,
                    &metered,
                    self.settings.retrieval.n_e,
                    self.settings.pipeline.retries,
                );
                if let Some(reason) = err {
                    trace.events.push(TraceEvent::BasePolicyError { reason });
                }
                trace.source = Some(ActionSource::BasePolicy);
                a
            }
        };
        trace.action = Some(action.clone());
        trace.context_tokens = metered.tokens.load(Ordering::Relaxed);
        (action, trace)
    }

    fn flat_step(&mut self, q: &str, h_summary: &str, done: &[HistoryItem], o: &Observation, backend: &dyn Backend, trace: &mut StepTrace) -> Option<Action> {
        if self.tree.steps().is_empty() {
            trace.events.push(TraceEvent::EmptyMemory);
            return None;
        }
        let cfg = &self.settings.retrieval;
        let o_summary = summarize_observation(o, cfg.n_e);
        let qv = match self.embedder.embed(&build_subgoal_query(q, h_summary, &o_summary)) {
            Ok(v) => v,
            Err(e) => {
                trace.events.push(TraceEvent::RetrievalError { reason: e.to_string() });
                return None;
            }
        };
        let hits = self.tree.index().topk(&qv, Level::Step, cfg.k_s);
        trace.exemplars = hits.clone();
        let exemplars: Vec<&StepNode> = hits.iter().filter_map(|s| self.tree.step(s.node_id)).collect();
        let mut context: Vec<String> = Vec::new();
        if let Some(side) = self.side {
            for ex in &exemplars {
                if let Some(raw) = side.raw_context.get(&ex.id) {
                    if !context.contains(raw) {
                        context.push(raw.clone());
                    }
                }
            }
        }
        self.ground(q, o, &exemplars, &context, done, backend, trace)
    }

    #[allow(clippy::too_many_arguments)]
    fn ground(
        &mut self,
        q: &str,
        o: &Observation,
        exemplars: &[&StepNode],
        context: &[String],
        done: &[HistoryItem],
        backend: &dyn Backend,
        trace: &mut StepTrace,
    ) -> Option<Action> {
        if exemplars.is_empty() {
            trace.events.push(TraceEvent::NoExemplars);
            return None;
        }
        let needs_args = exemplars.iter().any(|e| e.pattern.arg_template.as_deref().is_some_and(|t| t.contains('{')));
        let constraints = if needs_args { self.constraints_for(q, backend) } else { Vec::new() };
        match actor_ground(q, o, exemplars, &constraints, backend, &self.settings, self.side, context, done) {
            Ok(g) => {
                trace.grounding_scores = g.scores;
                trace.chosen_exemplar = Some(g.exemplar);
                Some(g.action)
            }
            Err(e) => {
                trace.events.push(TraceEvent::GroundingFailed { reason: e.to_string() });
                None
            }
        }
    }

    fn hierarchical_step(&mut self, q: &str, h_summary: &str, done: &[HistoryItem], o: &Observation, backend: &dyn Backend, trace: &mut StepTrace) -> Option<Action> {
        if self.tree.is_empty() {
            trace.events.push(TraceEvent::EmptyMemory);
            return None;
        }
        let mut cfg = self.settings.retrieval.clone();
        let toggles = self.settings.toggles;
        let fb = self.settings.fallback.clone();
        if !toggles.use_conditions {
            cfg.lambda = 0.0;
        }
        let o_summary = summarize_observation(o, cfg.n_e);

        if let Some(prev) = self.last_stage.and_then(|id| self.tree.subgoal(id)) {
            let post_match = cond_match(
                &SubgoalNode { pre_conditions: Vec::new(), ..prev.clone() },
                &o_summary,
                CondMode::Union,
            );
            trace.events.push(TraceEvent::StageVerified {
                subgoal: prev.id,
                post_match,
                complete: post_match >= fb.verify_threshold,
            });
        }

        let tasks = match retrieve_tasks(self.tree, self.embedder, q, &cfg) {
            Ok(t) if t.is_empty() => {
                trace.events.push(TraceEvent::NoTasks);
                return None;
            }
            Ok(t) => t,
            Err(e) => {
                trace.events.push(TraceEvent::RetrievalError { reason: e.to_string() });
                return None;
            }
        };
        trace.tasks = tasks.entries.clone();
        let pool = subgoal_pool(self.tree, &tasks).len();
        let retrieve = |k: usize| retrieve_subgoals_k(self.tree, self.embedder, &tasks, q, h_summary, &o_summary, &cfg, k);
        let mut k_g = cfg.k_g;
        let mut ranked = match retrieve(k_g) {
            Ok(r) if !r.is_empty() => r,
            Ok(_) => {
                trace.events.push(TraceEvent::NoTasks);
                return None;
            }
            Err(e) => {
                trace.events.push(TraceEvent::RetrievalError { reason: e.to_string() });
                return None;
            }
        };
        trace.subgoals = ranked.entries.clone();

        let chosen: NodeId = if !toggles.use_planner {
            ranked.entries[0].node_id
        } else {
            let state = match abstract_state(o, backend, cfg.n_e, self.settings.pipeline.retries) {
                Ok(s) => s,
                Err(e) => {
                    trace.events.push(TraceEvent::StateFallback { reason: e.to_string() });
                    o_summary.clone()
                }
            };
            let mut expansions = 0;
            loop {
                let decision = self.plan(q, &state, &ranked, toggles.use_conditions, backend, trace);
                let confident = match &decision {
                    Some(d) => !is_low_confidence(d, &fb),
                    None => false,
                };
                if !toggles.use_fallback {
                    break match decision {
                        Some(d) => ranked.entries[d.selected].node_id,
                        None => ranked.entries[0].node_id,
                    };
                }
                if confident {
                    let d = decision.expect("confident implies a decision");
                    break ranked.entries[d.selected].node_id;
                }
                if let Some(d) = &decision {
                    trace.events.push(TraceEvent::LowConfidence { margin: d.margin(), confidence: d.confidence });
                }
                let wider = expanded_width(k_g, pool, &fb);
                if expansions >= fb.max_expansions || wider <= k_g {
                    if expansions < fb.max_expansions {
                        trace.events.push(TraceEvent::ExpansionUnavailable);
                    }
                    return None;
                }
                expansions += 1;
                k_g = wider;
                ranked = match retrieve(k_g) {
                    Ok(r) => r,
                    Err(e) => {
                        trace.events.push(TraceEvent::RetrievalError { reason: e.to_string() });
                        return None;
                    }
                };
                trace.events.push(TraceEvent::Expanded { k_g });
                trace.subgoals = ranked.entries.clone();
            }
        };
        trace.chosen_subgoal = Some(chosen);
        self.last_stage = Some(chosen);
        let g = self.tree.subgoal(chosen)?;
        let hits = match retrieve_steps(self.tree, self.embedder, g, o, &cfg) {
            Ok(h) => h,
            Err(e) => {
                trace.events.push(TraceEvent::RetrievalError { reason: e.to_string() });
                return None;
            }
        };
        trace.exemplars = hits.clone();
        // The stage records its steps in execution order; the actor walks
        // the retrieved exemplars in that order.
        let mut exemplars: Vec<&StepNode> = hits.iter().filter_map(|s| self.tree.step(s.node_id)).collect();
        exemplars.sort_by_key(|st| g.children.iter().position(|c| *c == st.id));
        self.ground(q, o, &exemplars, &[], done, backend, trace)
    }

    fn plan(
        &self,
        q: &str,
        state: &str,
        ranked: &RankedCandidates,
        use_conditions: bool,
        backend: &dyn Backend,
        trace: &mut StepTrace,
    ) -> Option<PlannerDecision> {
        let nodes: Vec<&SubgoalNode> = ranked.entries.iter().filter_map(|e| self.tree.subgoal(e.node_id)).collect();
        if nodes.len() != ranked.len() {
            trace.events.push(TraceEvent::PlannerError { reason: "candidate missing from tree".into() });
            return None;
        }
        match planner_select(q, state, &nodes, use_conditions, backend, self.settings.pipeline.retries) {
            Ok(d) => {
                trace.planner.push(PlannerRecord {
                    candidates: ranked.ids(),
                    distribution: d.distribution.clone(),
                    selected: d.selected,
                    margin: d.margin(),
                    low: is_low_confidence(&d, &self.settings.fallback),
                });
                Some(d)
            }
            Err(e) => {
                trace.events.push(TraceEvent::PlannerError { reason: e.to_string() });
                None
            }
        }
    }
}

#[derive(Debug, Error)]
#[error("environment error: {0}")]
pub struct EnvError(pub String);

pub trait Environment {
    fn kind(&self) -> EnvironmentKind;
    fn observe(&self) -> Observation;
    fn apply(&mut self, action: &EnvAction) -> Result<(), EnvError>;
    fn is_success(&self) -> bool;
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    pub success: bool,
    pub traces: Vec<StepTrace>,
    pub error: Option<String>,
    pub inserted: Option<CommitIds>,
}

#[allow(clippy::too_many_arguments)]
/// Runs until the validator succeeds, the agent stops, or `max_steps`. On
/// success with `online` set, the trajectory is inserted into `tree`.
pub fn run_episode(
    env: &mut dyn Environment,
    tree: &mut MemoryTree,
    side: &mut SideIndex,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    settings: &AgentSettings,
    q: &crate::memory::Instruction,
    max_steps: usize,
    online: bool,
) -> Result<EpisodeOutcome, PipelineError> {
    let mut steps: Vec<TrajectoryStep> = Vec::new();
    let mut history: Vec<HistoryItem> = Vec::new();
    let mut traces = Vec::new();
    let mut error = None;
    {
        let mut agent = Agent::new(tree, backend, embedder, settings.clone()).with_side_index(side);
        for _ in 0..max_steps.max(1) {
            if env.is_success() {
                break;
            }
            let o = env.observe();
            let (action, trace) = agent.run_step(q.as_str(), &history, &o);
            traces.push(trace);
            if action.op == Op::Stop {
                break;
            }
            let element = o.element(&action.target);
            let resolved = match resolve(action.op, element, action.arg.clone(), env.kind()) {
                Ok(r) => r,
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            };
            if let Err(e) = env.apply(&resolved) {
                error = Some(e.to_string());
                break;
            }
            history.push(HistoryItem {
                op: action.op,
                label: element.map(|e| e.text.clone()).unwrap_or_default(),
                arg: action.arg.clone(),
            });
            steps.push(TrajectoryStep { observation: o, action });
        }
    }
    let success = error.is_none() && env.is_success();
    let trajectory = Trajectory { instruction: q.clone(), steps, success };
    let mut inserted = None;
    if online && success && !trajectory.is_empty() {
        inserted = online_insert(tree, &trajectory, backend, embedder, &settings.pipeline)?;
        if let Some(ids) = &inserted {
            side.record(ids, &trajectory, settings.retrieval.n_e);
        }
    }
    Ok(EpisodeOutcome { trajectory, success, traces, error, inserted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::embedding::{element_match_score, HashEmbedder};
    use crate::memory::{ActionPattern, Element, ElementDescriptor, PositionHint, Role};

    fn d(dist: &[f64]) -> PlannerDecision {
        PlannerDecision::from_raw(dist, dist.len()).unwrap()
    }

    #[test]
    fn decision_invariants() {
        let one = d(&[0.3]);
        assert_eq!((one.selected, one.confidence, one.margin()), (0, 1.0, 1.0));
        let tie = d(&[0.4, 0.4, 0.2]);
        assert_eq!(tie.selected, 0);
        assert!(PlannerDecision::from_raw(&[0.5], 2).is_err());
        assert!(PlannerDecision::from_raw(&[0.5, -0.1], 2).is_err());
        assert!(PlannerDecision::from_raw(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn fallback_examples() {
        let fb = FallbackConfig::default();
        assert!(is_low_confidence(&d(&[0.50, 0.45, 0.05]), &fb));
        assert!(!is_low_confidence(&d(&[0.60, 0.40]), &fb));
        let mut spread = vec![0.14];
        spread.extend(std::iter::repeat_n(0.01, 86));
        let spread = d(&spread);
        assert!((spread.confidence - 0.14).abs() < 1e-12);
        assert!(spread.margin() >= fb.delta);
        assert!(is_low_confidence(&spread, &fb));
    }

    #[test]
    fn expansion_width_doubles_then_caps() {
        let fb = FallbackConfig::default();
        assert_eq!(expanded_width(8, 20, &fb), 16);
        assert_eq!(expanded_width(8, 10, &fb), 10);
        assert_eq!(expanded_width(8, 5, &fb), 5);
    }

    #[test]
    fn distractor_case_picks_the_button() {
        let desc = ElementDescriptor {
            role: Role::Button,
            label: "Select flight".into(),
            position_hint: PositionHint::Unknown,
            context: vec![],
        };
        let w = GroundingWeights::default();
        let ad = element_match_score(&desc, Role::Link, "Best flight deals today", &[], &w);
        let btn = element_match_score(&desc, Role::Button, "Select", &[], &w);
        assert!(btn > ad);
        assert_eq!(pick_element(&[ad, btn], 0.2), Some(1));
        assert_eq!(pick_element(&[0.5, 0.5], 0.2), Some(0));
        assert_eq!(pick_element(&[0.2, 0.1], 0.2), None);
    }

    #[test]
    fn instantiation_fills_known_keys() {
        let c = vec![Constraint { key: "destination".into(), value: "Boston".into() }];
        assert_eq!(instantiate("{destination}", &c), "Boston");
        assert_eq!(instantiate("{date}", &c), "{date}");
    }

    fn el(uid: &str, role: Role, text: &str) -> Element {
        Element { uid: uid.into(), role, text: text.into(), context: vec![], bbox: None }
    }

    #[test]
    fn base_policy_rule() {
        let b = ScriptedBackend::new();
        let o = Observation {
            elements: vec![el("a", Role::Generic, "search tips"), el("b", Role::Button, "Search")],
            ..Default::default()
        };
        let (a, err) = fallback_base_policy("search for shoes", "", &o, &b, 30, 2);
        assert_eq!((a, err), (Action::click("b"), None));
        let (a, _) = fallback_base_policy("zzz", "", &o, &b, 30, 2);
        assert_eq!(a.op, Op::Stop);
        for _ in 0..3 {
            b.push_failure(RequestRole::BasePolicy, "down");
        }
        let (a, err) = fallback_base_policy("search", "", &o, &b, 30, 2);
        assert_eq!(a.op, Op::Stop);
        assert!(err.is_some());
    }

    #[test]
    fn empty_memory_routes_to_base_policy() {
        let b = ScriptedBackend::new();
        let e = HashEmbedder::default();
        let tree = MemoryTree::new(e.dimension());
        for toggles in [AblationToggles::default(), AblationToggles { flat_memory: true, ..Default::default() }] {
            let settings = AgentSettings { toggles, ..Default::default() };
            let mut agent = Agent::new(&tree, &b, &e, settings);
            let o = Observation { elements: vec![el("s", Role::Button, "Search")], ..Default::default() };
            let (a, t) = agent.run_step("search", &[], &o);
            assert_eq!(a, Action::click("s"));
            assert_eq!(t.source, Some(ActionSource::BasePolicy));
            assert!(t.events.contains(&TraceEvent::EmptyMemory));
        }
    }

    #[test]
    fn abstract_state_degrades_to_summary() {
        let b = ScriptedBackend::new();
        let o = Observation { elements: vec![el("s", Role::Button, "Search")], ..Default::default() };
        assert_eq!(abstract_state(&o, &b, 30, 2).unwrap(), "button:Search");
        assert_eq!(abstract_state(&Observation::default(), &b, 30, 2).unwrap(), "");
    }

    #[test]
    fn stop_exemplar_needs_no_element() {
        let b = ScriptedBackend::new();
        let st = StepNode {
            id: NodeId(3),
            pattern: ActionPattern { op: Op::Stop, arg_template: None },
            descriptor: ElementDescriptor::empty(),
            embedding: Default::default(),
            parent: NodeId(2),
        };
        let g = actor_ground("q", &Observation::default(), &[&st], &[], &b, &AgentSettings::default(), None, &[], &[]).unwrap();
        assert_eq!(g.action, Action::stop());
    }

    fn click_step(id: u64, label: &str) -> StepNode {
        StepNode {
            id: NodeId(id),
            pattern: ActionPattern { op: Op::Click, arg_template: None },
            descriptor: ElementDescriptor {
                role: Role::Button,
                label: label.into(),
                position_hint: PositionHint::Unknown,
                context: vec![],
            },
            embedding: Default::default(),
            parent: NodeId(1),
        }
    }

    #[test]
    fn grounding_skips_actions_already_taken_on_this_page() {
        let b = ScriptedBackend::new();
        let o = Observation {
            elements: vec![el("x", Role::Button, "Search"), el("y", Role::Button, "Continue")],
            ..Default::default()
        };
        let (search, cont) = (click_step(5, "Search"), click_step(6, "Continue"));
        let s = AgentSettings::default();
        let ground = |done: &[HistoryItem]| {
            actor_ground("q", &o, &[&search, &cont], &[], &b, &s, None, &[], done).unwrap()
        };
        assert_eq!(ground(&[]).action, Action::click("x"));
        let clicked = |label: &str| HistoryItem { op: Op::Click, label: label.into(), arg: None };
        let g = ground(&[clicked("Search")]);
        assert_eq!((g.action, g.exemplar), (Action::click("y"), NodeId(6)));
        // Everything repeats: fall back to the first grounded exemplar.
        assert_eq!(ground(&[clicked("Search"), clicked("Continue")]).action, Action::click("x"));
    }
}
