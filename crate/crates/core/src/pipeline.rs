//! Memory construction: turns a successful trajectory into a task branch.
//!
//! Every backend call and embedding happens before the tree is touched; the
//! result is committed in one step, so a failing stage leaves the tree as it
//! was.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::schema::*;
use crate::backend::{call_structured, Backend, BackendRequest, CallError, RequestRole, DEFAULT_RETRIES};
use crate::embedding::{token_set, EmbedError, Embedder};
use crate::memory::{
    ActionPattern, CommitIds, ElementDescriptor, MemoryTree, NormalizedIntent, Observation, PendingBranch,
    PendingStep, PendingSubgoal, PendingTask, PositionHint, Role, StepNode, SubgoalNode, Trajectory,
    TrajectoryStep, TreeError, TypeError,
};
use crate::retrieval::summarize_observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub l_min: usize,
    pub retries: usize,
    /// Element cap for page summaries shown to the backend.
    pub n_e: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { l_min: 1, retries: DEFAULT_RETRIES, n_e: 30 }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("trajectory was not successful; nothing inserted")]
    NotSuccessful,
    #[error("invalid trajectory: {0}")]
    Invalid(#[from] TypeError),
    #[error("backend: {0}")]
    Backend(#[from] CallError),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error("step {step}: {reason}")]
    Abstraction { step: usize, reason: String },
    #[error("tree: {0}")]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        (self.end + 1).saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Coverage,
    Ordering,
    Contiguity,
    MinLength,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// `(kind, 0-based segment index)`, sorted.
    pub violations: Vec<(ViolationKind, usize)>,
}

impl ConsistencyReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<usize> {
        self.violations.iter().map(|v| v.1).min()
    }
}

/// Runs all four checks and reports every violation. Uncovered steps are
/// attributed to the first segment starting after them (the last segment for
/// a trailing gap); out-of-range steps to the segment reaching them.
pub fn consistency_check(segments: &[Segment], t: usize, l_min: usize) -> ConsistencyReport {
    use ViolationKind::*;
    let mut v = Vec::new();
    if segments.is_empty() {
        return ConsistencyReport { violations: vec![(Coverage, 0)] };
    }
    let l_min = l_min.min(t).max(1);
    let mut covered = vec![false; t + 1];
    for (i, s) in segments.iter().enumerate() {
        if s.start < 1 || s.end > t || s.start > s.end {
            v.push((Coverage, i));
        }
        if s.start.max(1) <= s.end.min(t) {
            covered[s.start.max(1)..=s.end.min(t)].fill(true);
        }
        if s.len() < l_min {
            v.push((MinLength, i));
        }
        if i > 0 {
            let prev = segments[i - 1];
            if s.start <= prev.start {
                v.push((Ordering, i));
            }
            if s.start != prev.end + 1 {
                v.push((Contiguity, i));
            }
        }
    }
    for (step, &c) in covered.iter().enumerate().skip(1) {
        if !c {
            let owner = segments.iter().position(|s| s.start > step).unwrap_or(segments.len() - 1);
            v.push((Coverage, owner));
        }
    }
    v.sort();
    v.dedup();
    ConsistencyReport { violations: v }
}

/// Merges the lowest-index violating segment with its successor (with its
/// predecessor when it is last). The merged span starts right after the
/// preceding segment, or at step 1, and runs to step `t` when it absorbs the
/// last segment, so gaps around it are absorbed.
pub fn merge_segments(segments: &[Segment], report: &ConsistencyReport, t: usize) -> Vec<Segment> {
    if segments.len() <= 1 {
        return vec![Segment::new(1, t)];
    }
    let Some(i) = report.first_violation() else {
        return segments.to_vec();
    };
    let i = i.min(segments.len() - 1);
    let (a, b) = if i + 1 < segments.len() { (i, i + 1) } else { (i - 1, i) };
    let start = if a == 0 { 1 } else { segments[a - 1].end.min(t) + 1 };
    let end = if b == segments.len() - 1 {
        t
    } else {
        segments[a].end.max(segments[b].end).clamp(start.min(t), t)
    };
    let mut out = segments[..a].to_vec();
    out.push(Segment::new(start.min(t), end.max(start.min(t))));
    out.extend_from_slice(&segments[b + 1..]);
    out
}

/// Check/merge loop; returns the repaired segmentation and the merge count.
pub fn repair_segments(mut segments: Vec<Segment>, t: usize, l_min: usize) -> (Vec<Segment>, usize) {
    let mut merges = 0;
    loop {
        let report = consistency_check(&segments, t, l_min);
        if report.ok() {
            return (segments, merges);
        }
        if segments.len() > 1 {
            merges += 1;
        }
        segments = merge_segments(&segments, &report, t);
    }
}

pub fn normalize_instruction(
    instruction: &str,
    backend: &dyn Backend,
    retries: usize,
) -> Result<NormalizedIntent, CallError> {
    let req = BackendRequest::new(RequestRole::Normalize, &NormalizePayload { instruction: instruction.into() });
    let r: NormalizeResponse = call_structured(backend, &req, retries, |r: &NormalizeResponse| {
        NormalizedIntent { intent: r.intent.clone(), constraints: r.constraints.clone() }
            .validate()
            .map_err(|e| e.to_string())
    })?;
    Ok(NormalizedIntent { intent: r.intent.trim().to_string(), constraints: r.constraints })
}

fn target_element(step: &TrajectoryStep) -> Option<&crate::memory::Element> {
    step.observation.element(&step.action.target)
}

fn step_brief(index: usize, step: &TrajectoryStep) -> StepBrief {
    let el = target_element(step);
    StepBrief {
        index,
        op: step.action.op,
        role: el.map(|e| e.role),
        label: el.map(|e| e.text.clone()).unwrap_or_default(),
        arg: step.action.arg.clone(),
        page_title: step.observation.page_title.clone(),
        url: step.observation.url.clone(),
    }
}

fn page_brief(o: &Observation, n_e: usize) -> PageBrief {
    PageBrief {
        title: o.page_title.clone(),
        url: o.url.clone(),
        heading: o.elements.iter().find(|e| e.role == Role::Heading).map(|e| e.text.clone()),
        summary: summarize_observation(o, n_e),
    }
}

/// Proposes a segmentation through the backend and repairs it.
pub fn segment_trajectory(
    traj: &Trajectory,
    backend: &dyn Backend,
    cfg: &PipelineConfig,
) -> Result<Vec<Segment>, CallError> {
    let t = traj.len();
    let payload = SegmentPayload {
        instruction: traj.instruction.as_str().into(),
        steps: traj.steps.iter().enumerate().map(|(i, s)| step_brief(i + 1, s)).collect(),
    };
    let req = BackendRequest::new(RequestRole::Segment, &payload);
    let r: SegmentResponse = call_structured(backend, &req, cfg.retries, |_: &SegmentResponse| Ok(()))?;
    let proposed = r.segments.iter().map(|s| Segment::new(s.start, s.end)).collect();
    Ok(repair_segments(proposed, t, cfg.l_min).0)
}

pub fn describe_segment(
    traj: &Trajectory,
    seg: Segment,
    backend: &dyn Backend,
    cfg: &PipelineConfig,
) -> Result<DescribeResponse, CallError> {
    let steps = &traj.steps[seg.start - 1..seg.end];
    let payload = DescribePayload {
        instruction: traj.instruction.as_str().into(),
        steps: steps.iter().enumerate().map(|(i, s)| step_brief(seg.start + i, s)).collect(),
        first_page: page_brief(&steps[0].observation, cfg.n_e),
        last_page: page_brief(&steps[steps.len() - 1].observation, cfg.n_e),
    };
    let req = BackendRequest::new(RequestRole::Describe, &payload);
    let nonblank = |xs: &[String]| !xs.is_empty() && xs.iter().all(|x| !x.trim().is_empty());
    call_structured(backend, &req, cfg.retries, |r: &DescribeResponse| {
        if r.name.trim().is_empty() {
            Err("empty stage name".into())
        } else if !nonblank(&r.pre_conditions) {
            Err("empty pre-conditions".into())
        } else if !nonblank(&r.post_conditions) {
            Err("empty post-conditions".into())
        } else {
            Ok(())
        }
    })
}

fn leaks_uid(desc: &ElementDescriptor, template: Option<&str>, uid: &str) -> bool {
    if uid.is_empty() {
        return false;
    }
    desc.text_fields().chain(template).any(|f| f.contains(uid) || token_set(f).contains(uid))
}

/// Abstracts one action into a pattern and a descriptor. The raw uid is never
/// sent to the backend and answers echoing it are rejected.
pub fn abstract_step(
    step: &TrajectoryStep,
    intent: &NormalizedIntent,
    backend: &dyn Backend,
    retries: usize,
) -> Result<(ActionPattern, ElementDescriptor), PipelineError> {
    let action = &step.action;
    let el = target_element(step);
    if action.op.targets_element() && el.is_none() {
        return Err(PipelineError::Invalid(TypeError::UnresolvedTarget(action.target.clone())));
    }
    let extent = step.observation.extent();
    let payload = AbstractStepPayload {
        op: action.op,
        arg: action.arg.clone(),
        element: el.map(|e| ElementBrief {
            role: e.role,
            text: e.text.clone(),
            context: e.context.iter().take(3).cloned().collect(),
            position_hint: PositionHint::locate(e.bbox.as_ref(), extent),
        }),
        constraints: intent.constraints.clone(),
    };
    let req = BackendRequest::new(RequestRole::AbstractStep, &payload);
    let uid = action.target.clone();
    let op = action.op;
    let r: AbstractStepResponse = call_structured(backend, &req, retries, move |r: &AbstractStepResponse| {
        if r.op != op {
            return Err(format!("op {} does not match {op}", r.op));
        }
        if leaks_uid(&r.descriptor, r.arg_template.as_deref(), &uid) {
            return Err("descriptor echoes a raw element id".into());
        }
        Ok(())
    })?;
    let mut descriptor = if el.is_some() { r.descriptor } else { ElementDescriptor::empty() };
    descriptor.context.truncate(3);
    let arg_template = if action.arg.is_some() { r.arg_template.or_else(|| action.arg.clone()) } else { None };
    Ok((ActionPattern { op, arg_template }, descriptor))
}

/// Computes the full branch for a successful trajectory without mutating
/// the tree.
pub fn prepare_branch(
    tree: &MemoryTree,
    traj: &Trajectory,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    cfg: &PipelineConfig,
) -> Result<PendingBranch, PipelineError> {
    if !traj.success {
        return Err(PipelineError::NotSuccessful);
    }
    traj.validate()?;
    let normalized = normalize_instruction(traj.instruction.as_str(), backend, cfg.retries)?;
    let task = match tree.find_task(&normalized) {
        Some(id) => PendingTask::Existing(id),
        None => PendingTask::New { embedding: embedder.embed(&normalized.intent)?, normalized: normalized.clone() },
    };
    let segments = segment_trajectory(traj, backend, cfg)?;
    let mut subgoals = Vec::with_capacity(segments.len());
    for seg in segments {
        let d = describe_segment(traj, seg, backend, cfg)?;
        let mut steps = Vec::with_capacity(seg.len());
        for (offset, step) in traj.steps[seg.start - 1..seg.end].iter().enumerate() {
            let (pattern, descriptor) =
                abstract_step(step, &normalized, backend, cfg.retries).map_err(|e| match e {
                    PipelineError::Backend(c) => PipelineError::Abstraction { step: seg.start + offset, reason: c.to_string() },
                    other => other,
                })?;
            let embedding = embedder.embed(&StepNode::embedding_text(&pattern, &descriptor))?;
            steps.push(PendingStep { pattern, descriptor, embedding });
        }
        let embedding = embedder.embed(&SubgoalNode::embedding_text(&d.name, &d.pre_conditions, &d.post_conditions))?;
        subgoals.push(PendingSubgoal {
            name: d.name.trim().to_string(),
            pre_conditions: d.pre_conditions,
            post_conditions: d.post_conditions,
            embedding,
            steps,
        });
    }
    Ok(PendingBranch { task, subgoals })
}

/// Abstracts and commits a successful trajectory. On any error the tree is
/// unchanged.
pub fn insert_trajectory(
    tree: &mut MemoryTree,
    traj: &Trajectory,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    cfg: &PipelineConfig,
) -> Result<CommitIds, PipelineError> {
    let branch = prepare_branch(tree, traj, backend, embedder, cfg)?;
    Ok(tree.commit(branch)?)
}

/// Success-gated insertion for trajectories collected during deployment.
pub fn online_insert(
    tree: &mut MemoryTree,
    traj: &Trajectory,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    cfg: &PipelineConfig,
) -> Result<Option<CommitIds>, PipelineError> {
    if !traj.success {
        return Ok(None);
    }
    insert_trajectory(tree, traj, backend, embedder, cfg).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::embedding::HashEmbedder;
    use crate::memory::{Action, BBox, Element, Instruction, Op};
    use proptest::prelude::*;

    fn segs(v: &[(usize, usize)]) -> Vec<Segment> {
        v.iter().map(|&(a, b)| Segment::new(a, b)).collect()
    }

    #[test]
    fn consistency_examples() {
        assert!(consistency_check(&segs(&[(1, 3), (4, 6)]), 6, 1).ok());
        let r = consistency_check(&segs(&[(1, 3), (5, 6)]), 6, 1);
        assert_eq!(r.violations, vec![(ViolationKind::Coverage, 1), (ViolationKind::Contiguity, 1)]);
        let r = consistency_check(&segs(&[(1, 4), (3, 6)]), 6, 1);
        assert_eq!(r.violations, vec![(ViolationKind::Contiguity, 1)]);
    }

    #[test]
    fn merge_examples() {
        let t = 6;
        let s = segs(&[(1, 3), (5, 6)]);
        assert_eq!(merge_segments(&s, &consistency_check(&s, t, 1), t), segs(&[(1, 6)]));
        let s = segs(&[(1, 1), (2, 6)]);
        assert_eq!(merge_segments(&s, &consistency_check(&s, t, 2), t), segs(&[(1, 6)]));
        let s = segs(&[(1, 6)]);
        assert!(consistency_check(&s, t, 1).ok());
        assert_eq!(repair_segments(s.clone(), t, 1), (s, 0));
        assert_eq!(repair_segments(segs(&[(1, 2), (4, 6)]), 6, 1), (segs(&[(1, 6)]), 1));
        assert_eq!(repair_segments(segs(&[(1, 2), (3, 4), (5, 6)]), 6, 1).1, 0);
    }

    fn obs(url: &str, title: &str, elements: Vec<Element>) -> Observation {
        Observation { elements, page_title: title.into(), url: url.into() }
    }

    fn button(uid: &str, text: &str) -> Element {
        Element {
            uid: uid.into(),
            role: Role::Button,
            text: text.into(),
            context: vec!["form".into()],
            bbox: Some(BBox { x: 0.0, y: 0.0, w: 10.0, h: 10.0 }),
        }
    }

    /// Six steps over three pages, two steps each.
    fn booking() -> Trajectory {
        let page = |url: &str, title: &str, a: &str, b: &str, ua: &str, ub: &str| {
            vec![
                TrajectoryStep {
                    observation: obs(url, title, vec![button(ua, a), button(ub, b)]),
                    action: if a == "To" { Action::typed(ua, "NYC") } else { Action::click(ua) },
                },
                TrajectoryStep { observation: obs(url, title, vec![button(ua, a), button(ub, b)]), action: Action::click(ub) },
            ]
        };
        let mut steps = page("/search", "Flight search", "To", "Search", "#u1", "#u2");
        steps.extend(page("/results", "Results", "Cheapest", "Select flight", "#u3", "#u4"));
        steps.extend(page("/pay", "Payment", "Card", "Pay now", "#u5", "#u6"));
        Trajectory { instruction: Instruction::new("I want to fly to New York").unwrap(), steps, success: true }
    }

    #[test]
    fn normalize_retries_malformed_output() {
        let b = ScriptedBackend::new();
        b.push_text(RequestRole::Normalize, "nope").push_text(RequestRole::Normalize, "{bad");
        let n = normalize_instruction("I want to fly to New York", &b, 2).unwrap();
        assert_eq!(n.intent, "book a flight");
        assert_eq!(n.value_of("destination"), Some("NYC"));
    }

    #[test]
    fn segments_six_step_booking() {
        let b = ScriptedBackend::new();
        let s = segment_trajectory(&booking(), &b, &PipelineConfig::default()).unwrap();
        assert_eq!(s, segs(&[(1, 2), (3, 4), (5, 6)]));
        b.push_json(RequestRole::Segment, serde_json::json!({"segments": [{"start":1,"end":2},{"start":4,"end":6}]}));
        let s = segment_trajectory(&booking(), &b, &PipelineConfig::default()).unwrap();
        assert_eq!(s, segs(&[(1, 6)]));
    }

    #[test]
    fn describe_rejects_empty_conditions_persistently() {
        let b = ScriptedBackend::new();
        let empty = serde_json::json!({"name":"x","pre_conditions":[],"post_conditions":["y"]});
        for _ in 0..3 {
            b.push_json(RequestRole::Describe, empty.clone());
        }
        let err = describe_segment(&booking(), Segment::new(1, 2), &b, &PipelineConfig::default()).unwrap_err();
        assert_eq!(err.attempts, 3);
    }

    #[test]
    fn abstract_step_examples() {
        let b = ScriptedBackend::new();
        let intent = NormalizedIntent::new("book a flight", vec![("destination".into(), "NYC".into())]);
        let click = TrajectoryStep { observation: obs("/", "t", vec![button("#btn-123", "Search")]), action: Action::click("#btn-123") };
        let (p, d) = abstract_step(&click, &intent, &b, 2).unwrap();
        assert_eq!(p.op, Op::Click);
        assert_eq!((d.role, d.label.as_str()), (Role::Button, "Search"));
        let typed = TrajectoryStep { observation: obs("/", "t", vec![button("#to", "To")]), action: Action::typed("#to", "NYC") };
        assert_eq!(abstract_step(&typed, &intent, &b, 2).unwrap().0.arg_template.as_deref(), Some("{destination}"));
        let stop = TrajectoryStep { observation: obs("/", "t", vec![]), action: Action::stop() };
        let (p, d) = abstract_step(&stop, &intent, &b, 2).unwrap();
        assert_eq!((p.op, d), (Op::Stop, ElementDescriptor::empty()));
    }

    #[test]
    fn echoed_uid_is_rejected() {
        let b = ScriptedBackend::new();
        let leak = serde_json::json!({"op":"CLICK","descriptor":{"role":"button","label":"#btn-123","position_hint":"top"}});
        for _ in 0..3 {
            b.push_json(RequestRole::AbstractStep, leak.clone());
        }
        let intent = NormalizedIntent::new("x", vec![]);
        let step = TrajectoryStep { observation: obs("/", "t", vec![button("#btn-123", "Search")]), action: Action::click("#btn-123") };
        assert!(abstract_step(&step, &intent, &b, 2).is_err());
    }

    #[test]
    fn insertion_counts_and_dedup() {
        let b = ScriptedBackend::new();
        let e = HashEmbedder::default();
        let mut tree = MemoryTree::new(e.dimension());
        let ids = insert_trajectory(&mut tree, &booking(), &b, &e, &PipelineConfig::default()).unwrap();
        assert_eq!((tree.tasks().len(), tree.subgoals().len(), tree.steps().len()), (1, 3, 6));
        assert_eq!(ids.created.len(), 10);
        tree.validate().unwrap();
        let mut again = booking();
        again.instruction = Instruction::new("Book me a flight to New York").unwrap();
        online_insert(&mut tree, &again, &b, &e, &PipelineConfig::default()).unwrap().unwrap();
        assert_eq!((tree.tasks().len(), tree.subgoals().len(), tree.steps().len()), (1, 6, 12));
        tree.validate().unwrap();
    }

    #[test]
    fn failed_trajectory_is_not_inserted() {
        let b = ScriptedBackend::new();
        let e = HashEmbedder::default();
        let mut tree = MemoryTree::new(e.dimension());
        let mut t = booking();
        t.success = false;
        assert!(matches!(
            insert_trajectory(&mut tree, &t, &b, &e, &PipelineConfig::default()),
            Err(PipelineError::NotSuccessful)
        ));
        assert_eq!(online_insert(&mut tree, &t, &b, &e, &PipelineConfig::default()).unwrap(), None);
        assert!(tree.is_empty());
    }

    #[test]
    fn descriptors_never_hold_source_uids() {
        let b = ScriptedBackend::new();
        let e = HashEmbedder::default();
        let mut tree = MemoryTree::new(e.dimension());
        let t = booking();
        insert_trajectory(&mut tree, &t, &b, &e, &PipelineConfig::default()).unwrap();
        let json = serde_json::to_string(&tree).unwrap();
        for uid in t.raw_uids() {
            assert!(!json.contains(&uid), "{uid}");
        }
    }

    /// A valid partition of 1..=t perturbed by shifting boundaries, dropping
    /// or duplicating segments.
    fn perturbed() -> impl Strategy<Value = (usize, Vec<Segment>)> {
        (1usize..=40).prop_flat_map(|t| {
            (Just(t), prop::collection::vec(0usize..t, 0..8), prop::collection::vec((0u8..6, -3i64..=3, -3i64..=3), 0..6))
        })
        .prop_map(|(t, cuts, edits)| {
            let mut cuts: Vec<usize> = cuts.into_iter().map(|c| c + 1).filter(|&c| c < t).collect();
            cuts.sort();
            cuts.dedup();
            let mut bounds = vec![0];
            bounds.extend(cuts);
            bounds.push(t);
            let mut s: Vec<Segment> = bounds.windows(2).map(|w| Segment::new(w[0] + 1, w[1])).collect();
            for (kind, ds, de) in edits {
                if s.is_empty() {
                    break;
                }
                let i = (ds.unsigned_abs() as usize + de.unsigned_abs() as usize) % s.len();
                let shift = |x: usize, d: i64| (x as i64 + d).clamp(1, t as i64) as usize;
                match kind {
                    0 => s[i].start = shift(s[i].start, ds),
                    1 => s[i].end = shift(s[i].end, de),
                    2 if s.len() > 1 => {
                        s.remove(i);
                    }
                    3 => {
                        let dup = s[i];
                        s.insert(i, dup);
                    }
                    _ => {
                        s[i].start = shift(s[i].start, ds);
                        s[i].end = shift(s[i].end, de);
                    }
                }
            }
            (t, s)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn repair_terminates_and_is_sound((t, s) in perturbed(), l_min in 1usize..4) {
            let initial = s.len().max(1);
            let (fixed, merges) = repair_segments(s, t, l_min);
            prop_assert!(merges < initial);
            prop_assert!(consistency_check(&fixed, t, l_min).ok());
            prop_assert_eq!(fixed.first().unwrap().start, 1);
            prop_assert_eq!(fixed.last().unwrap().end, t);
        }

        #[test]
        fn faults_at_any_stage_leave_tree_unchanged(stage in 0usize..4, seed_first in any::<bool>()) {
            let e = HashEmbedder::default();
            let b = ScriptedBackend::new();
            let mut tree = MemoryTree::new(e.dimension());
            if seed_first {
                insert_trajectory(&mut tree, &booking(), &b, &e, &PipelineConfig::default()).unwrap();
            }
            let before = tree.clone();
            let role = [RequestRole::Normalize, RequestRole::Segment, RequestRole::Describe, RequestRole::AbstractStep][stage];
            for _ in 0..3 {
                b.push_failure(role, "down");
            }
            prop_assert!(insert_trajectory(&mut tree, &booking(), &b, &e, &PipelineConfig::default()).is_err());
            prop_assert_eq!(&tree, &before);
            prop_assert_eq!(serde_json::to_string(&tree).unwrap(), serde_json::to_string(&before).unwrap());
        }
    }
}
