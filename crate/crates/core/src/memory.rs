//! Domain types and the three-level memory tree.
//!
//! The tree has exactly three levels: task nodes (normalized intents), subgoal
//! nodes (functional stages with observable pre/post-conditions) and step nodes
//! (action patterns paired with transferable element descriptors). Step nodes
//! never store raw element identifiers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedder, EmbedError, IndexEntry, Level, Vector, VectorIndex};

/// Current on-disk schema version for trees and snapshots.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("node {0} not found")]
    NotFound(NodeId),
    #[error("integrity violation: {0}")]
    Integrity(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TypeError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("duplicate element uid `{0}` in observation")]
    DuplicateUid(String),
    #[error("{op} requires a non-empty argument")]
    MissingArgument { op: Op },
    #[error("action target `{0}` is not present in the observation")]
    UnresolvedTarget(String),
    #[error("{op} requires a target element")]
    MissingTarget { op: Op },
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("normalized intent is empty")]
    EmptyIntent,
    #[error("duplicate constraint key `{0}`")]
    DuplicateConstraintKey(String),
}

/// Global node identifier, shared by all three levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A natural-language task instruction. Never blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Instruction(String);

impl Instruction {
    pub fn new(text: impl Into<String>) -> Result<Self, TypeError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TypeError::EmptyInstruction);
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Instruction {
    type Error = TypeError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Instruction> for String {
    fn from(value: Instruction) -> Self {
        value.0
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Button,
    Link,
    Textbox,
    Combobox,
    Listitem,
    Checkbox,
    Heading,
    Image,
    Generic,
}

impl Role {
    pub const ALL: [Role; 9] = [
        Role::Button,
        Role::Link,
        Role::Textbox,
        Role::Combobox,
        Role::Listitem,
        Role::Checkbox,
        Role::Heading,
        Role::Image,
        Role::Generic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Button => "button",
            Role::Link => "link",
            Role::Textbox => "textbox",
            Role::Combobox => "combobox",
            Role::Listitem => "listitem",
            Role::Checkbox => "checkbox",
            Role::Heading => "heading",
            Role::Image => "image",
            Role::Generic => "generic",
        }
    }

    /// Roles a user typically acts on; these lead observation summaries.
    pub fn is_interactive(self) -> bool {
        matches!(self, Role::Button | Role::Link | Role::Textbox | Role::Combobox)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.w && y >= self.y && y <= self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Element {
    pub uid: String,
    pub role: Role,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub context: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Observation {
    pub elements: Vec<Element>,
    #[serde(default)]
    pub page_title: String,
    #[serde(default)]
    pub url: String,
}

impl Observation {
    pub fn validate(&self) -> Result<(), TypeError> {
        let mut seen = BTreeSet::new();
        for e in &self.elements {
            if !seen.insert(e.uid.as_str()) {
                return Err(TypeError::DuplicateUid(e.uid.clone()));
            }
        }
        Ok(())
    }

    pub fn element(&self, uid: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.uid == uid)
    }

    /// Page extent inferred from the element boxes, anchored at the origin.
    pub fn extent(&self) -> Option<(f64, f64)> {
        let mut w: f64 = 0.0;
        let mut h: f64 = 0.0;
        let mut any = false;
        for b in self.elements.iter().filter_map(|e| e.bbox.as_ref()) {
            any = true;
            w = w.max(b.x + b.w);
            h = h.max(b.y + b.h);
        }
        (any && w > 0.0 && h > 0.0).then_some((w, h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Op {
    Click,
    Type,
    Select,
    Scroll,
    Stop,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::Click => "CLICK",
            Op::Type => "TYPE",
            Op::Select => "SELECT",
            Op::Scroll => "SCROLL",
            Op::Stop => "STOP",
        }
    }

    pub fn targets_element(self) -> bool {
        matches!(self, Op::Click | Op::Type | Op::Select)
    }

    pub fn requires_arg(self) -> bool {
        matches!(self, Op::Type | Op::Select)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Action {
    pub op: Op,
    #[serde(default)]
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<String>,
}

impl Action {
    pub fn stop() -> Self {
        Self { op: Op::Stop, target: String::new(), arg: None }
    }

    pub fn click(target: impl Into<String>) -> Self {
        Self { op: Op::Click, target: target.into(), arg: None }
    }

    pub fn typed(target: impl Into<String>, arg: impl Into<String>) -> Self {
        Self { op: Op::Type, target: target.into(), arg: Some(arg.into()) }
    }

    /// Checks the action against the observation it was taken on.
    pub fn validate_against(&self, obs: &Observation) -> Result<(), TypeError> {
        if self.op.requires_arg() && self.arg.as_deref().is_none_or(str::is_empty) {
            return Err(TypeError::MissingArgument { op: self.op });
        }
        if self.op.targets_element() {
            if self.target.is_empty() {
                return Err(TypeError::MissingTarget { op: self.op });
            }
            if obs.element(&self.target).is_none() {
                return Err(TypeError::UnresolvedTarget(self.target.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryStep {
    pub observation: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instruction: Instruction,
    pub steps: Vec<TrajectoryStep>,
    pub success: bool,
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), TypeError> {
        if self.steps.is_empty() {
            return Err(TypeError::EmptyTrajectory);
        }
        for step in &self.steps {
            step.observation.validate()?;
            step.action.validate_against(&step.observation)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Every raw element uid seen anywhere in the trajectory.
    pub fn raw_uids(&self) -> BTreeSet<String> {
        self.steps
            .iter()
            .flat_map(|s| s.observation.elements.iter().map(|e| e.uid.clone()))
            .chain(self.steps.iter().map(|s| s.action.target.clone()))
            .filter(|u| !u.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedIntent {
    pub intent: String,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

impl NormalizedIntent {
    pub fn new(intent: impl Into<String>, constraints: Vec<(String, String)>) -> Self {
        Self {
            intent: intent.into(),
            constraints: constraints
                .into_iter()
                .map(|(key, value)| Constraint { key, value })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.intent.trim().is_empty() {
            return Err(TypeError::EmptyIntent);
        }
        let mut keys = BTreeSet::new();
        for c in &self.constraints {
            if !keys.insert(c.key.as_str()) {
                return Err(TypeError::DuplicateConstraintKey(c.key.clone()));
            }
        }
        Ok(())
    }

    pub fn key_set(&self) -> BTreeSet<&str> {
        self.constraints.iter().map(|c| c.key.as_str()).collect()
    }

    pub fn value_of(&self, key: &str) -> Option<&str> {
        self.constraints.iter().find(|c| c.key == key).map(|c| c.value.as_str())
    }

    /// Deduplication rule: identical canonical intent and identical key set.
    pub fn same_task(&self, other: &NormalizedIntent) -> bool {
        self.intent == other.intent && self.key_set() == other.key_set()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionHint {
    Top,
    Bottom,
    Left,
    Right,
    Center,
    Unknown,
}

impl PositionHint {
    /// Coarse location of a box center within the page: vertical thirds first,
    /// then horizontal thirds for the middle band.
    pub fn locate(bbox: Option<&BBox>, extent: Option<(f64, f64)>) -> Self {
        let (Some(b), Some((w, h))) = (bbox, extent) else {
            return PositionHint::Unknown;
        };
        let (cx, cy) = b.center();
        let (rx, ry) = (cx / w, cy / h);
        if ry < 1.0 / 3.0 {
            PositionHint::Top
        } else if ry > 2.0 / 3.0 {
            PositionHint::Bottom
        } else if rx < 1.0 / 3.0 {
            PositionHint::Left
        } else if rx > 2.0 / 3.0 {
            PositionHint::Right
        } else {
            PositionHint::Center
        }
    }
}

/// Transferable description of a UI element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementDescriptor {
    pub role: Role,
    pub label: String,
    pub position_hint: PositionHint,
    #[serde(default)]
    pub context: Vec<String>,
}

impl ElementDescriptor {
    pub fn empty() -> Self {
        Self {
            role: Role::Generic,
            label: String::new(),
            position_hint: PositionHint::Unknown,
            context: Vec::new(),
        }
    }

    /// Free-text fields of the descriptor, in a stable order.
    pub fn text_fields(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.label.as_str()).chain(self.context.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPattern {
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg_template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNode {
    pub id: NodeId,
    pub normalized: NormalizedIntent,
    #[serde(skip)]
    pub embedding: Vector,
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalNode {
    pub id: NodeId,
    pub name: String,
    pub pre_conditions: Vec<String>,
    pub post_conditions: Vec<String>,
    #[serde(skip)]
    pub embedding: Vector,
    pub children: Vec<NodeId>,
    pub parent: NodeId,
}

impl SubgoalNode {
    /// Text embedded for the subgoal: name followed by all conditions.
    pub fn embedding_text(name: &str, pre: &[String], post: &[String]) -> String {
        let mut parts = vec![name.to_string()];
        parts.extend(pre.iter().cloned());
        parts.extend(post.iter().cloned());
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepNode {
    pub id: NodeId,
    pub pattern: ActionPattern,
    pub descriptor: ElementDescriptor,
    #[serde(skip)]
    pub embedding: Vector,
    pub parent: NodeId,
}

impl StepNode {
    pub fn embedding_text(pattern: &ActionPattern, desc: &ElementDescriptor) -> String {
        let mut parts = vec![pattern.op.as_str().to_ascii_lowercase(), desc.role.to_string()];
        parts.push(desc.label.clone());
        parts.extend(desc.context.iter().cloned());
        parts.join(" ")
    }
}

/// Fully computed branch awaiting commit. Built by the abstraction pipeline so
/// that every fallible stage runs before the tree is touched.
#[derive(Debug, Clone)]
pub struct PendingBranch {
    pub task: PendingTask,
    pub subgoals: Vec<PendingSubgoal>,
}

#[derive(Debug, Clone)]
pub enum PendingTask {
    Existing(NodeId),
    New { normalized: NormalizedIntent, embedding: Vector },
}

#[derive(Debug, Clone)]
pub struct PendingSubgoal {
    pub name: String,
    pub pre_conditions: Vec<String>,
    pub post_conditions: Vec<String>,
    pub embedding: Vector,
    pub steps: Vec<PendingStep>,
}

#[derive(Debug, Clone)]
pub struct PendingStep {
    pub pattern: ActionPattern,
    pub descriptor: ElementDescriptor,
    pub embedding: Vector,
}

/// Ids created by one commit, in creation order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommitIds {
    pub task: Option<NodeId>,
    pub created: Vec<NodeId>,
    /// Step ids in trajectory order.
    pub steps: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryTree {
    pub(crate) tasks: BTreeMap<NodeId, TaskNode>,
    pub(crate) subgoals: BTreeMap<NodeId, SubgoalNode>,
    pub(crate) steps: BTreeMap<NodeId, StepNode>,
    pub(crate) next_id: u64,
    pub(crate) schema_version: u32,
    #[serde(skip)]
    pub(crate) index: VectorIndex,
}

impl MemoryTree {
    pub fn new(dimension: usize) -> Self {
        Self {
            tasks: BTreeMap::new(),
            subgoals: BTreeMap::new(),
            steps: BTreeMap::new(),
            next_id: 1,
            schema_version: SCHEMA_VERSION,
            index: VectorIndex::new(dimension),
        }
    }

    pub fn tasks(&self) -> &BTreeMap<NodeId, TaskNode> {
        &self.tasks
    }

    pub fn subgoals(&self) -> &BTreeMap<NodeId, SubgoalNode> {
        &self.subgoals
    }

    pub fn steps(&self) -> &BTreeMap<NodeId, StepNode> {
        &self.steps
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.tasks.len() + self.subgoals.len() + self.steps.len()
    }

    pub fn task(&self, id: NodeId) -> Option<&TaskNode> {
        self.tasks.get(&id)
    }

    pub fn subgoal(&self, id: NodeId) -> Option<&SubgoalNode> {
        self.subgoals.get(&id)
    }

    pub fn step(&self, id: NodeId) -> Option<&StepNode> {
        self.steps.get(&id)
    }

    pub fn find_task(&self, normalized: &NormalizedIntent) -> Option<NodeId> {
        self.tasks
            .values()
            .find(|t| t.normalized.same_task(normalized))
            .map(|t| t.id)
    }

    fn allocate(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Returns the task node matching `normalized`, creating it when absent.
    /// Only the canonical intent text is embedded.
    pub fn get_or_create_task_node(
        &mut self,
        normalized: &NormalizedIntent,
        embedder: &dyn Embedder,
    ) -> Result<NodeId, EmbedError> {
        if let Some(id) = self.find_task(normalized) {
            return Ok(id);
        }
        let embedding = embedder.embed(&normalized.intent)?;
        Ok(self.insert_task(normalized.clone(), embedding))
    }

    fn insert_task(&mut self, normalized: NormalizedIntent, embedding: Vector) -> NodeId {
        let id = self.allocate();
        self.index.insert(IndexEntry { node_id: id, level: Level::Task, vector: embedding.clone() });
        self.tasks.insert(id, TaskNode { id, normalized, embedding, children: Vec::new() });
        id
    }

    /// Commits a fully computed branch. Infallible once the pending branch
    /// refers to an existing task (checked up front).
    pub fn commit(&mut self, branch: PendingBranch) -> Result<CommitIds, TreeError> {
        if let PendingTask::Existing(id) = &branch.task {
            if !self.tasks.contains_key(id) {
                return Err(TreeError::NotFound(*id));
            }
        }
        if branch.subgoals.iter().any(|s| s.steps.is_empty()) {
            return Err(TreeError::Integrity("subgoal without steps".into()));
        }
        let mut ids = CommitIds::default();
        let task_id = match branch.task {
            PendingTask::Existing(id) => id,
            PendingTask::New { normalized, embedding } => {
                let id = self.insert_task(normalized, embedding);
                ids.created.push(id);
                id
            }
        };
        ids.task = Some(task_id);
        for sg in branch.subgoals {
            let sg_id = self.allocate();
            ids.created.push(sg_id);
            let mut children = Vec::with_capacity(sg.steps.len());
            for st in sg.steps {
                let st_id = self.allocate();
                ids.created.push(st_id);
                ids.steps.push(st_id);
                children.push(st_id);
                self.index.insert(IndexEntry {
                    node_id: st_id,
                    level: Level::Step,
                    vector: st.embedding.clone(),
                });
                self.steps.insert(
                    st_id,
                    StepNode {
                        id: st_id,
                        pattern: st.pattern,
                        descriptor: st.descriptor,
                        embedding: st.embedding,
                        parent: sg_id,
                    },
                );
            }
            self.index.insert(IndexEntry {
                node_id: sg_id,
                level: Level::Subgoal,
                vector: sg.embedding.clone(),
            });
            self.subgoals.insert(
                sg_id,
                SubgoalNode {
                    id: sg_id,
                    name: sg.name,
                    pre_conditions: sg.pre_conditions,
                    post_conditions: sg.post_conditions,
                    embedding: sg.embedding,
                    children,
                    parent: task_id,
                },
            );
            if let Some(task) = self.tasks.get_mut(&task_id) {
                task.children.push(sg_id);
            }
        }
        Ok(ids)
    }

    /// Root-to-leaf path for a step node.
    pub fn walk_path(&self, step_id: NodeId) -> Result<(&TaskNode, &SubgoalNode, &StepNode), TreeError> {
        let step = self.steps.get(&step_id).ok_or(TreeError::NotFound(step_id))?;
        let subgoal = self.subgoals.get(&step.parent).ok_or_else(|| {
            TreeError::Integrity(format!("step {} has dangling parent {}", step.id, step.parent))
        })?;
        let task = self.tasks.get(&subgoal.parent).ok_or_else(|| {
            TreeError::Integrity(format!("subgoal {} has dangling parent {}", subgoal.id, subgoal.parent))
        })?;
        Ok((task, subgoal, step))
    }

    /// Full structural check: three levels, referential integrity, unique ids,
    /// unit-norm embeddings and one index entry per node.
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Integrity(m));
        let mut all_ids = BTreeSet::new();
        for id in self.tasks.keys().chain(self.subgoals.keys()).chain(self.steps.keys()) {
            if !all_ids.insert(*id) {
                return bad(format!("id {id} used on two levels"));
            }
            if id.0 == 0 || id.0 >= self.next_id {
                return bad(format!("id {id} outside allocated range"));
            }
        }
        let mut child_ids = Vec::new();
        for t in self.tasks.values() {
            for c in &t.children {
                match self.subgoals.get(c) {
                    Some(sg) if sg.parent == t.id => child_ids.push(*c),
                    _ => return bad(format!("task {} lists bad child {c}", t.id)),
                }
            }
        }
        for sg in self.subgoals.values() {
            if !self.tasks.contains_key(&sg.parent) {
                return bad(format!("subgoal {} parent {} is not a task", sg.id, sg.parent));
            }
            if sg.children.is_empty() {
                return bad(format!("subgoal {} has no steps", sg.id));
            }
            if sg.pre_conditions.is_empty() || sg.post_conditions.is_empty() {
                return bad(format!("subgoal {} lacks conditions", sg.id));
            }
            for c in &sg.children {
                match self.steps.get(c) {
                    Some(st) if st.parent == sg.id => child_ids.push(*c),
                    _ => return bad(format!("subgoal {} lists bad child {c}", sg.id)),
                }
            }
        }
        for st in self.steps.values() {
            if !self.subgoals.contains_key(&st.parent) {
                return bad(format!("step {} parent {} is not a subgoal", st.id, st.parent));
            }
        }
        let child_set: BTreeSet<NodeId> = child_ids.iter().copied().collect();
        if child_set.len() != child_ids.len() {
            return bad("a node is listed as child twice".into());
        }
        let non_task: BTreeSet<NodeId> =
            self.subgoals.keys().chain(self.steps.keys()).copied().collect();
        if child_set != non_task {
            return bad("child lists do not cover the non-task nodes".into());
        }
        let embeddings = self
            .tasks
            .values()
            .map(|t| (t.id, Level::Task, &t.embedding))
            .chain(self.subgoals.values().map(|s| (s.id, Level::Subgoal, &s.embedding)))
            .chain(self.steps.values().map(|s| (s.id, Level::Step, &s.embedding)));
        for (id, level, v) in embeddings {
            if (v.norm() - 1.0).abs() > 1e-6 {
                return bad(format!("node {id} embedding is not unit norm"));
            }
            match self.index.get(id) {
                Some(e) if e.level == level && &e.vector == v => {}
                _ => return bad(format!("index entry for node {id} missing or stale")),
            }
        }
        if self.index.len() != all_ids.len() {
            return bad("index has entries for unknown nodes".into());
        }
        Ok(())
    }

    /// Rebuilds node embeddings from an index; used when loading snapshots.
    pub(crate) fn attach_index(&mut self, index: VectorIndex) -> Result<(), TreeError> {
        let missing = |id: NodeId| TreeError::Integrity(format!("no vector for node {id}"));
        for t in self.tasks.values_mut() {
            t.embedding = index.get(t.id).ok_or_else(|| missing(t.id))?.vector.clone();
        }
        for s in self.subgoals.values_mut() {
            s.embedding = index.get(s.id).ok_or_else(|| missing(s.id))?.vector.clone();
        }
        for s in self.steps.values_mut() {
            s.embedding = index.get(s.id).ok_or_else(|| missing(s.id))?.vector.clone();
        }
        self.index = index;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn remove_subgoal_unchecked(&mut self, id: NodeId) {
        self.subgoals.remove(&id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;

    fn intent(text: &str, keys: &[(&str, &str)]) -> NormalizedIntent {
        NormalizedIntent::new(
            text,
            keys.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        )
    }

    fn branch(task: PendingTask, emb: &HashEmbedder) -> PendingBranch {
        let step = PendingStep {
            pattern: ActionPattern { op: Op::Click, arg_template: None },
            descriptor: ElementDescriptor {
                role: Role::Button,
                label: "Search".into(),
                position_hint: PositionHint::Top,
                context: vec![],
            },
            embedding: emb.embed("click button search").unwrap(),
        };
        PendingBranch {
            task,
            subgoals: vec![PendingSubgoal {
                name: "Search".into(),
                pre_conditions: vec!["Search form visible".into()],
                post_conditions: vec!["Search clicked".into()],
                embedding: emb.embed("search form").unwrap(),
                steps: vec![step],
            }],
        }
    }

    #[test]
    fn first_task_gets_id_one() {
        let emb = HashEmbedder::new(64);
        let mut tree = MemoryTree::new(64);
        let id = tree
            .get_or_create_task_node(&intent("book a flight", &[("destination", "NYC")]), &emb)
            .unwrap();
        assert_eq!(id, NodeId(1));
    }

    #[test]
    fn task_dedup_is_idempotent() {
        let emb = HashEmbedder::new(64);
        let mut tree = MemoryTree::new(64);
        let n = intent("book a flight", &[("destination", "NYC")]);
        let a = tree.get_or_create_task_node(&n, &emb).unwrap();
        let b = tree.get_or_create_task_node(&n, &emb).unwrap();
        assert_eq!(a, b);
        assert_eq!(tree.tasks().len(), 1);
        // Same keys, different values still dedupe.
        let c = tree
            .get_or_create_task_node(&intent("book a flight", &[("destination", "LAX")]), &emb)
            .unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn different_key_sets_make_distinct_tasks() {
        let emb = HashEmbedder::new(64);
        let mut tree = MemoryTree::new(64);
        let a = tree
            .get_or_create_task_node(&intent("book a flight", &[("destination", "NYC")]), &emb)
            .unwrap();
        let b = tree
            .get_or_create_task_node(&intent("book a flight", &[("date", "May 1")]), &emb)
            .unwrap();
        assert_ne!(a, b);
        assert_eq!(tree.tasks().len(), 2);
    }

    #[test]
    fn walk_path_and_errors() {
        let emb = HashEmbedder::new(64);
        let mut tree = MemoryTree::new(64);
        let ids = tree
            .commit(branch(
                PendingTask::New {
                    normalized: intent("book a flight", &[]),
                    embedding: emb.embed("book a flight").unwrap(),
                },
                &emb,
            ))
            .unwrap();
        assert_eq!(ids.created, vec![NodeId(1), NodeId(2), NodeId(3)]);
        tree.validate().unwrap();
        let (t, g, s) = tree.walk_path(NodeId(3)).unwrap();
        assert_eq!((t.id, g.id, s.id), (NodeId(1), NodeId(2), NodeId(3)));
        assert_eq!(tree.walk_path(NodeId(99)).unwrap_err(), TreeError::NotFound(NodeId(99)));
        // Walking to a non-step id is also a not-found.
        assert!(matches!(tree.walk_path(NodeId(2)), Err(TreeError::NotFound(_))));

        tree.remove_subgoal_unchecked(NodeId(2));
        assert!(matches!(tree.walk_path(NodeId(3)), Err(TreeError::Integrity(_))));
        assert!(tree.validate().is_err());
    }

    #[test]
    fn commit_rejects_unknown_task() {
        let emb = HashEmbedder::new(64);
        let mut tree = MemoryTree::new(64);
        let before = tree.clone();
        let err = tree.commit(branch(PendingTask::Existing(NodeId(7)), &emb)).unwrap_err();
        assert_eq!(err, TreeError::NotFound(NodeId(7)));
        assert_eq!(tree, before);
    }

    #[test]
    fn ids_are_monotone_across_levels() {
        let emb = HashEmbedder::new(64);
        let mut tree = MemoryTree::new(64);
        let first = tree
            .commit(branch(
                PendingTask::New {
                    normalized: intent("book a flight", &[]),
                    embedding: emb.embed("book a flight").unwrap(),
                },
                &emb,
            ))
            .unwrap();
        let second = tree.commit(branch(PendingTask::Existing(first.task.unwrap()), &emb)).unwrap();
        let all: Vec<_> = first.created.iter().chain(&second.created).collect();
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(tree.task(NodeId(1)).unwrap().children.len(), 2);
        tree.validate().unwrap();
    }

    #[test]
    fn position_hint_thirds() {
        let page = Some((900.0, 900.0));
        let at = |x, y| PositionHint::locate(Some(&BBox { x, y, w: 0.0, h: 0.0 }), page);
        assert_eq!(at(450.0, 100.0), PositionHint::Top);
        assert_eq!(at(450.0, 800.0), PositionHint::Bottom);
        assert_eq!(at(100.0, 450.0), PositionHint::Left);
        assert_eq!(at(800.0, 450.0), PositionHint::Right);
        assert_eq!(at(450.0, 450.0), PositionHint::Center);
        assert_eq!(PositionHint::locate(None, page), PositionHint::Unknown);
    }

    #[test]
    fn action_validation() {
        let obs = Observation {
            elements: vec![Element {
                uid: "#q".into(),
                role: Role::Textbox,
                text: String::new(),
                context: vec![],
                bbox: None,
            }],
            page_title: "Home".into(),
            url: "/".into(),
        };
        assert!(Action::typed("#q", "NYC").validate_against(&obs).is_ok());
        assert_eq!(
            Action { op: Op::Type, target: "#q".into(), arg: None }.validate_against(&obs),
            Err(TypeError::MissingArgument { op: Op::Type })
        );
        assert_eq!(
            Action::click("#nope").validate_against(&obs),
            Err(TypeError::UnresolvedTarget("#nope".into()))
        );
        assert!(Action::stop().validate_against(&obs).is_ok());
        assert!(Instruction::new("   ").is_err());
    }
}
