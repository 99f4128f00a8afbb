//! Site definitions and the deterministic environment that executes them.

use std::collections::{BTreeMap, BTreeSet};

use hmt_core::inference::{EnvError, Environment};
use hmt_core::memory::{Action, Element, Observation, Op, Trajectory, TrajectoryStep};
use hmt_core::resolver::{EnvAction, EnvironmentKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub title: String,
    pub url: String,
    pub elements: Vec<Element>,
}

/// Edge of the page graph. `arg` of `None` matches any argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub page: String,
    pub op: Op,
    pub uid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<String>,
    pub next: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub name: String,
    pub start_page: String,
    pub success_page: String,
    pub pages: BTreeMap<String, Page>,
    pub transitions: Vec<Transition>,
    /// uid → logical element key shared by both sites of a pair.
    #[serde(default)]
    pub keys: BTreeMap<String, String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SiteError {
    #[error("start page {0:?} does not exist")]
    MissingStart(String),
    #[error("success page {0:?} does not exist")]
    MissingSuccess(String),
    #[error("transition from {page:?} references missing {what} {name:?}")]
    Dangling { page: String, what: &'static str, name: String },
    #[error("duplicate element uid {0:?}")]
    DuplicateUid(String),
    #[error("ground truth step {index} is not executable: {reason}")]
    GroundTruth { index: usize, reason: String },
}

impl SiteSpec {
    pub fn validate(&self) -> Result<(), SiteError> {
        if !self.pages.contains_key(&self.start_page) {
            return Err(SiteError::MissingStart(self.start_page.clone()));
        }
        if !self.pages.contains_key(&self.success_page) {
            return Err(SiteError::MissingSuccess(self.success_page.clone()));
        }
        let mut seen = BTreeSet::new();
        for page in self.pages.values() {
            for e in &page.elements {
                if !seen.insert(e.uid.as_str()) {
                    return Err(SiteError::DuplicateUid(e.uid.clone()));
                }
            }
        }
        for t in &self.transitions {
            let dangling = |what, name: &str| SiteError::Dangling { page: t.page.clone(), what, name: name.to_string() };
            let page = self.pages.get(&t.page).ok_or_else(|| dangling("page", &t.page))?;
            if !self.pages.contains_key(&t.next) {
                return Err(dangling("page", &t.next));
            }
            if !page.elements.iter().any(|e| e.uid == t.uid) {
                return Err(dangling("element", &t.uid));
            }
        }
        Ok(())
    }

    pub fn uids(&self) -> BTreeSet<String> {
        self.pages.values().flat_map(|p| p.elements.iter().map(|e| e.uid.clone())).collect()
    }

    pub fn uid_for_key(&self, key: &str) -> Option<&str> {
        self.keys.iter().find(|(_, k)| k.as_str() == key).map(|(u, _)| u.as_str())
    }

    fn next_page(&self, page: &str, op: Op, uid: &str, arg: Option<&str>) -> Option<&str> {
        self.transitions
            .iter()
            .find(|t| t.page == page && t.op == op && t.uid == uid && (t.arg.is_none() || t.arg.as_deref() == arg))
            .map(|t| t.next.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthStep {
    pub page: String,
    pub action: Action,
}

/// A task on one site. The validator requires the success page and every
/// `required` typed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTask {
    pub instruction: String,
    pub template: String,
    pub required: BTreeMap<String, String>,
    /// Overrides the site's success page.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_page: Option<String>,
    pub ground_truth: Vec<GroundTruthStep>,
}

impl SimTask {
    pub fn validator_accepts(&self, site: &SiteSpec, page: &str, typed: &BTreeMap<String, String>) -> bool {
        page == self.success_page.as_deref().unwrap_or(&site.success_page)
            && self.required.iter().all(|(uid, v)| typed.get(uid) == Some(v))
    }
}

#[derive(Debug, Clone)]
pub struct SimEnv<'a> {
    site: &'a SiteSpec,
    required: BTreeMap<String, String>,
    success_page: String,
    kind: EnvironmentKind,
    page: String,
    typed: BTreeMap<String, String>,
}

impl<'a> SimEnv<'a> {
    /// Environment whose validator checks only the success page.
    pub fn new(site: &'a SiteSpec) -> Self {
        Self {
            site,
            required: BTreeMap::new(),
            success_page: site.success_page.clone(),
            kind: EnvironmentKind::IdBased,
            page: site.start_page.clone(),
            typed: BTreeMap::new(),
        }
    }

    pub fn for_task(site: &'a SiteSpec, task: &SimTask) -> Self {
        let success_page = task.success_page.clone().unwrap_or_else(|| site.success_page.clone());
        Self { required: task.required.clone(), success_page, ..Self::new(site) }
    }

    pub fn with_kind(mut self, kind: EnvironmentKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn page_id(&self) -> &str {
        &self.page
    }

    pub fn typed(&self) -> &BTreeMap<String, String> {
        &self.typed
    }

    fn current(&self) -> &Page {
        &self.site.pages[&self.page]
    }

    fn act(&mut self, op: Op, uid: &str, arg: Option<&str>) -> Result<(), EnvError> {
        if !self.current().elements.iter().any(|e| e.uid == uid) {
            return Err(EnvError(format!("element {uid:?} is not on page {:?}", self.page)));
        }
        if op == Op::Type {
            self.typed.insert(uid.to_string(), arg.unwrap_or_default().to_string());
        }
        if let Some(next) = self.site.next_page(&self.page, op, uid, arg) {
            self.page = next.to_string();
        }
        Ok(())
    }
}

impl Environment for SimEnv<'_> {
    fn kind(&self) -> EnvironmentKind {
        self.kind
    }

    fn observe(&self) -> Observation {
        let p = self.current();
        Observation { elements: p.elements.clone(), page_title: p.title.clone(), url: p.url.clone() }
    }

    fn apply(&mut self, action: &EnvAction) -> Result<(), EnvError> {
        match action {
            EnvAction::ById { op, uid, arg } => self.act(*op, uid, arg.as_deref()),
            EnvAction::ByPoint { op, x, y, arg } => {
                let uid = self
                    .current()
                    .elements
                    .iter()
                    .find(|e| e.bbox.is_some_and(|b| b.contains(*x, *y)))
                    .map(|e| e.uid.clone())
                    .ok_or_else(|| EnvError(format!("no element at ({x}, {y})")))?;
                self.act(*op, &uid, arg.as_deref())
            }
            EnvAction::NoTarget { .. } => Ok(()),
        }
    }

    fn is_success(&self) -> bool {
        self.page == self.success_page && self.required.iter().all(|(uid, v)| self.typed.get(uid) == Some(v))
    }
}

/// Executes the ground truth from the start page, recording the trajectory.
pub fn replay(site: &SiteSpec, task: &SimTask) -> Result<Trajectory, SiteError> {
    let mut env = SimEnv::for_task(site, task);
    let mut steps = Vec::new();
    for (index, gt) in task.ground_truth.iter().enumerate() {
        if env.page_id() != gt.page {
            return Err(SiteError::GroundTruth {
                index,
                reason: format!("expected page {:?}, at {:?}", gt.page, env.page_id()),
            });
        }
        let observation = env.observe();
        env.act(gt.action.op, &gt.action.target, gt.action.arg.as_deref())
            .map_err(|e| SiteError::GroundTruth { index, reason: e.0 })?;
        steps.push(TrajectoryStep { observation, action: gt.action.clone() });
    }
    let success = env.is_success();
    let instruction = hmt_core::memory::Instruction::new(task.instruction.clone())
        .map_err(|e| SiteError::GroundTruth { index: 0, reason: e.to_string() })?;
    Ok(Trajectory { instruction, steps, success })
}

/// Site plus its tasks, the on-disk form read by the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteBundle {
    pub site: SiteSpec,
    #[serde(default)]
    pub tasks: Vec<SimTask>,
}
