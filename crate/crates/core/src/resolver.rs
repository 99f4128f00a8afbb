//! Maps grounded semantic actions onto what an environment accepts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{Element, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentKind {
    #[default]
    IdBased,
    CoordinateBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvAction {
    ById { op: Op, uid: String, #[serde(default, skip_serializing_if = "Option::is_none")] arg: Option<String> },
    ByPoint { op: Op, x: f64, y: f64, #[serde(default, skip_serializing_if = "Option::is_none")] arg: Option<String> },
    NoTarget { op: Op, #[serde(default, skip_serializing_if = "Option::is_none")] arg: Option<String> },
}

impl EnvAction {
    pub fn op(&self) -> Op {
        match self {
            EnvAction::ById { op, .. } | EnvAction::ByPoint { op, .. } | EnvAction::NoTarget { op, .. } => *op,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResolveError {
    #[error("{op} needs a matched element")]
    MissingElement { op: Op },
    #[error("element {uid} has no bounding box")]
    MissingBBox { uid: String },
}

/// Learned point predictor for coordinate environments. Not implemented; the
/// resolver uses bounding-box centers instead.
pub trait GroundingModel {
    fn predict(&self, element: &Element) -> Option<(f64, f64)>;
}

pub fn resolve(
    op: Op,
    element: Option<&Element>,
    arg: Option<String>,
    kind: EnvironmentKind,
) -> Result<EnvAction, ResolveError> {
    if !op.targets_element() {
        return Ok(EnvAction::NoTarget { op, arg });
    }
    let element = element.ok_or(ResolveError::MissingElement { op })?;
    match kind {
        EnvironmentKind::IdBased => Ok(EnvAction::ById { op, uid: element.uid.clone(), arg }),
        EnvironmentKind::CoordinateBased => {
            let bbox = element.bbox.as_ref().ok_or_else(|| ResolveError::MissingBBox { uid: element.uid.clone() })?;
            let (x, y) = bbox.center();
            Ok(EnvAction::ByPoint { op, x, y, arg })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{BBox, Role};

    fn el(bbox: Option<BBox>) -> Element {
        Element { uid: "#new-btn-119".into(), role: Role::Button, text: "Select".into(), context: vec![], bbox }
    }

    #[test]
    fn id_based_passes_uid_through() {
        let a = resolve(Op::Click, Some(&el(None)), None, EnvironmentKind::IdBased).unwrap();
        assert_eq!(a, EnvAction::ById { op: Op::Click, uid: "#new-btn-119".into(), arg: None });
    }

    #[test]
    fn coordinate_based_uses_center() {
        let e = el(Some(BBox { x: 10.0, y: 20.0, w: 100.0, h: 40.0 }));
        let a = resolve(Op::Click, Some(&e), None, EnvironmentKind::CoordinateBased).unwrap();
        assert_eq!(a, EnvAction::ByPoint { op: Op::Click, x: 60.0, y: 40.0, arg: None });
    }

    #[test]
    fn coordinate_based_without_bbox_fails() {
        let err = resolve(Op::Click, Some(&el(None)), None, EnvironmentKind::CoordinateBased).unwrap_err();
        assert!(matches!(err, ResolveError::MissingBBox { .. }));
        assert!(resolve(Op::Click, None, None, EnvironmentKind::IdBased).is_err());
        assert_eq!(resolve(Op::Stop, None, None, EnvironmentKind::CoordinateBased).unwrap().op(), Op::Stop);
    }
}
