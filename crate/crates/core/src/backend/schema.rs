//! Per-role payload and response shapes exchanged with a backend.

use serde::{Deserialize, Serialize};

use crate::embedding::GroundingWeights;
use crate::memory::{Constraint, ElementDescriptor, Op, PositionHint, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizePayload {
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeResponse {
    pub intent: String,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

/// One trajectory step as shown to the backend. Raw uids are never included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBrief {
    pub index: usize,
    pub op: Op,
    pub role: Option<Role>,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<String>,
    pub page_title: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPayload {
    pub instruction: String,
    pub steps: Vec<StepBrief>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentProposal {
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentResponse {
    pub segments: Vec<SegmentProposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageBrief {
    pub title: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<String>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribePayload {
    pub instruction: String,
    pub steps: Vec<StepBrief>,
    pub first_page: PageBrief,
    pub last_page: PageBrief,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescribeResponse {
    pub name: String,
    pub pre_conditions: Vec<String>,
    pub post_conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementBrief {
    pub role: Role,
    pub text: String,
    pub context: Vec<String>,
    pub position_hint: PositionHint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractStepPayload {
    pub op: Op,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element: Option<ElementBrief>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractStepResponse {
    pub op: Op,
    #[serde(default)]
    pub arg_template: Option<String>,
    pub descriptor: ElementDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractStatePayload {
    pub observation_summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractStateResponse {
    pub state: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerCandidate {
    pub name: String,
    #[serde(default)]
    pub pre_conditions: Vec<String>,
    #[serde(default)]
    pub post_conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerPayload {
    pub instruction: String,
    pub state: String,
    pub candidates: Vec<PlannerCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerResponse {
    pub distribution: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateElement {
    pub index: usize,
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub context: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorPayload {
    pub instruction: String,
    pub op: Op,
    pub descriptor: ElementDescriptor,
    pub elements: Vec<CandidateElement>,
    pub weights: GroundingWeights,
    /// Raw trajectory text supplied instead of abstractions (flat baseline).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exemplar_context: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorResponse {
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePolicyPayload {
    pub instruction: String,
    pub history: String,
    pub page: String,
    pub elements: Vec<CandidateElement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasePolicyResponse {
    pub op: Op,
    #[serde(default)]
    pub element_index: Option<usize>,
    #[serde(default)]
    pub arg: Option<String>,
}
