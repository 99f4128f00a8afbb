//! Backend abstraction for every model call made during memory construction
//! and inference.
//!
//! A backend takes a [`BackendRequest`] (role + structured payload) and returns
//! the raw text of its structured JSON answer. Parsing and retrying is done by
//! callers through [`call_structured`], so malformed output from any backend is
//! handled the same way.

mod remote;
pub mod schema;
mod scripted;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{IntentLexicon, ScriptedBackend, ScriptedReply};

/// Environment variable holding the bearer token for remote services.
pub const API_KEY_ENV: &str = "HMT_API_KEY";

/// Version tag of the prompt set below. Prompts are reconstructions.
pub const PROMPT_VERSION: &str = "hmt-prompts/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestRole {
    Normalize,
    Segment,
    Describe,
    AbstractStep,
    AbstractState,
    Planner,
    Actor,
    BasePolicy,
}

impl RequestRole {
    pub const ALL: [RequestRole; 8] = [
        RequestRole::Normalize,
        RequestRole::Segment,
        RequestRole::Describe,
        RequestRole::AbstractStep,
        RequestRole::AbstractState,
        RequestRole::Planner,
        RequestRole::Actor,
        RequestRole::BasePolicy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RequestRole::Normalize => "normalize",
            RequestRole::Segment => "segment",
            RequestRole::Describe => "describe",
            RequestRole::AbstractStep => "abstract_step",
            RequestRole::AbstractState => "abstract_state",
            RequestRole::Planner => "planner",
            RequestRole::Actor => "actor",
            RequestRole::BasePolicy => "base_policy",
        }
    }

    /// System prompt for remote backends.
    pub fn system_prompt(self) -> &'static str {
        match self {
            RequestRole::Normalize => "Rewrite the user's web task instruction as a canonical lowercase verb phrase (the intent) plus a list of key/value constraints. Identical requests phrased differently must map to the same intent.",
            RequestRole::Segment => "Partition the numbered trajectory steps into contiguous functional stages. Every step must belong to exactly one stage; indices are 1-based and inclusive.",
            RequestRole::Describe => "Name the stage shown by these steps and list its pre-conditions and post-conditions as short phrases describing observable UI state on the first and last pages.",
            RequestRole::AbstractStep => "Describe the acted-on element by role, visible label, coarse position and landmark context so it can be found on a different website. Replace argument text that equals a constraint value with {key}. Never output element identifiers.",
            RequestRole::AbstractState => "Summarize the current page state in one short line.",
            RequestRole::Planner => "Given the task, the current page state and candidate stages with their pre/post-conditions, output a probability for each candidate that it is the stage the page is currently in.",
            RequestRole::Actor => "Score every candidate element (0 to 1) by how well it matches the element description for the action.",
            RequestRole::BasePolicy => "Choose the next browser action for the task from the listed elements, or STOP when no element helps.",
        }
    }

    /// JSON schema of the structured answer expected for this role.
    pub fn response_schema(self) -> Value {
        let string_list = json!({ "type": "array", "items": { "type": "string" } });
        let number_list = json!({ "type": "array", "items": { "type": "number", "minimum": 0 } });
        match self {
            RequestRole::Normalize => json!({
                "type": "object",
                "required": ["intent", "constraints"],
                "properties": {
                    "intent": { "type": "string", "minLength": 1 },
                    "constraints": { "type": "array", "items": {
                        "type": "object", "required": ["key", "value"],
                        "properties": { "key": { "type": "string" }, "value": { "type": "string" } }
                    }}
                }
            }),
            RequestRole::Segment => json!({
                "type": "object",
                "required": ["segments"],
                "properties": { "segments": { "type": "array", "items": {
                    "type": "object", "required": ["start", "end"],
                    "properties": {
                        "start": { "type": "integer", "minimum": 1 },
                        "end": { "type": "integer", "minimum": 1 },
                        "name": { "type": ["string", "null"] }
                    }
                }}}
            }),
            RequestRole::Describe => json!({
                "type": "object",
                "required": ["name", "pre_conditions", "post_conditions"],
                "properties": {
                    "name": { "type": "string", "minLength": 1 },
                    "pre_conditions": string_list,
                    "post_conditions": string_list
                }
            }),
            RequestRole::AbstractStep => json!({
                "type": "object",
                "required": ["op", "descriptor"],
                "properties": {
                    "op": { "enum": ["CLICK", "TYPE", "SELECT", "SCROLL", "STOP"] },
                    "arg_template": { "type": ["string", "null"] },
                    "descriptor": {
                        "type": "object",
                        "required": ["role", "label", "position_hint"],
                        "properties": {
                            "role": { "type": "string" },
                            "label": { "type": "string" },
                            "position_hint": { "enum": ["top", "bottom", "left", "right", "center", "unknown"] },
                            "context": string_list
                        }
                    }
                }
            }),
            RequestRole::AbstractState => json!({
                "type": "object", "required": ["state"],
                "properties": { "state": { "type": "string" } }
            }),
            RequestRole::Planner => json!({
                "type": "object", "required": ["distribution"],
                "properties": { "distribution": number_list }
            }),
            RequestRole::Actor => json!({
                "type": "object", "required": ["scores"],
                "properties": { "scores": number_list }
            }),
            RequestRole::BasePolicy => json!({
                "type": "object", "required": ["op"],
                "properties": {
                    "op": { "enum": ["CLICK", "TYPE", "SELECT", "SCROLL", "STOP"] },
                    "element_index": { "type": ["integer", "null"] },
                    "arg": { "type": ["string", "null"] }
                }
            }),
        }
    }
}

impl std::fmt::Display for RequestRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub role: RequestRole,
    pub payload: Value,
}

impl BackendRequest {
    pub fn new(role: RequestRole, payload: &impl Serialize) -> Self {
        let payload = serde_json::to_value(payload).expect("payload types serialize infallibly");
        Self { role, payload }
    }

    pub fn response_schema(&self) -> Value {
        self.role.response_schema()
    }

    pub fn typed_payload<T: DeserializeOwned>(&self) -> Result<T, BackendError> {
        serde_json::from_value(self.payload.clone())
            .map_err(|e| BackendError::BadRequest(format!("{} payload: {e}", self.role)))
    }

    /// Whitespace-delimited words in the payload's string leaves, plus one per
    /// scalar. Used as the context-size proxy.
    pub fn context_tokens(&self) -> usize {
        fn words(v: &Value) -> usize {
            match v {
                Value::Null => 0,
                Value::Bool(_) | Value::Number(_) => 1,
                Value::String(s) => s.split_whitespace().count(),
                Value::Array(a) => a.iter().map(words).sum(),
                Value::Object(o) => o.values().map(words).sum(),
            }
        }
        words(&self.payload)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed backend envelope: {0}")]
    Malformed(String),
    #[error("request rejected: {0}")]
    BadRequest(String),
    #[error("injected fault: {0}")]
    Injected(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Injected(_) => true,
            BackendError::Status { code, .. } => *code == 429 || *code >= 500,
            BackendError::Malformed(_) | BackendError::BadRequest(_) => false,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Returns the raw text of the structured answer.
    fn complete(&self, req: &BackendRequest) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, req: &BackendRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, req: &BackendRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }
}

/// Retry budget for malformed structured output.
pub const DEFAULT_RETRIES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{role} failed after {attempts} attempt(s): {reason}")]
pub struct CallError {
    pub role: RequestRole,
    pub attempts: usize,
    pub reason: String,
    /// Last raw response text, when the backend produced one.
    pub raw: Option<String>,
}

/// Calls the backend, parses the answer as `T` and runs `check` on it.
/// Malformed answers and retryable transport errors are retried up to
/// `retries` more times.
pub fn call_structured<T, F>(
    backend: &dyn Backend,
    req: &BackendRequest,
    retries: usize,
    mut check: F,
) -> Result<T, CallError>
where
    T: DeserializeOwned,
    F: FnMut(&T) -> Result<(), String>,
{
    let mut last_reason = String::new();
    let mut last_raw = None;
    let attempts = retries + 1;
    for attempt in 1..=attempts {
        match backend.complete(req) {
            Ok(raw) => {
                match parse_json_answer::<T>(&raw).and_then(|v| check(&v).map(|_| v)) {
                    Ok(v) => return Ok(v),
                    Err(reason) => {
                        last_reason = reason;
                        last_raw = Some(raw);
                    }
                }
            }
            Err(e) => {
                last_reason = e.to_string();
                if !e.is_retryable() {
                    return Err(CallError { role: req.role, attempts: attempt, reason: last_reason, raw: last_raw });
                }
            }
        }
    }
    Err(CallError { role: req.role, attempts, reason: last_reason, raw: last_raw })
}

/// Accepts bare JSON or JSON wrapped in a Markdown code fence.
fn parse_json_answer<T: DeserializeOwned>(raw: &str) -> Result<T, String> {
    let trimmed = raw.trim();
    let body = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed);
    serde_json::from_str(body.trim()).map_err(|e| format!("unparseable answer: {e}"))
}
