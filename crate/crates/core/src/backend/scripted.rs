use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::Value;

use super::schema::*;
use super::{Backend, BackendError, BackendRequest, RequestRole};
use crate::embedding::{condition_tokens, element_match_score, jaccard, token_set, tokenize};
use crate::memory::{Constraint, ElementDescriptor, Op};
use crate::retrieval::salience_order;

/// Guards the all-zero case of the scripted planner distribution.
pub const PLANNER_EPSILON: f64 = 1e-6;

/// Canonical intents selected by trigger words, first match wins.
#[derive(Debug, Clone)]
pub struct IntentLexicon {
    entries: Vec<(Vec<String>, String)>,
    aliases: BTreeMap<String, String>,
    prepositions: Vec<(String, String)>,
}

impl Default for IntentLexicon {
    fn default() -> Self {
        let entry = |triggers: &[&str], intent: &str| {
            (triggers.iter().map(|s| s.to_string()).collect(), intent.to_string())
        };
        Self {
            entries: vec![
                entry(&["flight", "flights", "fly"], "book a flight"),
                entry(&["hotel", "hotels", "room", "stay"], "reserve a hotel"),
                entry(&["car", "cars", "rental"], "rent a car"),
                entry(&["table", "restaurant", "dinner"], "reserve a table"),
                entry(&["return", "refund"], "return an item"),
                entry(&["shop", "buy", "purchase", "store"], "buy a product"),
            ],
            aliases: [("New York", "NYC"), ("Los Angeles", "LA"), ("San Francisco", "SF")]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            prepositions: [
                ("to", "destination"),
                ("in", "city"),
                ("for", "item"),
                ("from", "origin"),
                ("on", "date"),
            ]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
        }
    }
}

impl IntentLexicon {
    pub fn with_entry(mut self, triggers: &[&str], intent: &str) -> Self {
        self.entries
            .insert(0, (triggers.iter().map(|s| s.to_string()).collect(), intent.to_string()));
        self
    }

    /// Scans for `<preposition> <Capitalized words...>` and maps the
    /// preposition to a constraint key.
    fn constraints(&self, instruction: &str) -> Vec<Constraint> {
        let words: Vec<&str> = instruction
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '$'))
            .filter(|w| !w.is_empty())
            .collect();
        let starts_value = |w: &str| w.chars().next().is_some_and(|c| c.is_uppercase() || c.is_ascii_digit() || c == '$');
        let mut out: Vec<Constraint> = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let lower = words[i].to_lowercase();
            let key = self.prepositions.iter().find(|(p, _)| *p == lower).map(|(_, k)| k.clone());
            if let Some(key) = key {
                let mut j = i + 1;
                while j < words.len() && starts_value(words[j]) {
                    j += 1;
                }
                if j > i + 1 {
                    let raw = words[i + 1..j].join(" ");
                    let value = self.aliases.get(&raw).cloned().unwrap_or(raw);
                    if !out.iter().any(|c| c.key == key) {
                        out.push(Constraint { key, value });
                    }
                    i = j;
                    continue;
                }
            }
            i += 1;
        }
        out
    }

    pub fn normalize(&self, instruction: &str) -> NormalizeResponse {
        let constraints = self.constraints(instruction);
        let tokens = token_set(instruction);
        let intent = self
            .entries
            .iter()
            .find(|(triggers, _)| triggers.iter().any(|t| tokens.contains(t)))
            .map(|(_, intent)| intent.clone())
            .unwrap_or_else(|| {
                let value_tokens: BTreeSet<String> =
                    constraints.iter().flat_map(|c| tokenize(&c.value)).collect();
                tokenize(instruction)
                    .into_iter()
                    .filter(|t| !value_tokens.contains(t))
                    .collect::<Vec<_>>()
                    .join(" ")
            });
        NormalizeResponse { intent, constraints }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    /// Returned verbatim as the answer text.
    Text(String),
    /// Produces a retryable injected fault.
    Fail { error: String },
    /// Serialized as the answer text.
    Json(Value),
}

/// Deterministic backend. Answers come from queued per-role replies first
/// (fixture overrides and fault injection), then from fixed per-role rules
/// that are pure functions of the request.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    lexicon: IntentLexicon,
    queued: Mutex<BTreeMap<RequestRole, VecDeque<ScriptedReply>>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_lexicon(lexicon: IntentLexicon) -> Self {
        Self { lexicon, queued: Mutex::default() }
    }

    pub fn push(&self, role: RequestRole, reply: ScriptedReply) -> &Self {
        self.queued.lock().unwrap().entry(role).or_default().push_back(reply);
        self
    }

    pub fn push_text(&self, role: RequestRole, text: impl Into<String>) -> &Self {
        self.push(role, ScriptedReply::Text(text.into()))
    }

    pub fn push_json(&self, role: RequestRole, value: Value) -> &Self {
        self.push(role, ScriptedReply::Json(value))
    }

    pub fn push_failure(&self, role: RequestRole, msg: impl Into<String>) -> &Self {
        self.push(role, ScriptedReply::Fail { error: msg.into() })
    }

    pub fn pending(&self) -> usize {
        self.queued.lock().unwrap().values().map(VecDeque::len).sum()
    }

    /// Loads overrides from a JSON object mapping role names to reply lists.
    pub fn load_fixture(&self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let map: BTreeMap<RequestRole, Vec<ScriptedReply>> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        for (role, replies) in map {
            for r in replies {
                self.push(role, r);
            }
        }
        Ok(())
    }

    fn rule(&self, req: &BackendRequest) -> Result<Value, BackendError> {
        let value = match req.role {
            RequestRole::Normalize => {
                let p: NormalizePayload = req.typed_payload()?;
                serde_json::to_value(self.lexicon.normalize(&p.instruction))
            }
            RequestRole::Segment => serde_json::to_value(segment_rule(&req.typed_payload()?)),
            RequestRole::Describe => serde_json::to_value(describe_rule(&req.typed_payload()?)),
            RequestRole::AbstractStep => serde_json::to_value(abstract_step_rule(&req.typed_payload()?)),
            RequestRole::AbstractState => {
                let p: AbstractStatePayload = req.typed_payload()?;
                serde_json::to_value(AbstractStateResponse { state: p.observation_summary })
            }
            RequestRole::Planner => serde_json::to_value(planner_rule(&req.typed_payload()?)),
            RequestRole::Actor => serde_json::to_value(actor_rule(&req.typed_payload()?)),
            RequestRole::BasePolicy => serde_json::to_value(base_policy_rule(&req.typed_payload()?)),
        };
        value.map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &BackendRequest) -> Result<String, BackendError> {
        let queued = self.queued.lock().unwrap().get_mut(&req.role).and_then(VecDeque::pop_front);
        match queued {
            Some(ScriptedReply::Text(t)) => Ok(t),
            Some(ScriptedReply::Json(v)) => Ok(v.to_string()),
            Some(ScriptedReply::Fail { error }) => Err(BackendError::Injected(error)),
            None => self.rule(req).map(|v| v.to_string()),
        }
    }
}

/// New stage whenever the page URL changes between consecutive steps.
fn segment_rule(p: &SegmentPayload) -> SegmentResponse {
    let mut segments: Vec<SegmentProposal> = Vec::new();
    for (i, step) in p.steps.iter().enumerate() {
        let new_stage = i == 0 || p.steps[i - 1].url != step.url;
        if new_stage {
            segments.push(SegmentProposal { start: i + 1, end: i + 1, name: None });
        } else if let Some(last) = segments.last_mut() {
            last.end = i + 1;
        }
    }
    SegmentResponse { segments }
}

fn past_tense(op: Op) -> &'static str {
    match op {
        Op::Click => "clicked",
        Op::Type => "entered",
        Op::Select => "selected",
        Op::Scroll => "scrolled",
        Op::Stop => "finished",
    }
}

fn describe_rule(p: &DescribePayload) -> DescribeResponse {
    let title = p.first_page.title.trim();
    let name = if !title.is_empty() {
        title.to_string()
    } else {
        p.steps
            .first()
            .map(|s| format!("Stage {}", s.label.trim()))
            .unwrap_or_else(|| "Stage".into())
    };
    let page_phrase = p
        .first_page
        .heading
        .as_deref()
        .filter(|h| !h.trim().is_empty())
        .unwrap_or(title);
    let mut pre = Vec::new();
    if !page_phrase.is_empty() {
        pre.push(format!("{page_phrase} visible"));
    }
    if let Some(first) = p.steps.first().filter(|s| !s.label.trim().is_empty()) {
        let phrase = format!("{} visible", first.label.trim());
        if !pre.contains(&phrase) {
            pre.push(phrase);
        }
    }
    if pre.is_empty() {
        pre.push("page visible".into());
    }
    let post = match p.steps.last() {
        Some(last) if !last.label.trim().is_empty() => {
            vec![format!("{} {}", last.label.trim(), past_tense(last.op))]
        }
        Some(last) => vec![format!("{} {}", name, past_tense(last.op))],
        None => vec![format!("{name} done")],
    };
    DescribeResponse { name, pre_conditions: pre, post_conditions: post }
}

fn abstract_step_rule(p: &AbstractStepPayload) -> AbstractStepResponse {
    let descriptor = match &p.element {
        Some(e) => ElementDescriptor {
            role: e.role,
            label: e.text.trim().to_string(),
            position_hint: e.position_hint,
            context: e.context.iter().take(3).cloned().collect(),
        },
        None => ElementDescriptor::empty(),
    };
    let arg_template = p.arg.as_ref().map(|arg| template_arg(arg, &p.constraints));
    AbstractStepResponse { op: p.op, arg_template, descriptor }
}

/// Replaces exact occurrences of constraint values with `{key}`, longest
/// value first.
pub fn template_arg(arg: &str, constraints: &[Constraint]) -> String {
    let mut by_len: Vec<&Constraint> = constraints.iter().filter(|c| !c.value.is_empty()).collect();
    by_len.sort_by(|a, b| b.value.len().cmp(&a.value.len()).then(a.key.cmp(&b.key)));
    let mut out = arg.to_string();
    for c in by_len {
        out = out.replace(&c.value, &format!("{{{}}}", c.key));
    }
    out
}

/// Distribution ∝ condition overlap + ε. A candidate repeating an earlier
/// candidate's name and conditions gets zero mass, so copies of one stage do
/// not split the probability of a single option.
pub fn planner_rule(p: &PlannerPayload) -> PlannerResponse {
    let state = token_set(&p.state);
    let mut seen: Vec<(&str, &[String], &[String])> = Vec::new();
    let raw: Vec<f64> = p
        .candidates
        .iter()
        .map(|c| {
            let key = (c.name.as_str(), c.pre_conditions.as_slice(), c.post_conditions.as_slice());
            if seen.contains(&key) {
                return 0.0;
            }
            seen.push(key);
            let tokens = if c.pre_conditions.is_empty() && c.post_conditions.is_empty() {
                token_set(&c.name)
            } else {
                condition_tokens(&c.pre_conditions, &c.post_conditions, crate::embedding::CondMode::Union)
            };
            jaccard(&tokens, &state) + PLANNER_EPSILON
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let distribution = if total > 0.0 { raw.iter().map(|x| x / total).collect() } else { raw };
    PlannerResponse { distribution }
}

fn actor_rule(p: &ActorPayload) -> ActorResponse {
    let scores = p
        .elements
        .iter()
        .map(|e| element_match_score(&p.descriptor, e.role, &e.text, &e.context, &p.weights))
        .collect();
    ActorResponse { scores }
}

/// Clicks the most salient element sharing a token with the instruction.
fn base_policy_rule(p: &BasePolicyPayload) -> BasePolicyResponse {
    let q = token_set(&p.instruction);
    let pairs: Vec<_> = p.elements.iter().map(|e| (e.role, e.text.as_str())).collect();
    let hit = salience_order(&pairs)
        .into_iter()
        .find(|&i| token_set(&p.elements[i].text).iter().any(|t| q.contains(t)));
    match hit {
        Some(i) => BasePolicyResponse { op: Op::Click, element_index: Some(p.elements[i].index), arg: None },
        None => BasePolicyResponse { op: Op::Stop, element_index: None, arg: None },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{PositionHint, Role};

    fn normalize(text: &str) -> NormalizeResponse {
        IntentLexicon::default().normalize(text)
    }

    #[test]
    fn normalizes_fly_to_new_york() {
        let n = normalize("I want to fly to New York");
        assert_eq!(n.intent, "book a flight");
        assert_eq!(n.constraints, vec![Constraint { key: "destination".into(), value: "NYC".into() }]);
    }

    #[test]
    fn canonical_intent_is_a_fixed_point() {
        let n = normalize("book a flight");
        assert_eq!(n.intent, "book a flight");
        assert!(n.constraints.is_empty());
    }

    #[test]
    fn unknown_intent_falls_back_to_tokens() {
        let n = normalize("Compare phone plans in Berlin");
        assert_eq!(n.intent, "compare phone plans in");
        assert_eq!(n.constraints[0].value, "Berlin");
    }

    #[test]
    fn segments_follow_url_changes() {
        let step = |i, url: &str| StepBrief {
            index: i,
            op: Op::Click,
            role: Some(Role::Button),
            label: "x".into(),
            arg: None,
            page_title: String::new(),
            url: url.into(),
        };
        let p = SegmentPayload {
            instruction: "x".into(),
            steps: vec![step(1, "/a"), step(2, "/a"), step(3, "/b"), step(4, "/c"), step(5, "/c")],
        };
        let got: Vec<(usize, usize)> = segment_rule(&p).segments.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(got, vec![(1, 2), (3, 3), (4, 5)]);
    }

    #[test]
    fn templating_replaces_constraint_values() {
        let c = vec![Constraint { key: "destination".into(), value: "NYC".into() }];
        assert_eq!(template_arg("NYC", &c), "{destination}");
        assert_eq!(template_arg("flights to NYC", &c), "flights to {destination}");
        assert_eq!(template_arg("Boston", &c), "Boston");
    }

    #[test]
    fn planner_distribution_normalizes_overlap() {
        let cand = |pre: &str| PlannerCandidate {
            name: pre.into(),
            pre_conditions: vec![pre.into()],
            post_conditions: vec![],
        };
        // Overlaps 3/5 = 0.6 and 1/5 = 0.2 against the five-token state.
        let p = PlannerPayload {
            instruction: "q".into(),
            state: "alpha beta gamma delta eps".into(),
            candidates: vec![cand("alpha beta gamma"), cand("alpha")],
        };
        let d = planner_rule(&p).distribution;
        let expect0 = (0.6 + PLANNER_EPSILON) / (0.8 + 2.0 * PLANNER_EPSILON);
        assert!((d[0] - expect0).abs() < 1e-12);
        assert!((d[0] - 0.75).abs() < 1e-5 && (d[1] - 0.25).abs() < 1e-5);

        let zero = PlannerPayload {
            instruction: "q".into(),
            state: "zzz".into(),
            candidates: vec![cand("a"), cand("b"), cand("c")],
        };
        let d = planner_rule(&zero).distribution;
        assert!(d.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));

        let dup = PlannerPayload {
            instruction: "q".into(),
            state: "alpha".into(),
            candidates: vec![cand("alpha"), cand("alpha"), cand("beta")],
        };
        let d = planner_rule(&dup).distribution;
        assert_eq!(d[1], 0.0);
        assert!(d[0] > d[2]);
    }

    #[test]
    fn describe_rule_mentions_first_control() {
        let brief = StepBrief {
            index: 1,
            op: Op::Click,
            role: Some(Role::Button),
            label: "Search".into(),
            arg: None,
            page_title: "Flight search".into(),
            url: "/".into(),
        };
        let page = PageBrief { title: "Flight search".into(), url: "/".into(), heading: None, summary: String::new() };
        let d = describe_rule(&DescribePayload {
            instruction: "x".into(),
            steps: vec![brief],
            first_page: page.clone(),
            last_page: page,
        });
        assert_eq!(d.name, "Flight search");
        assert!(d.pre_conditions.iter().any(|c| c == "Search visible"));
        assert_eq!(d.post_conditions, vec!["Search clicked".to_string()]);
    }

    #[test]
    fn queued_replies_take_precedence_then_rules_resume() {
        let b = ScriptedBackend::new();
        b.push_text(RequestRole::AbstractState, "garbage");
        b.push_failure(RequestRole::AbstractState, "down");
        let req = BackendRequest::new(
            RequestRole::AbstractState,
            &AbstractStatePayload { observation_summary: "s".into() },
        );
        assert_eq!(b.complete(&req).unwrap(), "garbage");
        assert!(matches!(b.complete(&req), Err(BackendError::Injected(_))));
        assert_eq!(b.complete(&req).unwrap(), r#"{"state":"s"}"#);
    }

    #[test]
    fn rules_are_pure() {
        let b = ScriptedBackend::new();
        let req = BackendRequest::new(
            RequestRole::AbstractStep,
            &AbstractStepPayload {
                op: Op::Click,
                arg: None,
                element: Some(ElementBrief {
                    role: Role::Button,
                    text: "Search".into(),
                    context: vec!["a".into(), "b".into(), "c".into(), "d".into()],
                    position_hint: PositionHint::Top,
                }),
                constraints: vec![],
            },
        );
        let a = b.complete(&req).unwrap();
        assert_eq!(a, b.complete(&req).unwrap());
        let r: AbstractStepResponse = serde_json::from_str(&a).unwrap();
        assert_eq!(r.descriptor.context.len(), 3);
    }
}
