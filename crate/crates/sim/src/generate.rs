//! Seeded generation of cross-website site pairs and their tasks.

use std::collections::{BTreeMap, BTreeSet};

use hmt_core::memory::{Action, BBox, Element, Op, Role};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::site::{GroundTruthStep, Page, SimTask, SiteBundle, SiteSpec, Transition};
use crate::templates::{value_pool, ElTpl, WorkflowTemplate, CHROME, INJECTED};

const SYNONYMS_JSON: &str = include_str!("../../../fixtures/v1/synonyms.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynonymTable {
    pub version: u32,
    pub pairs: Vec<(String, String)>,
}

impl SynonymTable {
    pub fn shipped() -> Self {
        serde_json::from_str(SYNONYMS_JSON).expect("shipped synonym table parses")
    }

    pub fn lookup(&self, word: &str) -> Option<&str> {
        let lower = word.to_lowercase();
        self.pairs.iter().find(|(from, _)| *from == lower).map(|(_, to)| to.as_str())
    }

    /// Replaces the first word that has a synonym, keeping its leading case.
    pub fn paraphrase(&self, text: &str) -> String {
        let words: Vec<&str> = text.split(' ').collect();
        for (i, w) in words.iter().enumerate() {
            if let Some(to) = self.lookup(w) {
                let replaced = if w.chars().next().is_some_and(char::is_uppercase) {
                    let mut c = to.chars();
                    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
                } else {
                    to.to_string()
                };
                let mut out: Vec<String> = words.iter().map(|s| s.to_string()).collect();
                out[i] = replaced;
                return out.join(" ");
            }
        }
        text.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    A,
    B,
}

impl Variant {
    fn prefix(self) -> char {
        match self {
            Variant::A => 'a',
            Variant::B => 'b',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePair {
    pub template: String,
    pub seed: u64,
    pub a: SiteSpec,
    pub b: SiteSpec,
}

fn template_salt(name: &str) -> u64 {
    name.bytes().fold(0x9e37_79b9_7f4a_7c15u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    variant: Variant,
    seed: u64,
    template: &'static str,
    synonyms: &'a SynonymTable,
    used: BTreeSet<String>,
    keys: BTreeMap<String, String>,
}

impl Builder<'_> {
    fn uid(&mut self) -> String {
        loop {
            let uid = format!("{}{}-{}-{:06x}", self.variant.prefix(), self.seed, self.template, self.rng.gen::<u32>() & 0xff_ffff);
            if self.used.insert(uid.clone()) {
                return uid;
            }
        }
    }

    fn text(&self, text: &str) -> String {
        match self.variant {
            Variant::A => text.to_string(),
            Variant::B => self.synonyms.paraphrase(text),
        }
    }

    fn element(&mut self, key: String, role: Role, text: &str, context: &[&str]) -> Element {
        let uid = self.uid();
        self.keys.insert(uid.clone(), key);
        Element {
            uid,
            role,
            text: self.text(text),
            context: context.iter().map(|c| c.to_string()).collect(),
            bbox: None,
        }
    }

    fn element_of(&mut self, key: String, t: &ElTpl) -> Element {
        self.element(key, t.role, t.text, t.context)
    }

    fn chrome(&mut self, page: &str, out: &mut Vec<Element>) {
        let n = self.rng.gen_range(3..=CHROME.len().min(5));
        let mut picks: Vec<&ElTpl> = CHROME.choose_multiple(&mut self.rng, n).collect();
        picks.sort_by_key(|t| t.key);
        for t in picks {
            out.push(self.element_of(format!("{page}.{}", t.key), t));
        }
    }

    fn finish_page(&mut self, page: &str, mut elements: Vec<Element>) -> Vec<Element> {
        if self.variant == Variant::B {
            let n = self.rng.gen_range(2..=4);
            let picks: Vec<&ElTpl> = INJECTED.choose_multiple(&mut self.rng, n).collect();
            for t in picks {
                let e = self.element_of(format!("{page}.{}", t.key), t);
                elements.push(e);
            }
            elements.shuffle(&mut self.rng);
        }
        for (i, e) in elements.iter_mut().enumerate() {
            e.bbox = Some(BBox { x: 20.0, y: 20.0 + 40.0 * i as f64, w: 300.0, h: 30.0 });
        }
        elements
    }
}

fn build_site(t: &WorkflowTemplate, seed: u64, variant: Variant, synonyms: &SynonymTable) -> SiteSpec {
    let salt = match variant {
        Variant::A => 0xa,
        Variant::B => 0xb,
    };
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed ^ template_salt(t.name) ^ salt),
        variant,
        seed,
        template: t.name,
        synonyms,
        used: BTreeSet::new(),
        keys: BTreeMap::new(),
    };
    let name = format!("{}{}-{}", variant.prefix(), seed, t.name);
    let host = format!("https://{name}.example");
    let mut pages = BTreeMap::new();
    let mut transitions = Vec::new();
    for (i, stage) in t.stages.iter().enumerate() {
        let page_id = format!("{}.{}", t.name, stage.id);
        let mut elements = Vec::new();
        elements.push(b.element(format!("{page_id}.heading"), Role::Heading, stage.heading, &["main"]));
        b.chrome(&page_id, &mut elements);
        if i > 0 {
            let back = format!("Back to {}", t.stages[i - 1].title);
            elements.push(b.element(format!("{page_id}.back"), Role::Link, &back, &["breadcrumb"]));
        }
        let mut last_uid = String::new();
        for a in stage.actions {
            let e = b.element_of(a.el.key.to_string(), &a.el);
            last_uid = e.uid.clone();
            elements.push(e);
        }
        for d in stage.decoys {
            elements.push(b.element_of(d.key.to_string(), d));
        }
        let next = match t.stages.get(i + 1) {
            Some(s) => format!("{}.{}", t.name, s.id),
            None => format!("{}.done", t.name),
        };
        let last = stage.actions.last().expect("stages have actions");
        transitions.push(Transition { page: page_id.clone(), op: last.op, uid: last_uid, arg: None, next });
        let elements = b.finish_page(&page_id, elements);
        let title = b.text(stage.title);
        pages.insert(page_id.clone(), Page { title, url: format!("{host}/{}", stage.id), elements });
    }
    let done_id = format!("{}.done", t.name);
    let mut elements = vec![
        b.element(format!("{done_id}.heading"), Role::Heading, t.done_heading, &["main"]),
        b.element(format!("{done_id}.notice"), Role::Generic, t.done_title, &["main"]),
    ];
    b.chrome(&done_id, &mut elements);
    let elements = b.finish_page(&done_id, elements);
    let title = b.text(t.done_title);
    pages.insert(done_id.clone(), Page { title, url: format!("{host}/done"), elements });
    SiteSpec {
        name,
        start_page: format!("{}.{}", t.name, t.stages[0].id),
        success_page: done_id,
        pages,
        transitions,
        keys: b.keys,
    }
}

/// Pure function of `(seed, template)`. Site B renames every uid, permutes
/// element order, paraphrases labels and injects distractors.
pub fn generate_site_pair(seed: u64, t: &WorkflowTemplate, synonyms: &SynonymTable) -> SitePair {
    let a = build_site(t, seed, Variant::A, synonyms);
    let b = build_site(t, seed, Variant::B, synonyms);
    assert!(a.uids().is_disjoint(&b.uids()), "site pair uid sets must be disjoint");
    SitePair { template: t.name.to_string(), seed, a, b }
}

pub fn instruction_for(t: &WorkflowTemplate, phrasing: usize, values: &BTreeMap<String, String>) -> String {
    let mut text = t.phrasings[phrasing % t.phrasings.len()].to_string();
    for (k, v) in values {
        text = text.replace(&format!("{{{k}}}"), v);
    }
    text
}

/// Task with the given constraint values; ground truth follows the
/// template's stages on `site`.
pub fn make_task(t: &WorkflowTemplate, site: &SiteSpec, phrasing: usize, values: &BTreeMap<String, String>) -> SimTask {
    let mut ground_truth = Vec::new();
    let mut required = BTreeMap::new();
    for stage in t.stages {
        let page = format!("{}.{}", t.name, stage.id);
        for a in stage.actions {
            let uid = site.uid_for_key(a.el.key).expect("template keys exist on generated sites").to_string();
            let action = match (a.op, a.arg) {
                (Op::Type, Some(key)) => {
                    let v = values.get(key).cloned().unwrap_or_default();
                    required.insert(uid.clone(), v.clone());
                    Action::typed(uid, v)
                }
                _ => Action { op: a.op, target: uid, arg: None },
            };
            ground_truth.push(GroundTruthStep { page: page.clone(), action });
        }
    }
    SimTask { instruction: instruction_for(t, phrasing, values), template: t.name.to_string(), required, success_page: None, ground_truth }
}

/// Draws distinct values for each key of the template.
pub fn draw_values(t: &WorkflowTemplate, rng: &mut impl Rng) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut taken: Vec<&str> = Vec::new();
    for key in t.keys {
        let pool: Vec<&str> = value_pool(key).iter().copied().filter(|v| !taken.contains(v)).collect();
        let v = pool.choose(rng).copied().unwrap_or(value_pool(key)[0]);
        taken.push(v);
        out.insert(key.to_string(), v.to_string());
    }
    out
}

/// `n` tasks with pairwise distinct instructions, none of which is in
/// `exclude`.
pub fn draw_tasks(
    t: &WorkflowTemplate,
    site: &SiteSpec,
    n: usize,
    rng: &mut impl Rng,
    exclude: &BTreeSet<String>,
) -> Vec<SimTask> {
    let mut out: Vec<SimTask> = Vec::new();
    let mut seen = exclude.clone();
    let mut attempts = 0;
    while out.len() < n && attempts < 1000 {
        attempts += 1;
        let values = draw_values(t, rng);
        let phrasing = rng.gen_range(0..t.phrasings.len());
        let task = make_task(t, site, phrasing, &values);
        if seen.insert(task.instruction.clone()) {
            out.push(task);
        }
    }
    out
}

/// Small click-only site whose tasks the memory-free base policy can solve,
/// used to grow memory online from nothing.
pub fn help_center() -> SiteBundle {
    let el = |uid: &str, role: Role, text: &str, i: usize| Element {
        uid: uid.into(),
        role,
        text: text.into(),
        context: vec!["main".into()],
        bbox: Some(BBox { x: 20.0, y: 20.0 + 40.0 * i as f64, w: 300.0, h: 30.0 }),
    };
    let page = |title: &str, url: &str, elements: Vec<Element>| Page { title: title.into(), url: url.into(), elements };
    let mut pages = BTreeMap::new();
    pages.insert(
        "help.home".to_string(),
        page(
            "Support",
            "https://help.example/",
            vec![
                el("hc-01", Role::Heading, "How can we help", 0),
                el("hc-02", Role::Button, "Open help center", 1),
                el("hc-03", Role::Link, "Home", 2),
                el("hc-04", Role::Generic, "Answers to common questions", 3),
            ],
        ),
    );
    pages.insert(
        "help.center".to_string(),
        page(
            "Help center",
            "https://help.example/center",
            vec![
                el("hc-11", Role::Heading, "Help center", 0),
                el("hc-12", Role::Link, "Contact support", 1),
                el("hc-13", Role::Link, "Report a bug", 2),
                el("hc-14", Role::Link, "Read the FAQ", 3),
                el("hc-15", Role::Generic, "Popular topics", 4),
            ],
        ),
    );
    let done = [
        ("help.contact", "Support request sent", "hc-21", "hc-12"),
        ("help.bug", "Bug report received", "hc-31", "hc-13"),
        ("help.faq", "Frequently asked questions", "hc-41", "hc-14"),
    ];
    let mut transitions = vec![Transition {
        page: "help.home".into(),
        op: Op::Click,
        uid: "hc-02".into(),
        arg: None,
        next: "help.center".into(),
    }];
    for (id, title, heading_uid, link) in done {
        pages.insert(id.to_string(), page(title, &format!("https://help.example/{id}"), vec![el(heading_uid, Role::Heading, title, 0)]));
        transitions.push(Transition { page: "help.center".into(), op: Op::Click, uid: link.into(), arg: None, next: id.into() });
    }
    let site = SiteSpec {
        name: "help-center".into(),
        start_page: "help.home".into(),
        success_page: "help.contact".into(),
        pages,
        transitions,
        keys: BTreeMap::new(),
    };
    let tasks = [
        ("Open the help center and contact support", "help.contact", "hc-12"),
        ("Go to the help center to contact support", "help.contact", "hc-12"),
        ("Open help and contact support about my account", "help.contact", "hc-12"),
        ("Open the help center and report a bug", "help.bug", "hc-13"),
        ("Open the help center and read the FAQ", "help.faq", "hc-14"),
    ]
    .into_iter()
    .map(|(instruction, success, link)| SimTask {
        instruction: instruction.into(),
        template: "help".into(),
        required: BTreeMap::new(),
        success_page: Some(success.into()),
        ground_truth: vec![
            GroundTruthStep { page: "help.home".into(), action: Action::click("hc-02") },
            GroundTruthStep { page: "help.center".into(), action: Action::click(link) },
        ],
    })
    .collect();
    SiteBundle { site, tasks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::site::replay;
    use crate::templates::{FLIGHT, SHOP, TEMPLATES};

    #[test]
    fn find_button_is_search_under_table() {
        let syn = SynonymTable::shipped();
        assert_eq!(syn.lookup("Search"), Some("find"));
        assert_eq!(syn.paraphrase("Search flights"), "Find flights");
        let pair = generate_site_pair(3, &SHOP, &syn);
        let a = pair.a.uid_for_key("shop.search").unwrap();
        let b = pair.b.uid_for_key("shop.search").unwrap();
        let text = |s: &SiteSpec, uid: &str| {
            s.pages.values().flat_map(|p| &p.elements).find(|e| e.uid == uid).unwrap().text.clone()
        };
        assert_eq!(text(&pair.a, a), "Search store");
        assert_eq!(text(&pair.b, b), "Find store");
    }

    #[test]
    fn paraphrase_without_synonym_is_identity() {
        assert_eq!(SynonymTable::shipped().paraphrase("Outdoor"), "Outdoor");
    }

    #[test]
    fn shipped_table_has_about_forty_pairs() {
        let t = SynonymTable::shipped();
        assert_eq!(t.version, 1);
        assert!((35..=50).contains(&t.pairs.len()));
    }

    #[test]
    fn same_seed_gives_identical_pair() {
        let syn = SynonymTable::shipped();
        assert_eq!(generate_site_pair(11, &FLIGHT, &syn), generate_site_pair(11, &FLIGHT, &syn));
        assert_ne!(generate_site_pair(11, &FLIGHT, &syn).a, generate_site_pair(12, &FLIGHT, &syn).a);
    }

    #[test]
    fn generated_sites_validate_and_ground_truth_succeeds() {
        let syn = SynonymTable::shipped();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in TEMPLATES {
            let pair = generate_site_pair(7, t, &syn);
            for site in [&pair.a, &pair.b] {
                site.validate().unwrap();
                for task in draw_tasks(t, site, 3, &mut rng, &BTreeSet::new()) {
                    let traj = replay(site, &task).unwrap();
                    assert!(traj.success, "{} on {}", task.instruction, site.name);
                    assert_eq!(traj.len(), t.step_count());
                }
            }
        }
    }

    #[test]
    fn instructions_normalize_to_one_intent_per_template() {
        let lex = hmt_core::backend::IntentLexicon::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in TEMPLATES {
            let pair = generate_site_pair(1, t, &SynonymTable::shipped());
            let intents: BTreeSet<String> = draw_tasks(t, &pair.a, 8, &mut rng, &BTreeSet::new())
                .iter()
                .map(|task| lex.normalize(&task.instruction))
                .map(|n| {
                    let keys: Vec<&str> = n.constraints.iter().map(|c| c.key.as_str()).collect();
                    assert_eq!(keys.len(), t.keys.len(), "{}", n.intent);
                    n.intent
                })
                .collect();
            assert_eq!(intents.len(), 1, "{}: {intents:?}", t.name);
        }
    }

    #[test]
    fn help_center_tasks_replay() {
        let b = help_center();
        b.site.validate().unwrap();
        for t in &b.tasks {
            assert!(replay(&b.site, t).unwrap().success, "{}", t.instruction);
        }
    }

    proptest::proptest! {
        #[test]
        fn uid_sets_are_disjoint(seed in 0u64..10_000, which in 0usize..6) {
            let pair = generate_site_pair(seed, TEMPLATES[which], &SynonymTable::shipped());
            proptest::prop_assert!(pair.a.uids().is_disjoint(&pair.b.uids()));
            proptest::prop_assert_eq!(pair.a.keys.len(), pair.a.uids().len());
        }
    }
}
