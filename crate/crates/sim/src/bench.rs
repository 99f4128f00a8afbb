//! Benchmark driver: builds memory from site A episodes and evaluates every
//! configured variant on both splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use hmt_core::backend::ScriptedBackend;
use hmt_core::embedding::HashEmbedder;
use hmt_core::inference::{AblationToggles, AgentSettings};
use hmt_core::persist::{build_offline, BuildReport, EpisodeRecord, OfflineBuild};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{draw_tasks, generate_site_pair, SitePair, SynonymTable};
use crate::metrics::{evaluate, measure_grounding, GroundingMode, Memory, MetricsReport};
use crate::site::{replay, SimTask};
use crate::templates::{template, TEMPLATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodVariant {
    Full,
    Flat,
    NoConditions,
    RawId,
    NoPlanner,
    NoFallback,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 6] = [
        MethodVariant::Full,
        MethodVariant::Flat,
        MethodVariant::NoConditions,
        MethodVariant::RawId,
        MethodVariant::NoPlanner,
        MethodVariant::NoFallback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodVariant::Full => "full",
            MethodVariant::Flat => "flat",
            MethodVariant::NoConditions => "no-conditions",
            MethodVariant::RawId => "raw-id",
            MethodVariant::NoPlanner => "no-planner",
            MethodVariant::NoFallback => "no-fallback",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn toggles(self) -> AblationToggles {
        let mut t = AblationToggles::default();
        match self {
            MethodVariant::Full => {}
            MethodVariant::Flat => t.flat_memory = true,
            MethodVariant::NoConditions => t.use_conditions = false,
            MethodVariant::RawId => t.use_raw_ids = true,
            MethodVariant::NoPlanner => t.use_planner = false,
            MethodVariant::NoFallback => t.use_fallback = false,
        }
        t
    }
}

fn default_seed() -> u64 {
    7
}
fn default_one() -> usize {
    1
}
fn default_two() -> usize {
    2
}
fn default_k() -> usize {
    5
}
fn default_variants() -> Vec<String> {
    MethodVariant::ALL.iter().map(|v| v.name().to_string()).collect()
}
fn default_templates() -> Vec<String> {
    TEMPLATES.iter().map(|t| t.name.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_one")]
    pub pairs_per_template: usize,
    #[serde(default = "default_two")]
    pub train_per_pair: usize,
    #[serde(default = "default_two")]
    pub test_per_pair: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    #[serde(default = "default_templates")]
    pub templates: Vec<String>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            pairs_per_template: default_one(),
            train_per_pair: default_two(),
            test_per_pair: default_two(),
            k: default_k(),
            variants: default_variants(),
            templates: default_templates(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("unknown variant {name:?}; valid variants: {valid}")]
    UnknownVariant { name: String, valid: String },
    #[error("unknown template {name:?}; valid templates: {valid}")]
    UnknownTemplate { name: String, valid: String },
    #[error("invalid benchmark config: {0}")]
    Invalid(String),
}

impl BenchmarkConfig {
    pub fn parsed_variants(&self) -> Result<Vec<MethodVariant>, BenchError> {
        let mut out: Vec<MethodVariant> = self
            .variants
            .iter()
            .map(|n| {
                MethodVariant::parse(n).ok_or_else(|| BenchError::UnknownVariant {
                    name: n.clone(),
                    valid: default_variants().join(", "),
                })
            })
            .collect::<Result<_, _>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.parsed_variants()?;
        for name in &self.templates {
            if template(name).is_none() {
                return Err(BenchError::UnknownTemplate { name: name.clone(), valid: default_templates().join(", ") });
            }
        }
        if self.k == 0 || self.pairs_per_template == 0 || self.train_per_pair == 0 || self.test_per_pair == 0 {
            return Err(BenchError::Invalid("k and all per-pair counts must be at least 1".into()));
        }
        if self.variants.is_empty() || self.templates.is_empty() {
            return Err(BenchError::Invalid("variants and templates must be non-empty".into()));
        }
        Ok(())
    }
}

/// Site pairs and tasks of one benchmark configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub pairs: Vec<SuitePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuitePair {
    pub pair: SitePair,
    pub train: Vec<SimTask>,
    /// Held-out tasks on site A.
    pub cross_task: Vec<SimTask>,
    /// Tasks on site B.
    pub cross_website: Vec<SimTask>,
}

fn pair_seed(seed: u64, template_index: usize, p: usize) -> u64 {
    seed * 1000 + (template_index * 100 + p) as u64
}

pub fn build_suite(cfg: &BenchmarkConfig) -> Result<Suite, BenchError> {
    cfg.validate()?;
    let synonyms = SynonymTable::shipped();
    let mut pairs = Vec::new();
    for (ti, name) in cfg.templates.iter().enumerate() {
        let t = template(name).expect("validated");
        for p in 0..cfg.pairs_per_template {
            let seed = pair_seed(cfg.seed, ti, p);
            let pair = generate_site_pair(seed, t, &synonyms);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = draw_tasks(t, &pair.a, cfg.train_per_pair, &mut rng, &BTreeSet::new());
            let seen: BTreeSet<String> = train.iter().map(|t| t.instruction.clone()).collect();
            let cross_task = draw_tasks(t, &pair.a, cfg.test_per_pair, &mut rng, &seen);
            let cross_website = draw_tasks(t, &pair.b, cfg.test_per_pair, &mut rng, &seen);
            pairs.push(SuitePair { pair, train, cross_task, cross_website });
        }
    }
    Ok(Suite { pairs })
}

impl Suite {
    /// Ground-truth replays of every training task, in suite order.
    pub fn episodes(&self) -> Vec<EpisodeRecord> {
        self.pairs
            .iter()
            .flat_map(|sp| {
                sp.train.iter().map(|t| {
                    let traj = replay(&sp.pair.a, t).expect("generated ground truth replays");
                    EpisodeRecord::from_trajectory(&traj, sp.pair.a.name.clone())
                })
            })
            .collect()
    }

    /// uid → logical key over every site A.
    pub fn source_keys(&self) -> BTreeMap<String, String> {
        self.pairs.iter().flat_map(|sp| sp.pair.a.keys.clone()).collect()
    }

    pub fn build(&self, settings: &AgentSettings) -> OfflineBuild {
        build_offline(&self.episodes(), &ScriptedBackend::new(), &HashEmbedder::default(), &settings.pipeline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReports {
    pub cross_website: MetricsReport,
    pub cross_task: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub episodes: usize,
    pub tasks: usize,
    pub subgoals: usize,
    pub steps: usize,
    pub failures: usize,
}

impl From<&BuildReport> for BuildSummary {
    fn from(r: &BuildReport) -> Self {
        Self { episodes: r.episodes, tasks: r.tasks, subgoals: r.subgoals, steps: r.steps, failures: r.failures.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub build: BuildSummary,
    /// Keyed by variant name.
    pub variants: BTreeMap<String, SplitReports>,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn table(&self) -> String {
        let header = ["variant", "split", "recall@k", "recall@k(cov)", "grounding", "step_sr", "task_sr", "avg_steps", "ctx_tokens"];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for (name, r) in &self.variants {
            for (split, m) in [("cross-website", &r.cross_website), ("cross-task", &r.cross_task)] {
                rows.push(vec![
                    name.clone(),
                    split.to_string(),
                    format!("{:.3}", m.recall_at_k),
                    format!("{:.3}", m.recall_at_k_covered),
                    format!("{:.3}", m.grounding_success),
                    format!("{:.3}", m.step_sr),
                    format!("{:.3}", m.task_sr),
                    format!("{:.2}", m.avg_steps),
                    m.avg_context_tokens.to_string(),
                ]);
            }
        }
        let widths: Vec<usize> = (0..header.len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            }
        }
        out
    }
}

pub fn run_benchmark(cfg: &BenchmarkConfig, base: &AgentSettings) -> Result<BenchmarkReport, BenchError> {
    let variants = cfg.parsed_variants()?;
    let suite = build_suite(cfg)?;
    let mut settings = base.clone();
    settings.retrieval.k_s = cfg.k;
    let built = suite.build(&settings);
    let keys = suite.source_keys();
    let mem = Memory { tree: &built.tree, side: &built.side, source_keys: &keys };
    let backend = ScriptedBackend::new();
    let embedder = HashEmbedder::default();
    let website: Vec<_> = suite.pairs.iter().map(|sp| (&sp.pair.b, sp.cross_website.clone())).collect();
    let task: Vec<_> = suite.pairs.iter().map(|sp| (&sp.pair.a, sp.cross_task.clone())).collect();

    let results: Vec<(MethodVariant, SplitReports)> = std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&v| {
                let mut s = settings.clone();
                s.toggles = v.toggles();
                let (mem, backend, embedder, website, task) = (&mem, &backend, &embedder, &website, &task);
                scope.spawn(move || {
                    let cross_website = evaluate(mem, backend, embedder, &s, website);
                    let cross_task = evaluate(mem, backend, embedder, &s, task);
                    (v, SplitReports { cross_website, cross_task })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("variant evaluation does not panic")).collect()
    });
    Ok(BenchmarkReport {
        config: cfg.clone(),
        build: BuildSummary::from(&built.report),
        variants: results.into_iter().map(|(v, r)| (v.name().to_string(), r)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGrounding {
    pub template: String,
    pub seed: u64,
    pub raw_id: f64,
    pub descriptor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingStudy {
    pub pairs: Vec<PairGrounding>,
    pub raw_id: f64,
    pub descriptor: f64,
}

/// Cross-website grounding on `n` seeded pairs, cycling through templates.
/// Memory for each pair is built from its own site A episodes.
pub fn grounding_study(seed: u64, n: usize, settings: &AgentSettings) -> GroundingStudy {
    let synonyms = SynonymTable::shipped();
    let mut pairs = Vec::new();
    let (mut raw_hits, mut desc_hits, mut total) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let t = TEMPLATES[i % TEMPLATES.len()];
        let pseed = seed * 1000 + i as u64;
        let pair = generate_site_pair(pseed, t, &synonyms);
        let mut rng = ChaCha8Rng::seed_from_u64(pseed);
        let train = draw_tasks(t, &pair.a, 2, &mut rng, &BTreeSet::new());
        let test = draw_tasks(t, &pair.b, 2, &mut rng, &BTreeSet::new());
        let records: Vec<EpisodeRecord> = train
            .iter()
            .map(|task| EpisodeRecord::from_trajectory(&replay(&pair.a, task).expect("replays"), pair.a.name.clone()))
            .collect();
        let built = build_offline(&records, &ScriptedBackend::new(), &HashEmbedder::default(), &settings.pipeline);
        let mem = Memory { tree: &built.tree, side: &built.side, source_keys: &pair.a.keys };
        let raw_id = measure_grounding(&mem, settings, &pair.b, &test, GroundingMode::RawId);
        let descriptor = measure_grounding(&mem, settings, &pair.b, &test, GroundingMode::Descriptor);
        let steps: usize = test.iter().map(|t| t.ground_truth.len()).sum();
        raw_hits += raw_id * steps as f64;
        desc_hits += descriptor * steps as f64;
        total += steps;
        pairs.push(PairGrounding { template: t.name.to_string(), seed: pseed, raw_id, descriptor });
    }
    let frac = |h: f64| if total == 0 { 0.0 } else { h / total as f64 };
    GroundingStudy { raw_id: frac(raw_hits), descriptor: frac(desc_hits), pairs }
}
