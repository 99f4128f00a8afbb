//! The `hmt` command line: build, inspect, run and evaluate memory trees.

pub mod config;
pub mod fixtures;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hmt_core::inference::{run_episode, SideIndex};
use hmt_core::memory::{Instruction, MemoryTree, Observation};
use hmt_core::persist::{build_offline, load_episodes, load_tree, save_tree, EpisodeError, LoadMode, SnapshotError};
use hmt_core::retrieval::{build_subgoal_query, retrieve_steps, retrieve_subgoals, retrieve_tasks, summarize_observation};
use hmt_sim::bench::{run_benchmark, BenchError, MethodVariant};
use hmt_sim::site::{SimEnv, SiteBundle};
use serde::Serialize;
use thiserror::Error;

use config::{BackendKind, CliConfig, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input paths.
    #[error("{0}")]
    Usage(String),
    /// The command ran but the domain operation failed.
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hmt", version, about = "Hierarchical memory for web agents")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub show_config: bool,
    #[command(flatten)]
    pub overrides: OverrideArgs,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct OverrideArgs {
    #[arg(long, global = true, value_parser = ["scripted", "remote"])]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub k_t: Option<usize>,
    #[arg(long, global = true)]
    pub k_g: Option<usize>,
    #[arg(long, global = true)]
    pub k_s: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Ablation variant whose toggles replace the configured ones.
    #[arg(long, global = true)]
    pub variant: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a memory snapshot from an episode file.
    Build {
        #[arg(long)]
        episodes: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip invalid records instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Show what retrieval returns for an instruction.
    Query {
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        instruction: String,
        /// Observation JSON used for condition matching and step retrieval.
        #[arg(long)]
        page: Option<PathBuf>,
    },
    /// Run tasks on a site bundle.
    Run {
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        site: PathBuf,
        /// Task instruction; repeat for several episodes.
        #[arg(long = "task", required = true)]
        tasks: Vec<String>,
        /// Insert successful episodes and save the grown snapshot.
        #[arg(long)]
        online: bool,
        /// JSON-lines trace output.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        max_steps: usize,
    },
    /// Run the benchmark from the `[benchmark]` config section.
    Eval {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the fixture corpus.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

impl OverrideArgs {
    fn to_overrides(&self) -> Result<Overrides, CliError> {
        let toggles = match &self.variant {
            Some(name) => Some(MethodVariant::parse(name).map(MethodVariant::toggles).ok_or_else(|| {
                let valid: Vec<&str> = MethodVariant::ALL.iter().map(|v| v.name()).collect();
                CliError::Usage(format!("unknown variant {name:?}; valid variants: {}", valid.join(", ")))
            })?),
            None => None,
        };
        Ok(Overrides {
            backend: self.backend.as_deref().map(|b| if b == "remote" { BackendKind::Remote } else { BackendKind::Scripted }),
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            k_t: self.k_t,
            k_g: self.k_g,
            k_s: self.k_s,
            lambda: self.lambda,
            delta: self.delta,
            tau: self.tau,
            toggles,
        })
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn effective_config(cli: &Cli) -> Result<CliConfig, CliError> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    cfg.apply(&cli.overrides.to_overrides()?);
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Domain(format!("writing output: {e}")))
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    if cli.show_config {
        return emit(out, &cfg.to_toml());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Usage("no command given; see --help".into()));
    };
    match command {
        Command::Build { episodes, out: dest, lenient } => {
            let episodes = episodes.clone().unwrap_or_else(|| cfg.paths.episodes.clone());
            let dest = dest.clone().unwrap_or_else(|| cfg.paths.memory.clone());
            emit(out, &cmd_build(&cfg, &episodes, &dest, *lenient)?)
        }
        Command::Query { memory, instruction, page } => {
            let memory = memory.clone().unwrap_or_else(|| cfg.paths.memory.clone());
            emit(out, &cmd_query(&cfg, &memory, instruction, page.as_deref())?)
        }
        Command::Run { memory, site, tasks, online, trace, max_steps } => {
            let memory = memory.clone().unwrap_or_else(|| cfg.paths.memory.clone());
            let trace = trace.clone().unwrap_or_else(|| cfg.paths.reports.join("trace.jsonl"));
            let opts = RunOptions { memory, site: site.clone(), tasks: tasks.clone(), online: *online, trace, max_steps: *max_steps };
            cmd_run(&cfg, &opts, out)
        }
        Command::Eval { out: dest } => {
            let dest = dest.clone().unwrap_or_else(|| cfg.paths.reports.join("report.json"));
            emit(out, &cmd_eval(&cfg, &dest)?)
        }
        Command::Fixtures { out: dir, seed } => {
            let written = fixtures::write_fixtures(dir, *seed)?;
            let mut text = String::new();
            for p in written {
                let _ = writeln!(text, "wrote {}", p.display());
            }
            emit(out, &text)
        }
    }
}

pub fn cmd_build(cfg: &CliConfig, episodes: &Path, dest: &Path, lenient: bool) -> Result<String, CliError> {
    let mode = if lenient { LoadMode::Lenient } else { LoadMode::Strict };
    let loaded = load_episodes(episodes, mode).map_err(|e| match e {
        EpisodeError::Io { .. } => CliError::Usage(e.to_string()),
        EpisodeError::Invalid { .. } => CliError::Domain(format!("{}: {e}", episodes.display())),
    })?;
    let backend = cfg.backend();
    let embedder = cfg.embedder();
    let built = build_offline(&loaded.records, backend.as_ref(), embedder.as_ref(), &cfg.pipeline);
    save_tree(&built.tree, dest).map_err(|e| CliError::Domain(e.to_string()))?;
    let r = &built.report;
    let mut s = String::new();
    let _ = writeln!(s, "episodes read:          {}", r.episodes);
    let _ = writeln!(s, "invalid lines skipped:  {}", loaded.skipped.len());
    for sk in &loaded.skipped {
        let _ = writeln!(s, "  line {}: {}", sk.line, sk.reason);
    }
    let _ = writeln!(s, "unsuccessful filtered:  {}", r.filtered_unsuccessful);
    let _ = writeln!(s, "episodes inserted:      {}", r.inserted.len());
    let _ = writeln!(s, "episodes failed:        {}", r.failures.len());
    for f in &r.failures {
        let _ = writeln!(s, "  episode {} ({}): {}", f.index + 1, f.source_site, f.reason);
    }
    let _ = writeln!(s, "tasks / subgoals / steps: {} / {} / {}", r.tasks, r.subgoals, r.steps);
    let _ = writeln!(s, "snapshot: {}", dest.display());
    Ok(s)
}

fn load_memory(path: &Path) -> Result<MemoryTree, CliError> {
    load_tree(path).map_err(|e| match e {
        SnapshotError::Io { .. } => CliError::Usage(e.to_string()),
        _ => CliError::Domain(format!("{}: {e}", path.display())),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn embed_err(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(format!("embedding failed: {e}"))
}

pub fn cmd_query(cfg: &CliConfig, memory: &Path, instruction: &str, page: Option<&Path>) -> Result<String, CliError> {
    let tree = load_memory(memory)?;
    let observation: Option<Observation> = page.map(read_json).transpose()?;
    let embedder = cfg.embedder();
    let rc = &cfg.retrieval;
    let mut s = String::new();
    let _ = writeln!(s, "instruction: {instruction}");
    if tree.is_empty() {
        let _ = writeln!(s, "no candidates: memory is empty");
        return Ok(s);
    }
    let o = observation.clone().unwrap_or_default();
    if observation.is_none() {
        let _ = writeln!(s, "notice: no page supplied; condition scores are 0");
    }
    let tasks = retrieve_tasks(&tree, embedder.as_ref(), instruction, rc).map_err(embed_err)?;
    let _ = writeln!(s, "\ntasks");
    let _ = writeln!(s, "{:>4}  {:>6}  {:>8}  intent", "rank", "id", "score");
    for (i, t) in tasks.entries.iter().enumerate() {
        let node = tree.task(t.node_id).expect("retrieved ids exist");
        let _ = writeln!(s, "{:>4}  {:>6}  {:>8.4}  {}", i + 1, t.node_id.0, t.total, node.normalized.intent);
    }
    let o_summary = summarize_observation(&o, rc.n_e);
    let subgoals = retrieve_subgoals(&tree, embedder.as_ref(), &tasks, instruction, "", &o_summary, rc).map_err(embed_err)?;
    let _ = writeln!(s, "\nsubgoals (query: {:?})", build_subgoal_query(instruction, "", &o_summary));
    let _ = writeln!(s, "{:>4}  {:>6}  {:>8}  {:>8}  {:>8}  name", "rank", "id", "total", "cosine", "cond");
    for (i, g) in subgoals.entries.iter().enumerate() {
        let node = tree.subgoal(g.node_id).expect("retrieved ids exist");
        let _ = writeln!(
            s,
            "{:>4}  {:>6}  {:>8.4}  {:>8.4}  {:>8.4}  {}",
            i + 1,
            g.node_id.0,
            g.total,
            g.cosine,
            g.cond,
            node.name
        );
    }
    if let Some(top) = subgoals.entries.first().and_then(|e| tree.subgoal(e.node_id)) {
        let steps = retrieve_steps(&tree, embedder.as_ref(), top, &o, rc).map_err(embed_err)?;
        let _ = writeln!(s, "\nsteps of subgoal {} ({})", top.id.0, top.name);
        let _ = writeln!(s, "{:>4}  {:>6}  {:>8}  action", "rank", "id", "score");
        for (i, st) in steps.iter().enumerate() {
            let node = tree.step(st.node_id).expect("retrieved ids exist");
            let arg = node.pattern.arg_template.as_deref().map(|a| format!(" {a:?}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:>4}  {:>6}  {:>8.4}  {} {} {:?}{arg}",
                i + 1,
                st.node_id.0,
                st.score,
                node.pattern.op,
                node.descriptor.role,
                node.descriptor.label
            );
        }
    } else {
        let _ = writeln!(s, "no candidates: no subgoals under the retrieved tasks");
    }
    Ok(s)
}

pub struct RunOptions {
    pub memory: PathBuf,
    pub site: PathBuf,
    pub tasks: Vec<String>,
    pub online: bool,
    pub trace: PathBuf,
    pub max_steps: usize,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    task: usize,
    #[serde(flatten)]
    trace: &'a hmt_core::inference::StepTrace,
}

pub fn cmd_run(cfg: &CliConfig, opts: &RunOptions, out: &mut dyn Write) -> Result<(), CliError> {
    let bundle: SiteBundle = read_json(&opts.site)?;
    bundle.site.validate().map_err(|e| io_err(&opts.site, e))?;
    let embedder = cfg.embedder();
    let backend = cfg.backend();
    let mut tree = if opts.online && !opts.memory.exists() {
        MemoryTree::new(embedder.dimension())
    } else {
        load_memory(&opts.memory)?
    };
    let settings = cfg.settings();
    let mut side = SideIndex::default();
    if let Some(dir) = opts.trace.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut trace_text = String::new();
    let mut failures = 0;
    let known: BTreeMap<&str, &hmt_sim::SimTask> = bundle.tasks.iter().map(|t| (t.instruction.as_str(), t)).collect();
    for (i, task) in opts.tasks.iter().enumerate() {
        let q = Instruction::new(task.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut env = match known.get(task.as_str()) {
            Some(t) => SimEnv::for_task(&bundle.site, t),
            None => SimEnv::new(&bundle.site),
        };
        let outcome = run_episode(&mut env, &mut tree, &mut side, backend.as_ref(), embedder.as_ref(), &settings, &q, opts.max_steps, opts.online)
            .map_err(|e| CliError::Domain(format!("task {}: {e}", i + 1)))?;
        for t in &outcome.traces {
            trace_text.push_str(&serde_json::to_string(&TraceLine { task: i + 1, trace: t }).expect("traces serialize"));
            trace_text.push('\n');
        }
        let status = if outcome.success { "success" } else { "failure" };
        let mut line = format!("task {}: {status} after {} steps", i + 1, outcome.trajectory.len());
        if let Some(e) = &outcome.error {
            let _ = write!(line, " ({e})");
        }
        if !outcome.success {
            failures += 1;
        }
        if let Some(ids) = &outcome.inserted {
            let _ = write!(line, "; inserted {} nodes, memory has {}", ids.created.len(), tree.node_count());
            save_tree(&tree, &opts.memory).map_err(|e| CliError::Domain(e.to_string()))?;
        }
        emit(out, &(line + "\n"))?;
    }
    std::fs::write(&opts.trace, trace_text).map_err(|e| io_err(&opts.trace, e))?;
    emit(out, &format!("trace: {}\n", opts.trace.display()))?;
    if failures > 0 {
        return Err(CliError::Domain(format!("{failures} of {} tasks failed", opts.tasks.len())));
    }
    Ok(())
}

pub fn cmd_eval(cfg: &CliConfig, dest: &Path) -> Result<String, CliError> {
    if cfg.backend.kind != BackendKind::Scripted {
        return Err(CliError::Usage("the benchmark runs on the scripted backend only".into()));
    }
    let report = run_benchmark(&cfg.benchmark, &cfg.settings()).map_err(|e| match e {
        BenchError::UnknownVariant { .. } | BenchError::UnknownTemplate { .. } | BenchError::Invalid(_) => {
            CliError::Usage(e.to_string())
        }
    })?;
    if let Some(dir) = dest.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(dest, report.to_json()).map_err(|e| io_err(dest, e))?;
    Ok(format!("{}\nreport: {}\n", report.table(), dest.display()))
}
