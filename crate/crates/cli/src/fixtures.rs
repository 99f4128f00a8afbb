//! Regenerates the shipped fixture corpus from a seed.

use std::path::{Path, PathBuf};

use hmt_core::memory::Observation;
use hmt_core::persist::write_episodes;
use hmt_sim::bench::{build_suite, BenchmarkConfig};
use hmt_sim::site::SiteBundle;
use serde::Serialize;

use crate::config::CliConfig;
use crate::CliError;

#[derive(Serialize)]
struct BenchmarkFile<'a> {
    benchmark: &'a BenchmarkConfig,
}

fn write(path: PathBuf, text: String, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(&path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    written.push(path);
    Ok(())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("fixtures serialize") + "\n"
}

/// Writes `episodes.jsonl`, `benchmark.toml`, `hmt.toml`, one bundle per site
/// under `sites/` and sample observations under `pages/`.
pub fn write_fixtures(dir: &Path, seed: u64) -> Result<Vec<PathBuf>, CliError> {
    let bench = BenchmarkConfig { seed, ..BenchmarkConfig::default() };
    let suite = build_suite(&bench).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut written = Vec::new();
    write(dir.join("episodes.jsonl"), write_episodes(&suite.episodes()), &mut written)?;
    let bench_toml = toml::to_string(&BenchmarkFile { benchmark: &bench }).expect("config serializes");
    write(dir.join("benchmark.toml"), bench_toml, &mut written)?;
    let cli = CliConfig { benchmark: bench.clone(), ..CliConfig::default() };
    write(dir.join("hmt.toml"), cli.to_toml(), &mut written)?;
    for sp in &suite.pairs {
        let mut a_tasks = sp.train.clone();
        a_tasks.extend(sp.cross_task.iter().cloned());
        let a = SiteBundle { site: sp.pair.a.clone(), tasks: a_tasks };
        let b = SiteBundle { site: sp.pair.b.clone(), tasks: sp.cross_website.clone() };
        for bundle in [a, b] {
            write(dir.join("sites").join(format!("{}.json", bundle.site.name)), json(&bundle), &mut written)?;
        }
    }
    let help = hmt_sim::generate::help_center();
    write(dir.join("sites").join("help-center.json"), json(&help), &mut written)?;
    for sp in &suite.pairs {
        let site = &sp.pair.b;
        for page_id in [&site.start_page, &format!("{}.results", sp.pair.template)] {
            if let Some(p) = site.pages.get(page_id.as_str()) {
                let o = Observation { elements: p.elements.clone(), page_title: p.title.clone(), url: p.url.clone() };
                write(dir.join("pages").join(format!("{}.json", page_id)), json(&o), &mut written)?;
            }
        }
    }
    Ok(written)
}
