//! Command-line configuration: defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use hmt_core::backend::{Backend, RemoteBackend, RemoteConfig, ScriptedBackend};
use hmt_core::embedding::{Embedder, HashEmbedder, RemoteEmbedder, DEFAULT_DIMENSION};
use hmt_core::inference::{AblationToggles, AgentSettings, FallbackConfig, GroundingConfig};
use hmt_core::pipeline::PipelineConfig;
use hmt_core::retrieval::RetrievalConfig;
use hmt_sim::bench::BenchmarkConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        let r = RemoteConfig::default();
        Self { kind: BackendKind::Scripted, base_url: None, model: None, timeout_secs: r.timeout_secs, max_in_flight: r.max_in_flight }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    pub dimension: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self { kind: EmbedderKind::Hash, dimension: DEFAULT_DIMENSION, base_url: None, model: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub memory: PathBuf,
    pub episodes: PathBuf,
    pub fixtures: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            memory: "memory.hmt".into(),
            episodes: "fixtures/v1/episodes.jsonl".into(),
            fixtures: "fixtures/v1".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub retrieval: RetrievalConfig,
    pub fallback: FallbackConfig,
    pub grounding: GroundingConfig,
    pub toggles: AblationToggles,
    pub pipeline: PipelineConfig,
    pub backend: BackendSection,
    pub embedder: EmbedderSection,
    pub paths: PathsSection,
    pub benchmark: BenchmarkConfig,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<BackendKind>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub k_t: Option<usize>,
    pub k_g: Option<usize>,
    pub k_s: Option<usize>,
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub tau: Option<f64>,
    pub toggles: Option<AblationToggles>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(k) = o.backend {
            self.backend.kind = k;
        }
        if let Some(u) = &o.base_url {
            self.backend.base_url = Some(u.clone());
        }
        if let Some(m) = &o.model {
            self.backend.model = Some(m.clone());
        }
        let r = &mut self.retrieval;
        r.k_t = o.k_t.unwrap_or(r.k_t);
        r.k_g = o.k_g.unwrap_or(r.k_g);
        r.k_s = o.k_s.unwrap_or(r.k_s);
        r.lambda = o.lambda.unwrap_or(r.lambda);
        self.fallback.delta = o.delta.unwrap_or(self.fallback.delta);
        self.fallback.tau = o.tau.unwrap_or(self.fallback.tau);
        if let Some(t) = o.toggles {
            self.toggles = t;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.retrieval.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let fb = &self.fallback;
        if fb.delta < 0.0 || !(0.0..=1.0).contains(&fb.tau) || fb.expand_factor < 2 {
            return Err(CliError::Usage("fallback: need delta >= 0, tau in [0, 1], expand_factor >= 2".into()));
        }
        if self.backend.kind == BackendKind::Remote && self.backend.base_url.is_none() {
            return Err(CliError::Usage("backend.kind = \"remote\" requires backend.base_url".into()));
        }
        if self.embedder.kind == EmbedderKind::Remote && self.embedder.base_url.is_none() {
            return Err(CliError::Usage("embedder.kind = \"remote\" requires embedder.base_url".into()));
        }
        self.benchmark.validate().map_err(|e| CliError::Usage(format!("benchmark: {e}")))?;
        if self.embedder.dimension == 0 {
            return Err(CliError::Usage("embedder.dimension must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn settings(&self) -> AgentSettings {
        AgentSettings {
            retrieval: self.retrieval.clone(),
            fallback: self.fallback.clone(),
            grounding: self.grounding,
            toggles: self.toggles,
            pipeline: self.pipeline.clone(),
        }
    }

    pub fn backend(&self) -> Box<dyn Backend> {
        match self.backend.kind {
            BackendKind::Scripted => Box::new(ScriptedBackend::new()),
            BackendKind::Remote => {
                let d = RemoteConfig::default();
                Box::new(RemoteBackend::new(RemoteConfig {
                    base_url: self.backend.base_url.clone().unwrap_or(d.base_url),
                    model: self.backend.model.clone().unwrap_or(d.model),
                    timeout_secs: self.backend.timeout_secs,
                    max_in_flight: self.backend.max_in_flight,
                }))
            }
        }
    }

    pub fn embedder(&self) -> Box<dyn Embedder> {
        match self.embedder.kind {
            EmbedderKind::Hash => Box::new(HashEmbedder::new(self.embedder.dimension)),
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(
                self.embedder.base_url.clone().unwrap_or_default(),
                self.embedder.model.clone().unwrap_or_default(),
                self.embedder.dimension,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = CliConfig::default();
        let r = &c.retrieval;
        assert_eq!((r.k_t, r.k_g, r.k_s, r.n_h, r.n_e), (5, 8, 5, 6, 30));
        assert_eq!(r.lambda, 0.3);
        assert_eq!((c.fallback.delta, c.fallback.tau), (0.1, 0.15));
        assert_eq!((c.fallback.expand_factor, c.fallback.max_expansions), (2, 1));
    }

    #[test]
    fn printed_defaults_parse_back_identically() {
        let c = CliConfig::default();
        let back: CliConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_file_values() {
        let mut c: CliConfig = toml::from_str("[retrieval]\nk_g = 4\nlambda = 0.5\n").unwrap();
        c.apply(&Overrides { lambda: Some(0.0), ..Default::default() });
        assert_eq!(c.retrieval.k_g, 4);
        assert_eq!(c.retrieval.lambda, 0.0);
    }

    #[test]
    fn remote_backend_requires_base_url() {
        let c: CliConfig = toml::from_str("[backend]\nkind = \"remote\"\n").unwrap();
        assert!(matches!(c.validate(), Err(CliError::Usage(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<CliConfig>("[retrieval]\nk_x = 1\n").is_err());
    }
}
