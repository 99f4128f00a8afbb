//! Deterministic synthetic websites, cross-website site pairs and the
//! evaluation metrics used to compare memory variants.

pub mod bench;
pub mod generate;
pub mod metrics;
pub mod site;
pub mod templates;

pub use bench::{run_benchmark, BenchmarkConfig, BenchmarkReport, MethodVariant};
pub use generate::{generate_site_pair, SitePair, SynonymTable};
pub use metrics::{measure_grounding, measure_recall, GroundingMode, Memory, MetricsReport};
pub use site::{SimEnv, SimTask, SiteBundle, SiteSpec};
