use hmt_core::inference::AgentSettings;
use hmt_sim::bench::{grounding_study, run_benchmark, BenchError, BenchmarkConfig};

fn small(variants: &[&str]) -> BenchmarkConfig {
    BenchmarkConfig {
        templates: vec!["flight".into(), "shop".into()],
        variants: variants.iter().map(|v| v.to_string()).collect(),
        ..BenchmarkConfig::default()
    }
}

#[test]
fn hierarchical_memory_outperforms_flat_on_the_default_suite() {
    let r = run_benchmark(&small(&["full", "flat", "raw-id"]), &AgentSettings::default()).unwrap();
    let (full, flat, raw) = (&r.variants["full"], &r.variants["flat"], &r.variants["raw-id"]);
    assert!(full.cross_website.recall_at_k > flat.cross_website.recall_at_k, "{}", r.table());
    assert!(full.cross_website.avg_context_tokens < flat.cross_website.avg_context_tokens);
    assert!(full.cross_website.step_sr >= flat.cross_website.step_sr);
    assert_eq!(raw.cross_website.grounding_success, 0.0);
    assert!(full.cross_website.grounding_success > 0.9);
    // Same-site tasks keep raw ids valid.
    assert!(raw.cross_task.grounding_success > 0.9);
    assert_eq!(r.build.failures, 0);
}

#[test]
fn reports_are_reproducible_and_seed_sensitive() {
    let cfg = small(&["full"]);
    let a = run_benchmark(&cfg, &AgentSettings::default()).unwrap();
    let b = run_benchmark(&cfg, &AgentSettings::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let other = run_benchmark(&BenchmarkConfig { seed: 8, ..cfg }, &AgentSettings::default()).unwrap();
    assert_ne!(a.to_json(), other.to_json());
}

#[test]
fn unknown_variant_lists_the_valid_names() {
    let err = run_benchmark(&small(&["full", "bogus"]), &AgentSettings::default()).unwrap_err();
    let BenchError::UnknownVariant { name, valid } = err else { panic!("wrong error") };
    assert_eq!(name, "bogus");
    assert!(valid.contains("no-fallback"));
}

#[test]
fn raw_ids_never_transfer_across_sites() {
    let g = grounding_study(3, 6, &AgentSettings::default());
    assert_eq!(g.pairs.len(), 6);
    assert!(g.pairs.iter().all(|p| p.raw_id == 0.0 && p.descriptor > 0.5), "{g:?}");
}
