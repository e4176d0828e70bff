//! End-to-end comparison: run several methods through the experiment
//! orchestrator on one synthetic dataset and merge their results into the
//! markdown table the CLI's `summarize` verb produces.
//!
//! Run with: `cargo run --example method_comparison`

use std::collections::BTreeMap;
use std::path::PathBuf;

use fairtab::dataset::SplitPlan;
use fairtab::experiments::{run, summarize, BackendSpec, ExperimentConfig, Method, MethodParams};
use fairtab::simulator::{synthetic, SyntheticLLMConfig};

fn main() -> fairtab::Result<()> {
    let work_dir = std::env::temp_dir().join(format!("fairtab_demo_{}", std::process::id()));
    let llm = SyntheticLLMConfig {
        group_bias: BTreeMap::from([("male".to_string(), 0.8), ("female".to_string(), -0.8)]),
        ..SyntheticLLMConfig::default()
    };
    let (schema, template, data) =
        synthetic::write_bundle(&work_dir.join("bundle"), 300, 41, &llm)?;

    let mut result_dirs: Vec<PathBuf> = Vec::new();
    for method in [
        Method::Default,
        Method::ManualPrompts,
        Method::PromptOpt,
        Method::FewshotGrid,
        Method::Softprompt,
        Method::SelfRefine,
        Method::Baseline,
    ] {
        let out_dir = work_dir.join(format!("run_{}", method.name()));
        let config = ExperimentConfig {
            schema: schema.clone(),
            template: template.clone(),
            data: data.clone(),
            backend: BackendSpec::Simulator {
                config: llm.clone(),
            },
            method,
            split: SplitPlan {
                eval_size: 200,
                validation_size: 50,
                seed: 9,
            },
            params: MethodParams {
                iterations: 25,
                k: 8,
                parallelism: 4,
                epochs: 10,
                target_gap: 0.05,
                ..MethodParams::default()
            },
            seeds: vec![0],
            out_dir: out_dir.clone(),
            cache_path: None,
        };
        let record = run(&config)?;
        println!(
            "{:<15} {:>6} backend calls, {:>5} cache hits, {} ms",
            method.name(),
            record.backend_calls,
            record.cache_hits,
            record.wall_ms
        );
        result_dirs.push(out_dir);
    }

    println!("\n{}", summarize(&result_dirs)?);
    println!("run artifacts kept under {}", work_dir.display());
    Ok(())
}
