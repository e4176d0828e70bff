//! Zero-shot predictions on the bundled Adult fixture through the
//! deterministic simulator, reported with accuracy, demographic parity, and
//! equalized odds.
//!
//! Run with: `cargo run --example zero_shot`

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use fairtab::dataset::{load_csv, split, SplitPlan};
use fairtab::metrics::{EvalReport, EvalSample};
use fairtab::model::{ChatRequest, Predictor};
use fairtab::serializer::{build_prediction_prompt, TaskContext};
use fairtab::simulator::{SimulatorBackend, SyntheticLLMConfig};

fn main() -> fairtab::Result<()> {
    let base = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let ctx = TaskContext::load(
        base.join("schemas/adult.json"),
        base.join("templates/adult.txt"),
    )?;
    let records = load_csv(base.join("data/adult.csv"), &ctx.schema)?;
    let splits = split(
        &records,
        &SplitPlan {
            eval_size: 8,
            validation_size: 4,
            seed: 7,
        },
    )?;

    // A simulator that systematically favors the male group.
    let config = SyntheticLLMConfig {
        group_bias: BTreeMap::from([("male".to_string(), 0.8), ("female".to_string(), -0.8)]),
        ..SyntheticLLMConfig::default()
    };
    let backend = SimulatorBackend::new(config, Arc::new(ctx.schema.clone()))?;
    let predictor = Predictor::new(Arc::new(backend));

    // Show the exact prompt sent for the first eval record.
    let bundle = ctx.bundle_for(&splits.eval[0], None, None)?;
    let (user_text, assistant_prefix) = build_prediction_prompt(&bundle);
    println!("--- prompt for the first eval record ---");
    println!("{user_text}");
    println!("[assistant] {assistant_prefix} ...");

    let samples: Vec<EvalSample> = splits
        .eval
        .iter()
        .map(|record| {
            let bundle = ctx.bundle_for(record, None, None)?;
            let outcome = predictor.predict(&ChatRequest::from_bundle(&bundle, 64, 0.0))?;
            Ok(EvalSample {
                prediction: Some(outcome.label),
                group: record.group().to_string(),
                label: record.label(),
            })
        })
        .collect::<fairtab::Result<_>>()?;
    let report = EvalReport::compute(&samples, ("female", "male"))?;
    println!("\n--- zero-shot eval report ---");
    println!("{}", serde_json::to_string_pretty(&report.to_json())?);
    Ok(())
}
