//! Batched self-refinement: predict in batches of 40, then ask the model to
//! flip near-boundary labels whenever the positive-rate gap across groups
//! exceeds the trigger. The simulator implements the reference boundary-flip
//! behavior, so the demonstration runs fully offline.
//!
//! Run with: `cargo run --example self_refinement`

use std::collections::BTreeMap;
use std::sync::Arc;

use fairtab::dataset::Record;
use fairtab::model::Predictor;
use fairtab::selfrefine::{run_batched, RefineOptions};
use fairtab::serializer::serialize_record;
use fairtab::simulator::{parse_record_tokens, synthetic, SimulatorBackend, SyntheticLLMConfig};

fn main() -> fairtab::Result<()> {
    let ctx = synthetic::task_context();
    let base = SyntheticLLMConfig::default();
    let generated = synthetic::records(260, 17, &base);
    // Group biases sit around the empirical center of the feature logits so
    // both selection rates start mid-range.
    let mut logits: Vec<f64> = generated
        .iter()
        .map(|record| {
            let text = serialize_record(record, &ctx.schema)?;
            Ok(base.feature_logit(
                &parse_record_tokens(&text)?,
                &ctx.schema.protected_attribute,
            ))
        })
        .collect::<fairtab::Result<_>>()?;
    logits.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let center = logits[logits.len() / 2];
    let config = SyntheticLLMConfig {
        group_bias: BTreeMap::from([
            ("male".to_string(), -center + 0.5),
            ("female".to_string(), -center - 0.5),
        ]),
        ..base
    };
    // Interleave groups so every batch of 40 holds 20 of each.
    let females = generated.iter().filter(|r| r.group() == "female");
    let males = generated.iter().filter(|r| r.group() == "male");
    let records: Vec<Record> = females
        .zip(males)
        .take(120)
        .flat_map(|(f, m)| [f.clone(), m.clone()])
        .collect();

    let backend = SimulatorBackend::new(config, Arc::new(ctx.schema.clone()))?;
    let predictor = Predictor::new(Arc::new(backend));
    let report = run_batched(
        &records,
        &ctx,
        &predictor,
        &RefineOptions {
            batch_size: 40,
            trigger_gap: 0.15,
            target_gap: 0.05,
            max_tokens: 4096,
            parallelism: 4,
        },
    )?;

    println!(
        "batches: {} total, {} refined, {} rejected",
        report.batches.len(),
        report.refined_batches,
        report.rejected_batches
    );
    println!(
        "\nbefore: {}",
        serde_json::to_string(&report.before.to_json())?
    );
    println!(
        "after:  {}",
        serde_json::to_string(&report.after.to_json())?
    );
    println!(
        "\ndemographic parity {:.3} -> {:.3}, accuracy {:.3} -> {:.3}",
        report.before.dp_ratio,
        report.after.dp_ratio,
        report.before.accuracy.unwrap_or(f64::NAN),
        report.after.accuracy.unwrap_or(f64::NAN),
    );
    Ok(())
}
