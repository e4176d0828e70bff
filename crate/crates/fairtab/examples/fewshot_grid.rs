//! The fair few-shot ratio grid: nearest-neighbor examples that share the
//! test record's group, pseudo-labeled by the model itself, swept over all
//! 36 positive-fraction pairs. Increasing p_f raises the female selection
//! rate toward parity.
//!
//! Run with: `cargo run --example fewshot_grid`

use std::collections::BTreeMap;
use std::sync::Arc;

use fairtab::dataset::{split, SplitPlan};
use fairtab::fewshot::{run_grid, GridOptions, PseudoLabeledPool, SelectionStrategy};
use fairtab::model::Predictor;
use fairtab::simulator::{synthetic, SimulatorBackend, SyntheticLLMConfig};

fn main() -> fairtab::Result<()> {
    let ctx = synthetic::task_context();
    let config = SyntheticLLMConfig {
        fewshot_sensitivity: 2.0,
        group_bias: BTreeMap::from([("male".to_string(), 0.8), ("female".to_string(), -0.8)]),
        ..SyntheticLLMConfig::default()
    };
    let records = synthetic::records(400, 505, &config);
    let splits = split(
        &records,
        &SplitPlan {
            eval_size: 300,
            validation_size: 50,
            seed: 5,
        },
    )?;
    let backend = SimulatorBackend::new(config, Arc::new(ctx.schema.clone()))?;
    let predictor = Predictor::new(Arc::new(backend));

    let pool = PseudoLabeledPool::build(&splits.pool, &ctx, &predictor, 4)?;
    println!(
        "pool: {} pseudo-labeled records from backend '{}'",
        pool.entries.len(),
        pool.provenance
    );

    let outcome = run_grid(
        &splits.eval,
        &pool,
        &ctx,
        &predictor,
        &[0],
        &GridOptions {
            k: 10,
            strategy: SelectionStrategy::NearestNeighbor,
            parallelism: 4,
        },
    )?;

    println!("\np_f   p_m   acc    dp     rate_f  rate_m");
    for row in &outcome.rows {
        println!(
            "{:<4}  {:<4}  {:.3}  {:.3}  {:.3}   {:.3}",
            row.pair.p_f,
            row.pair.p_m,
            row.report.accuracy.unwrap_or(f64::NAN),
            row.report.dp_ratio,
            row.report.rates.rate("female").unwrap_or(f64::NAN),
            row.report.rates.rate("male").unwrap_or(f64::NAN),
        );
    }

    let best = outcome
        .cells
        .iter()
        .filter(|cell| cell.mean_dp >= 0.9)
        .max_by(|a, b| a.mean_accuracy.partial_cmp(&b.mean_accuracy).unwrap());
    match best {
        Some(cell) => println!(
            "\nbest pair with dp >= 0.9: p_f={} p_m={} (acc {:.3}, dp {:.3})",
            cell.pair.p_f,
            cell.pair.p_m,
            cell.mean_accuracy.unwrap_or(f64::NAN),
            cell.mean_dp
        ),
        None => println!("\nno ratio pair reached dp >= 0.9"),
    }
    Ok(())
}
