//! The classical baseline: a logistic scorer fit on 50 labeled examples,
//! with per-group decision thresholds grid-searched against a demographic
//! parity floor, evaluated with the same metrics as the LLM methods.
//!
//! Run with: `cargo run --example threshold_baseline`

use fairtab::baseline::{evaluate_policy, fit_logistic, grid_search_thresholds, FitOptions};
use fairtab::dataset::{split, SplitPlan};
use fairtab::simulator::{synthetic, SyntheticLLMConfig};

fn main() -> fairtab::Result<()> {
    let schema = synthetic::schema();
    let records = synthetic::records(400, 31, &SyntheticLLMConfig::default());
    let splits = split(
        &records,
        &SplitPlan {
            eval_size: 300,
            validation_size: 50,
            seed: 2,
        },
    )?;

    let scorer = fit_logistic(&splits.validation, &schema, &FitOptions::default())?;
    for dp_target in [0.0, 0.8, 0.95] {
        let policy =
            grid_search_thresholds(&scorer, &splits.validation, dp_target, ("female", "male"))?;
        let report = evaluate_policy(&scorer, &policy, &splits.eval, ("female", "male"))?;
        println!(
            "dp_target {dp_target:>4}: thresholds female={:.3} male={:.3} -> eval acc {:.3}, dp {:.3}",
            policy.threshold_by_group["female"],
            policy.threshold_by_group["male"],
            report.accuracy.unwrap_or(f64::NAN),
            report.dp_ratio,
        );
    }
    Ok(())
}
