//! Fair prompt optimization with the scripted meta-proposer on a biased
//! synthetic task: the loop proposes fairness instructions, evaluates each
//! one, and converges toward demographic parity.
//!
//! Run with: `cargo run --example prompt_optimization`

use std::collections::BTreeMap;
use std::sync::Arc;

use fairtab::dataset::{split, SplitPlan};
use fairtab::model::Predictor;
use fairtab::promptopt::{self, OptimizeOptions};
use fairtab::simulator::{synthetic, ScriptedProposer, SimulatorBackend, SyntheticLLMConfig};

fn main() -> fairtab::Result<()> {
    let ctx = synthetic::task_context();
    // Female predictions start heavily suppressed.
    let config = SyntheticLLMConfig {
        group_bias: BTreeMap::from([("female".to_string(), -1.6), ("male".to_string(), 0.0)]),
        ..SyntheticLLMConfig::default()
    };
    let records = synthetic::records(300, 23, &config);
    let splits = split(
        &records,
        &SplitPlan {
            eval_size: 250,
            validation_size: 50,
            seed: 1,
        },
    )?;
    let backend = SimulatorBackend::new(config, Arc::new(ctx.schema.clone()))?;
    let predictor = Predictor::new(Arc::new(backend));

    let history = promptopt::optimize(
        &ctx,
        &predictor,
        &ScriptedProposer::default(),
        &splits.validation,
        &splits.eval,
        &OptimizeOptions {
            iterations: 30,
            rng_seed: 11,
            parallelism: 4,
            max_tokens: 128,
        },
    )?;

    println!("iter  val_acc  dp_eval  instruction");
    for candidate in history.candidates.iter().step_by(3) {
        println!(
            "{:>4}  {:.3}    {:.3}    {}",
            candidate.iteration,
            candidate.validation_accuracy,
            candidate.dp_ratio_eval,
            if candidate.text.is_empty() {
                "[empty prompt]"
            } else {
                &candidate.text
            }
        );
    }

    let summary = promptopt::report(&history, 0.9)?;
    println!("\nPareto front ({} candidates):", summary.pareto.len());
    for point in &summary.pareto {
        println!(
            "  iter {} acc {:.3} dp {:.3}",
            point.tag, point.accuracy, point.dp_ratio
        );
    }
    println!(
        "\noperating point (dp >= 0.9): iter {} acc {:.3} dp {:.3} (constraint met: {})",
        summary.operating_point.point.tag,
        summary.operating_point.point.accuracy,
        summary.operating_point.point.dp_ratio,
        summary.operating_point.constraint_met,
    );
    println!("most fair instruction:  {}", summary.most_fair.text);
    println!(
        "least fair instruction: {}",
        if summary.least_fair.text.is_empty() {
            "[empty prompt]"
        } else {
            &summary.least_fair.text
        }
    );
    Ok(())
}
