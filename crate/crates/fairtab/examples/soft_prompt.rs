//! Soft prompt tuning on the toy differentiable model: cross-entropy against
//! pseudo-labels plus a weighted demographic-parity penalty, gradient steps
//! on the 50-row prompt only.
//!
//! Run with: `cargo run --example soft_prompt`

use fairtab::softprompt::{
    pool_agreement, pretrain_head, synthetic_biased_pool, tune, ToyLM, TrainConfig,
};

fn main() -> fairtab::Result<()> {
    let pool = synthetic_biased_pool(5);
    let mut model = ToyLM::new(128, 8, 7);
    model.init_soft_prompt_from_text("predict the outcome fairly for every profile");
    pretrain_head(&mut model, &pool, 800, 1.0, 0.03)?;
    println!(
        "pretrained head: pseudo-label agreement {:.3}",
        pool_agreement(&model, &pool)
    );

    let config = TrainConfig {
        penalty_weight: 0.5,
        batch_size: 100,
        seed: 3,
        ..TrainConfig::default()
    };
    let trace = tune(&mut model, &pool, &pool[..50], &pool[50..], &config)?;

    println!("\nepoch  ce      penalty  gap     val_acc  dp_ratio");
    for (epoch, stats) in trace.epochs.iter().enumerate() {
        println!(
            "{epoch:>5}  {:.4}  {:.4}   {:.4}  {:.3}    {:.3}",
            stats.cross_entropy,
            stats.dp_penalty,
            stats.batch_dp_gap,
            stats.validation_accuracy.unwrap_or(f64::NAN),
            stats.dp_ratio.unwrap_or(f64::NAN),
        );
    }
    let first = trace.epochs.first().unwrap().batch_dp_gap;
    let last = trace.epochs.last().unwrap().batch_dp_gap;
    println!(
        "\nbatch DP gap {first:.4} -> {last:.4} ({:.0}% reduction), agreement {:.3}",
        (1.0 - last / first) * 100.0,
        pool_agreement(&model, &pool)
    );
    Ok(())
}
