//! Desk-scale soft prompt tuning: a hashed-embedding logistic classifier with
//! a 50-row trainable prompt, optimized under cross-entropy plus a
//! demographic-parity penalty with hand-derived analytic gradients.
//!
//! The downstream "model" pools the 50 soft-prompt rows together with the
//! hashed token embeddings by mean, then applies a frozen linear head. Only
//! the soft prompt trains; the embedding table and head stay byte-identical
//! through tuning. Plain gradient descent with a linear warmup keeps runs
//! exactly reproducible.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a64;

/// Number of trainable soft-prompt rows.
pub const SOFT_PROMPT_ROWS: usize = 50;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The tiny differentiable text classifier.
#[derive(Debug, Clone)]
pub struct ToyLM {
    pub vocab_dim: usize,
    pub embed_dim: usize,
    /// Frozen hashed-token embedding table, vocab_dim x embed_dim.
    pub embedding: Array2<f64>,
    /// Trainable prompt, SOFT_PROMPT_ROWS x embed_dim.
    pub soft_prompt: Array2<f64>,
    /// Frozen after head pretraining.
    pub head_weights: Array1<f64>,
    pub head_bias: f64,
}

impl ToyLM {
    pub fn new(vocab_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Wide init keeps pooled features at a workable scale: the mean over
        // 50 prompt rows plus the token rows shrinks entries by ~sqrt(rows).
        let embedding =
            Array2::from_shape_fn((vocab_dim, embed_dim), |_| rng.random_range(-2.0..=2.0));
        Self {
            vocab_dim,
            embed_dim,
            embedding,
            soft_prompt: Array2::zeros((SOFT_PROMPT_ROWS, embed_dim)),
            head_weights: Array1::zeros(embed_dim),
            head_bias: 0.0,
        }
    }

    fn token_row(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.vocab_dim as u64) as usize
    }

    /// Initialize the soft prompt from instruction-token embeddings, cycling
    /// the tokens to fill all 50 rows (zeros when the text has no tokens).
    pub fn init_soft_prompt_from_text(&mut self, instructions: &str) {
        let tokens: Vec<&str> = instructions.split_whitespace().collect();
        if tokens.is_empty() {
            self.soft_prompt = Array2::zeros((SOFT_PROMPT_ROWS, self.embed_dim));
            return;
        }
        for row in 0..SOFT_PROMPT_ROWS {
            let source = self.token_row(tokens[row % tokens.len()]);
            self.soft_prompt
                .row_mut(row)
                .assign(&self.embedding.row(source));
        }
    }

    /// Mean of the soft-prompt rows and hashed token embedding rows.
    fn pooled(&self, tokens: &[String]) -> Array1<f64> {
        let mut sum = self.soft_prompt.sum_axis(ndarray::Axis(0));
        for token in tokens {
            sum += &self.embedding.row(self.token_row(token));
        }
        sum / (SOFT_PROMPT_ROWS + tokens.len()) as f64
    }

    fn logit(&self, tokens: &[String]) -> f64 {
        self.head_weights.dot(&self.pooled(tokens)) + self.head_bias
    }
}

/// Positive probability for one token sequence.
pub fn forward(model: &ToyLM, tokens: &[String]) -> f64 {
    sigmoid(model.logit(tokens))
}

/// One pool/validation/eval sample: serialized-record tokens, group, and a
/// (pseudo-)label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneSample {
    pub tokens: Vec<String>,
    pub group: String,
    pub label: u8,
}

/// Absolute difference between group mean probabilities within a batch.
/// A single-group batch contributes zero with a logged warning.
pub fn dp_penalty(probs: &[f64], groups: &[&str]) -> f64 {
    debug_assert_eq!(probs.len(), groups.len());
    let names: std::collections::BTreeSet<&str> = groups.iter().copied().collect();
    if names.len() < 2 {
        log::warn!("dp_penalty on a single-group batch; returning 0");
        return 0.0;
    }
    let mut iter = names.into_iter();
    let (g0, g1) = (iter.next().unwrap(), iter.next().unwrap());
    let mean = |g: &str| {
        let values: Vec<f64> = probs
            .iter()
            .zip(groups)
            .filter(|(_, group)| **group == g)
            .map(|(p, _)| *p)
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    };
    (mean(g0) - mean(g1)).abs()
}

/// Loss `mean CE + lambda * dp_penalty` and its analytic gradient with
/// respect to the soft prompt.
///
/// Mean pooling makes every soft-prompt row receive an identical gradient:
/// for sample i with T_i tokens, d logit_i / d S_row = w / (50 + T_i), so the
/// gradient is a common coefficient times the head weights, broadcast to all
/// 50 rows. The penalty's absolute value uses subgradient 0 at the tie.
pub fn loss(model: &ToyLM, batch: &[TuneSample], lambda: f64) -> Result<(f64, Array2<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss over empty batch".to_string()));
    }
    let n = batch.len() as f64;
    let probs: Vec<f64> = batch.iter().map(|s| forward(model, &s.tokens)).collect();
    let scales: Vec<f64> = batch
        .iter()
        .map(|s| 1.0 / (SOFT_PROMPT_ROWS + s.tokens.len()) as f64)
        .collect();
    let groups: Vec<&str> = batch.iter().map(|s| s.group.as_str()).collect();

    let eps = 1e-12;
    let ce = probs
        .iter()
        .zip(batch)
        .map(|(p, s)| {
            let p = p.clamp(eps, 1.0 - eps);
            if s.label == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n;
    let penalty = dp_penalty(&probs, &groups);
    let value = ce + lambda * penalty;

    // Cross-entropy part of the shared coefficient.
    let mut coefficient = probs
        .iter()
        .zip(batch)
        .zip(&scales)
        .map(|((p, s), a)| (p - f64::from(s.label)) * a)
        .sum::<f64>()
        / n;
    // Penalty part: sign(mu_g0 - mu_g1) with groups in sorted name order.
    let names: std::collections::BTreeSet<&str> = groups.iter().copied().collect();
    if names.len() == 2 && lambda != 0.0 {
        let mut iter = names.into_iter();
        let (g0, g1) = (iter.next().unwrap(), iter.next().unwrap());
        let mean = |g: &str| {
            let values: Vec<f64> = probs
                .iter()
                .zip(&groups)
                .filter(|(_, group)| **group == g)
                .map(|(p, _)| *p)
                .collect();
            values.iter().sum::<f64>() / values.len() as f64
        };
        let diff = mean(g0) - mean(g1);
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign != 0.0 {
            let count = |g: &str| groups.iter().filter(|group| **group == g).count() as f64;
            let (n0, n1) = (count(g0), count(g1));
            let penalty_term: f64 = probs
                .iter()
                .zip(&groups)
                .zip(&scales)
                .map(|((p, group), a)| {
                    let direction = if *group == g0 { 1.0 / n0 } else { -1.0 / n1 };
                    sign * direction * p * (1.0 - p) * a
                })
                .sum();
            coefficient += lambda * penalty_term;
        }
    }
    let row = &model.head_weights * coefficient;
    let mut gradient = Array2::zeros((SOFT_PROMPT_ROWS, model.embed_dim));
    for mut g_row in gradient.rows_mut() {
        g_row.assign(&row);
    }
    Ok((value, gradient))
}

/// Fit the head (weights and bias) on pool pseudo-labels by full-batch
/// gradient descent with the soft prompt held fixed, then freeze it.
///
/// The fit runs on standardized pooled features (mean pooling leaves raw
/// entries far smaller than the implicit bias feature) and the
/// standardization is folded back into the stored weights, so `forward`
/// stays a plain dot product.
pub fn pretrain_head(
    model: &mut ToyLM,
    pool: &[TuneSample],
    iterations: usize,
    learning_rate: f64,
    l2: f64,
) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("pretrain pool is empty".to_string()));
    }
    let pooled: Vec<Array1<f64>> = pool.iter().map(|s| model.pooled(&s.tokens)).collect();
    let n = pool.len() as f64;
    let mut mean = Array1::<f64>::zeros(model.embed_dim);
    for h in &pooled {
        mean += h;
    }
    mean /= n;
    let mut std = Array1::<f64>::zeros(model.embed_dim);
    for h in &pooled {
        std += &(h - &mean).mapv(|v| v * v);
    }
    std = (std / n)
        .mapv(f64::sqrt)
        .mapv(|s| if s < 1e-9 { 1.0 } else { s });
    let standardized: Vec<Array1<f64>> = pooled.iter().map(|h| (h - &mean) / &std).collect();

    let mut weights = Array1::<f64>::zeros(model.embed_dim);
    let mut bias = 0.0f64;
    for _ in 0..iterations {
        let mut grad_w = Array1::<f64>::zeros(model.embed_dim);
        let mut grad_b = 0.0;
        for (z, sample) in standardized.iter().zip(pool) {
            let p = sigmoid(weights.dot(z) + bias);
            let residual = p - f64::from(sample.label);
            grad_w += &(z * residual);
            grad_b += residual;
        }
        grad_w = grad_w / n + &(&weights * l2);
        grad_b /= n;
        weights -= &(&grad_w * learning_rate);
        bias -= learning_rate * grad_b;
    }
    model.head_weights = &weights / &std;
    model.head_bias = bias - (&weights * &mean / &std).sum();
    Ok(())
}

/// Tuning hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub penalty_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 50,
            learning_rate: 0.05,
            warmup_epochs: 3,
            penalty_weight: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(
                "warmup_epochs must be smaller than epochs".to_string(),
            ));
        }
        if self.penalty_weight < 0.0 {
            return Err(Error::Config("penalty_weight must be >= 0".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub cross_entropy: f64,
    pub dp_penalty: f64,
    /// Mean absolute selection-rate gap of thresholded predictions across the
    /// epoch's two-group batches.
    pub batch_dp_gap: f64,
    pub validation_accuracy: Option<f64>,
    pub dp_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
    /// Soft-prompt state after each epoch, for Pareto selection over epochs.
    pub prompt_snapshots: Vec<Array2<f64>>,
}

fn split_accuracy(model: &ToyLM, samples: &[TuneSample]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let correct = samples
        .iter()
        .filter(|s| u8::from(forward(model, &s.tokens) >= 0.5) == s.label)
        .count();
    Some(correct as f64 / samples.len() as f64)
}

fn split_dp(model: &ToyLM, samples: &[TuneSample], declared: (&str, &str)) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let rates = crate::metrics::selection_rates(
        samples
            .iter()
            .map(|s| (u8::from(forward(model, &s.tokens) >= 0.5), s.group.as_str())),
        declared,
    )
    .ok()?;
    crate::metrics::dp_ratio(&rates).ok()
}

/// Agreement between model predictions and the pool's pseudo-labels.
pub fn pool_agreement(model: &ToyLM, pool: &[TuneSample]) -> f64 {
    split_accuracy(model, pool).unwrap_or(0.0)
}

/// Gradient-descent prompt tuning with class-balanced batches and a linear
/// learning-rate warmup. Only the soft prompt changes; per-epoch statistics
/// are recorded before each batch update.
pub fn tune(
    model: &mut ToyLM,
    pool: &[TuneSample],
    validation: &[TuneSample],
    eval: &[TuneSample],
    config: &TrainConfig,
) -> Result<TrainTrace> {
    config.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyInput("tuning pool is empty".to_string()));
    }
    let declared: Vec<String> = {
        let names: std::collections::BTreeSet<&str> =
            pool.iter().map(|s| s.group.as_str()).collect();
        names.into_iter().map(str::to_string).collect()
    };
    let positives: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == 1).collect();
    let negatives: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == 0).collect();
    let balanced = !positives.is_empty() && !negatives.is_empty();
    if !balanced {
        log::warn!("pool is missing a pseudo-label class; falling back to plain shuffling");
    }
    let n_batches = pool.len().div_ceil(config.batch_size);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut snapshots = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64 + 1));
        let batches: Vec<Vec<usize>> = if balanced {
            let mut pos = positives.clone();
            let mut neg = negatives.clone();
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let half = (config.batch_size / 2).max(1);
            (0..n_batches)
                .map(|b| {
                    let mut batch = Vec::with_capacity(2 * half);
                    for j in 0..half {
                        batch.push(pos[(b * half + j) % pos.len()]);
                        batch.push(neg[(b * half + j) % neg.len()]);
                    }
                    batch
                })
                .collect()
        } else {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            order
                .chunks(config.batch_size)
                .map(<[usize]>::to_vec)
                .collect()
        };
        let lr = if epoch < config.warmup_epochs {
            config.learning_rate * (epoch + 1) as f64 / config.warmup_epochs as f64
        } else {
            config.learning_rate
        };
        let mut epoch_ce = 0.0;
        let mut epoch_penalty = 0.0;
        let mut gap_sum = 0.0;
        let mut gap_batches = 0usize;
        for batch_indices in &batches {
            let batch: Vec<TuneSample> = batch_indices.iter().map(|&i| pool[i].clone()).collect();
            let probs: Vec<f64> = batch.iter().map(|s| forward(model, &s.tokens)).collect();
            let groups: Vec<&str> = batch.iter().map(|s| s.group.as_str()).collect();
            epoch_penalty += dp_penalty(&probs, &groups);
            if let Some(gap) = hard_rate_gap(&probs, &groups) {
                gap_sum += gap;
                gap_batches += 1;
            }
            let (value, gradient) = loss(model, &batch, config.penalty_weight)?;
            epoch_ce += value - config.penalty_weight * dp_penalty(&probs, &groups);
            model.soft_prompt -= &(&gradient * lr);
        }
        let batches_f = batches.len() as f64;
        trace.push(EpochStats {
            cross_entropy: epoch_ce / batches_f,
            dp_penalty: epoch_penalty / batches_f,
            batch_dp_gap: if gap_batches > 0 {
                gap_sum / gap_batches as f64
            } else {
                0.0
            },
            validation_accuracy: split_accuracy(model, validation),
            dp_ratio: if declared.len() == 2 {
                split_dp(model, eval, (&declared[0], &declared[1]))
            } else {
                None
            },
        });
        snapshots.push(model.soft_prompt.clone());
    }
    Ok(TrainTrace {
        epochs: trace,
        prompt_snapshots: snapshots,
    })
}

/// Absolute selection-rate gap of thresholded predictions; `None` when the
/// batch has fewer than two groups.
fn hard_rate_gap(probs: &[f64], groups: &[&str]) -> Option<f64> {
    let names: std::collections::BTreeSet<&str> = groups.iter().copied().collect();
    if names.len() != 2 {
        return None;
    }
    let rate = |g: &str| {
        let members: Vec<bool> = probs
            .iter()
            .zip(groups)
            .filter(|(_, group)| **group == g)
            .map(|(p, _)| *p >= 0.5)
            .collect();
        members.iter().filter(|&&b| b).count() as f64 / members.len() as f64
    };
    let mut iter = names.into_iter();
    let (g0, g1) = (iter.next().unwrap(), iter.next().unwrap());
    Some((rate(g0) - rate(g1)).abs())
}

/// Write the per-epoch trace as CSV (epoch, ce, penalty, gap, val_acc,
/// dp_ratio).
pub fn write_trace_csv(path: impl AsRef<std::path::Path>, trace: &TrainTrace) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["epoch", "ce", "penalty", "gap", "val_acc", "dp_ratio"])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (epoch, stats) in trace.epochs.iter().enumerate() {
        writer.write_record([
            epoch.to_string(),
            stats.cross_entropy.to_string(),
            stats.dp_penalty.to_string(),
            stats.batch_dp_gap.to_string(),
            fmt(stats.validation_accuracy),
            fmt(stats.dp_ratio),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Header of a persisted soft prompt.
#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SoftPromptHeader {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// Persist the tuned prompt: one JSON header line followed by the row-major
/// little-endian f64 array.
pub fn save_soft_prompt(
    path: impl AsRef<std::path::Path>,
    model: &ToyLM,
    header: &SoftPromptHeader,
) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path.as_ref())?;
    writeln!(file, "{}", serde_json::to_string(header)?)?;
    for value in model.soft_prompt.iter() {
        file.write_all(&value.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_soft_prompt(
    path: impl AsRef<std::path::Path>,
) -> Result<(SoftPromptHeader, Array2<f64>)> {
    let bytes = std::fs::read(path.as_ref())?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Config("soft prompt file has no header line".to_string()))?;
    let header: SoftPromptHeader = serde_json::from_slice(&bytes[..newline])?;
    let body = &bytes[newline + 1..];
    let expected = header.rows * header.cols * 8;
    if body.len() != expected {
        return Err(Error::Config(format!(
            "soft prompt body has {} bytes, expected {expected}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
        .collect();
    let array = Array2::from_shape_vec((header.rows, header.cols), values)
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok((header, array))
}

/// Deterministic biased fixture pool: the male pseudo-positive rate is 0.70
/// against 0.30 for females, and a third of the male samples carry an
/// ambiguous signal that lands near the decision boundary after head
/// pretraining. Female samples carry doubled signal tokens, so their
/// predictions saturate and a parity penalty has near-boundary male samples
/// to move. Used by tests and the soft-prompt example.
pub fn synthetic_biased_pool(seed: u64) -> Vec<TuneSample> {
    let mut samples = Vec::with_capacity(200);
    let mut push = |group: &str, signal: &str, extra: &str, label: u8, i: usize| {
        samples.push(TuneSample {
            tokens: vec![
                format!("sex: {group}"),
                format!("signal: {signal}"),
                format!("extra: {extra}"),
                format!("idx: {}", i % 7),
            ],
            group: group.to_string(),
            label,
        });
    };
    for i in 0..100 {
        // Males: 40 strong positives, 30 ambiguous positives, 15 ambiguous
        // negatives, 15 strong negatives.
        let (signal, label) = match i {
            0..=39 => ("strong_pos", 1),
            40..=69 => ("ambiguous", 1),
            70..=84 => ("ambiguous", 0),
            _ => ("strong_neg", 0),
        };
        push("male", signal, "none", label, i);
    }
    for i in 0..100 {
        // Females: 30 positives, 70 negatives, all doubly signaled.
        let (signal, extra, label) = if i < 30 {
            ("strong_pos", "strong_pos_b", 1)
        } else {
            ("strong_neg", "strong_neg_b", 0)
        };
        push("female", signal, extra, label, i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    samples
}
