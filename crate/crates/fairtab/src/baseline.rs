//! Fairness-constrained classical baseline: a deterministic logistic model
//! over one-hot/binned features, with per-group decision thresholds chosen by
//! exhaustive grid search against a demographic-parity floor.
//!
//! This fills the role of a gradient-boosted-trees + reduction-grid baseline
//! at desk scale: a fixed-iteration convex fit on the small labeled split,
//! then a 41x41 threshold grid (step 0.025 per group) searched for the most
//! accurate policy meeting the parity target, evaluated with the same metrics
//! as every other method.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{bin_continuous, DatasetSchema, FeatureKind, FieldValue, Record};
use crate::error::{Error, Result};
use crate::metrics::{dp_ratio, selection_rates, EvalReport, EvalSample};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic logistic scorer over one-hot (feature, token) indicators.
#[derive(Debug, Clone)]
pub struct LogisticScorer {
    binned_schema: DatasetSchema,
    vocabulary: Vec<(String, String)>,
    weights: Vec<f64>,
    bias: f64,
}

/// Training hyperparameters for the convex fit; fixed iteration count keeps
/// the result exactly reproducible.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

fn record_tokens(record: &Record, schema: &DatasetSchema) -> Result<Vec<(String, String)>> {
    schema
        .features
        .iter()
        .map(|feature| {
            let value = record.value(&feature.name).ok_or_else(|| {
                Error::Schema(format!("record is missing feature '{}'", feature.name))
            })?;
            let token = match (feature.kind, value) {
                (FeatureKind::Categorical, FieldValue::Categorical { code, .. }) => code.clone(),
                (FeatureKind::Integer, FieldValue::Integer(v)) => v.to_string(),
                (FeatureKind::Continuous, FieldValue::Bin(b)) => format!("bin{b}"),
                (_, other) => other.raw_text(),
            };
            Ok((feature.name.clone(), token))
        })
        .collect()
}

impl LogisticScorer {
    /// Positive-class score in (0, 1). Tokens unseen in training contribute
    /// nothing.
    pub fn score(&self, record: &Record) -> Result<f64> {
        let binned = bin_continuous(record, &self.binned_schema)?;
        let tokens = record_tokens(&binned, &self.binned_schema)?;
        let mut logit = self.bias;
        for token in &tokens {
            if let Ok(idx) = self.vocabulary.binary_search(token) {
                logit += self.weights[idx];
            }
        }
        Ok(sigmoid(logit))
    }
}

/// Fit the logistic scorer on a small labeled split by full-batch gradient
/// descent with a fixed iteration budget. Both labels must be present.
pub fn fit_logistic(
    train: &[Record],
    schema: &DatasetSchema,
    options: &FitOptions,
) -> Result<LogisticScorer> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training split is empty".to_string()));
    }
    let labels: Vec<u8> = train
        .iter()
        .map(|r| {
            r.label()
                .ok_or_else(|| Error::Schema("training record lacks a label".to_string()))
        })
        .collect::<Result<_>>()?;
    if labels.iter().all(|&l| l == 1) || labels.iter().all(|&l| l == 0) {
        return Err(Error::Config(
            "training split has a single class".to_string(),
        ));
    }
    let binned_schema = schema.with_quantile_bins(train, 5)?;
    let token_rows: Vec<Vec<(String, String)>> = train
        .iter()
        .map(|record| record_tokens(&bin_continuous(record, &binned_schema)?, &binned_schema))
        .collect::<Result<_>>()?;
    let mut vocabulary: Vec<(String, String)> = token_rows.iter().flatten().cloned().collect();
    vocabulary.sort();
    vocabulary.dedup();
    let indexed: Vec<Vec<usize>> = token_rows
        .iter()
        .map(|tokens| {
            tokens
                .iter()
                .map(|t| vocabulary.binary_search(t).expect("token from vocabulary"))
                .collect()
        })
        .collect();

    let n = train.len() as f64;
    let mut weights = vec![0.0f64; vocabulary.len()];
    let mut bias = 0.0f64;
    for _ in 0..options.iterations {
        let mut grad_w = vec![0.0f64; weights.len()];
        let mut grad_b = 0.0f64;
        for (row, &label) in indexed.iter().zip(&labels) {
            let logit: f64 = bias + row.iter().map(|&i| weights[i]).sum::<f64>();
            let residual = sigmoid(logit) - f64::from(label);
            for &i in row {
                grad_w[i] += residual;
            }
            grad_b += residual;
        }
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= options.learning_rate * (g / n + options.l2 * *w);
        }
        bias -= options.learning_rate * grad_b / n;
    }
    Ok(LogisticScorer {
        binned_schema,
        vocabulary,
        weights,
        bias,
    })
}

/// Per-group decision cutoffs: positive iff score >= threshold(group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub threshold_by_group: BTreeMap<String, f64>,
}

impl ThresholdPolicy {
    pub fn predict(&self, group: &str, score: f64) -> u8 {
        let threshold = self.threshold_by_group.get(group).copied().unwrap_or(0.5);
        u8::from(score >= threshold)
    }
}

pub const GRID_STEPS: usize = 41;

fn grid_levels() -> Vec<f64> {
    (0..GRID_STEPS).map(|i| i as f64 / 40.0).collect()
}

/// Exhaustive 41x41 per-group threshold search on the validation split:
/// among policies whose validation DP ratio reaches `dp_target`, the most
/// accurate wins (ties: higher DP, then lower thresholds); when no cell
/// qualifies, the max-DP policy is returned.
pub fn grid_search_thresholds(
    scorer: &LogisticScorer,
    validation: &[Record],
    dp_target: f64,
    declared: (&str, &str),
) -> Result<ThresholdPolicy> {
    if validation.is_empty() {
        return Err(Error::EmptyInput("validation split is empty".to_string()));
    }
    let scored: Vec<(f64, &str, Option<u8>)> = validation
        .iter()
        .map(|record| Ok((scorer.score(record)?, record.group(), record.label())))
        .collect::<Result<_>>()?;
    if !scored.iter().any(|(_, g, _)| *g == declared.0)
        || !scored.iter().any(|(_, g, _)| *g == declared.1)
    {
        return Err(Error::Config(
            "validation split must contain both groups".to_string(),
        ));
    }
    let levels = grid_levels();
    let mut best: Option<(f64, f64, (f64, f64))> = None; // (acc, dp, thresholds)
    let mut best_feasible = false;
    for &t_a in &levels {
        for &t_b in &levels {
            let predictions: Vec<u8> = scored
                .iter()
                .map(|(score, group, _)| {
                    let threshold = if *group == declared.0 { t_a } else { t_b };
                    u8::from(*score >= threshold)
                })
                .collect();
            let rates = selection_rates(
                predictions
                    .iter()
                    .zip(&scored)
                    .map(|(p, (_, g, _))| (*p, *g)),
                declared,
            )?;
            let dp = dp_ratio(&rates)?;
            let correct = predictions
                .iter()
                .zip(&scored)
                .filter(|(p, (_, _, label))| Some(**p) == *label)
                .count();
            let accuracy = correct as f64 / scored.len() as f64;
            let feasible = dp >= dp_target;
            let candidate = (accuracy, dp, (t_a, t_b));
            let better = match &best {
                None => true,
                Some((b_acc, b_dp, b_t)) => {
                    if feasible != best_feasible {
                        feasible
                    } else if feasible {
                        accuracy > *b_acc
                            || (accuracy == *b_acc
                                && (dp > *b_dp || (dp == *b_dp && candidate.2 < *b_t)))
                    } else {
                        dp > *b_dp
                            || (dp == *b_dp
                                && (accuracy > *b_acc
                                    || (accuracy == *b_acc && candidate.2 < *b_t)))
                    }
                }
            };
            if better {
                best = Some(candidate);
                best_feasible = feasible;
            }
        }
    }
    let (_, _, (t_a, t_b)) = best.expect("grid is nonempty");
    Ok(ThresholdPolicy {
        threshold_by_group: BTreeMap::from([
            (declared.0.to_string(), t_a),
            (declared.1.to_string(), t_b),
        ]),
    })
}

/// Evaluate a fitted scorer plus threshold policy on labeled records, using
/// the same report as the LLM methods.
pub fn evaluate_policy(
    scorer: &LogisticScorer,
    policy: &ThresholdPolicy,
    records: &[Record],
    declared: (&str, &str),
) -> Result<EvalReport> {
    let samples: Vec<EvalSample> = records
        .iter()
        .map(|record| {
            let score = scorer.score(record)?;
            Ok(EvalSample {
                prediction: Some(policy.predict(record.group(), score)),
                group: record.group().to_string(),
                label: record.label(),
            })
        })
        .collect::<Result<_>>()?;
    EvalReport::compute(&samples, declared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{synthetic, SyntheticLLMConfig};

    fn labeled_records(n: usize, seed: u64) -> (DatasetSchema, Vec<Record>) {
        let schema = synthetic::schema();
        let records = synthetic::records(n, seed, &SyntheticLLMConfig::default());
        (schema, records)
    }

    #[test]
    fn separable_data_fits_perfectly() {
        // Labels follow a single feature: linearly separable one-hots.
        let (schema, records) = labeled_records(60, 1);
        let train: Vec<Record> = records
            .iter()
            .map(|r| {
                let positive = matches!(
                    r.value("color"),
                    Some(FieldValue::Categorical { code, .. }) if code == "red" || code == "blue"
                );
                r.with_label(Some(u8::from(positive)))
            })
            .collect();
        let scorer = fit_logistic(&train, &schema, &FitOptions::default()).unwrap();
        let correct = train
            .iter()
            .filter(|r| u8::from(scorer.score(r).unwrap() >= 0.5) == r.label().unwrap())
            .count();
        assert_eq!(correct, train.len());
    }

    #[test]
    fn fit_is_deterministic() {
        let (schema, records) = labeled_records(50, 2);
        let a = fit_logistic(&records, &schema, &FitOptions::default()).unwrap();
        let b = fit_logistic(&records, &schema, &FitOptions::default()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
        // Duplicating the dataset leaves the mean gradient unchanged.
        let doubled: Vec<Record> = records.iter().chain(records.iter()).cloned().collect();
        let c = fit_logistic(&doubled, &schema, &FitOptions::default()).unwrap();
        for (w_a, w_c) in a.weights.iter().zip(&c.weights) {
            assert!((w_a - w_c).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_training_errors() {
        let (schema, records) = labeled_records(20, 3);
        let all_positive: Vec<Record> = records.iter().map(|r| r.with_label(Some(1))).collect();
        assert!(fit_logistic(&all_positive, &schema, &FitOptions::default()).is_err());
    }

    #[test]
    fn scores_match_independent_gradient_descent() {
        let (schema, records) = labeled_records(40, 4);
        let options = FitOptions {
            iterations: 200,
            learning_rate: 0.3,
            l2: 1e-3,
        };
        let scorer = fit_logistic(&records, &schema, &options).unwrap();

        // Second implementation, written directly against the math.
        let binned_schema = schema.with_quantile_bins(&records, 5).unwrap();
        let rows: Vec<Vec<(String, String)>> = records
            .iter()
            .map(|r| {
                record_tokens(&bin_continuous(r, &binned_schema).unwrap(), &binned_schema).unwrap()
            })
            .collect();
        let mut vocab: Vec<(String, String)> = rows.iter().flatten().cloned().collect();
        vocab.sort();
        vocab.dedup();
        let mut w = vec![0.0f64; vocab.len()];
        let mut b = 0.0f64;
        let n = records.len() as f64;
        for _ in 0..options.iterations {
            let mut gw = vec![0.0f64; w.len()];
            let mut gb = 0.0f64;
            for (row, record) in rows.iter().zip(&records) {
                let z: f64 = b + row
                    .iter()
                    .map(|t| w[vocab.binary_search(t).unwrap()])
                    .sum::<f64>();
                let r = 1.0 / (1.0 + (-z).exp()) - f64::from(record.label().unwrap());
                for t in row {
                    gw[vocab.binary_search(t).unwrap()] += r;
                }
                gb += r;
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= options.learning_rate * (gi / n + options.l2 * *wi);
            }
            b -= options.learning_rate * gb / n;
        }
        for (record, row) in records.iter().zip(&rows) {
            let z: f64 = b + row
                .iter()
                .map(|t| w[vocab.binary_search(t).unwrap()])
                .sum::<f64>();
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((scorer.score(record).unwrap() - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn unbiased_scores_give_parity_at_symmetric_thresholds() {
        let (schema, records) = labeled_records(80, 5);
        let scorer = fit_logistic(&records, &schema, &FitOptions::default()).unwrap();
        let policy = grid_search_thresholds(&scorer, &records, 0.9, ("female", "male")).unwrap();
        let report = evaluate_policy(&scorer, &policy, &records, ("female", "male")).unwrap();
        assert!(report.dp_ratio >= 0.9, "dp {}", report.dp_ratio);
    }

    #[test]
    fn zero_target_reduces_to_accuracy_argmax() {
        let (schema, records) = labeled_records(60, 6);
        let scorer = fit_logistic(&records, &schema, &FitOptions::default()).unwrap();
        let policy = grid_search_thresholds(&scorer, &records, 0.0, ("female", "male")).unwrap();
        let accuracy_of = |p: &ThresholdPolicy| {
            records
                .iter()
                .filter(|r| p.predict(r.group(), scorer.score(r).unwrap()) == r.label().unwrap())
                .count() as f64
                / records.len() as f64
        };
        let chosen = accuracy_of(&policy);
        // No grid cell beats the chosen accuracy.
        for i in 0..GRID_STEPS {
            for j in 0..GRID_STEPS {
                let candidate = ThresholdPolicy {
                    threshold_by_group: BTreeMap::from([
                        ("female".to_string(), i as f64 / 40.0),
                        ("male".to_string(), j as f64 / 40.0),
                    ]),
                };
                assert!(accuracy_of(&candidate) <= chosen + 1e-12);
            }
        }
    }

    #[test]
    fn search_matches_independent_enumeration() {
        let (schema, records) = labeled_records(20, 7);
        let scorer = fit_logistic(&records, &schema, &FitOptions::default()).unwrap();
        let declared = ("female", "male");
        let dp_target = 0.9;
        let policy = grid_search_thresholds(&scorer, &records, dp_target, declared).unwrap();
        // Independent re-enumeration of the same grid.
        let mut best: Option<(f64, f64, (f64, f64))> = None;
        let mut best_feasible = false;
        for i in 0..GRID_STEPS {
            for j in 0..GRID_STEPS {
                let (t_a, t_b) = (i as f64 / 40.0, j as f64 / 40.0);
                let predictions: Vec<u8> = records
                    .iter()
                    .map(|r| {
                        let t = if r.group() == declared.0 { t_a } else { t_b };
                        u8::from(scorer.score(r).unwrap() >= t)
                    })
                    .collect();
                let rates = selection_rates(
                    predictions
                        .iter()
                        .zip(&records)
                        .map(|(p, r)| (*p, r.group())),
                    declared,
                )
                .unwrap();
                let dp = dp_ratio(&rates).unwrap();
                let acc = predictions
                    .iter()
                    .zip(&records)
                    .filter(|(p, r)| Some(**p) == r.label())
                    .count() as f64
                    / records.len() as f64;
                let feasible = dp >= dp_target;
                let replace = match &best {
                    None => true,
                    Some((b_acc, b_dp, b_t)) => {
                        if feasible != best_feasible {
                            feasible
                        } else if feasible {
                            acc > *b_acc
                                || (acc == *b_acc
                                    && (dp > *b_dp || (dp == *b_dp && (t_a, t_b) < *b_t)))
                        } else {
                            dp > *b_dp
                                || (dp == *b_dp
                                    && (acc > *b_acc || (acc == *b_acc && (t_a, t_b) < *b_t)))
                        }
                    }
                };
                if replace {
                    best = Some((acc, dp, (t_a, t_b)));
                    best_feasible = feasible;
                }
            }
        }
        let (_, _, (t_a, t_b)) = best.unwrap();
        assert_eq!(policy.threshold_by_group["female"], t_a);
        assert_eq!(policy.threshold_by_group["male"], t_b);
    }
}
