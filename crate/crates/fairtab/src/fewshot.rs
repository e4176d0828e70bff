//! Fair few-shot example construction: Jaccard nearest-neighbor retrieval
//! over binned records, group matching, pseudo-label ratio control, and the
//! 6x6 positive-ratio grid.
//!
//! Every selected example shares the test record's protected group, and the
//! positive count always equals round-half-up(p * k): when the pool lacks
//! enough genuine examples of the needed pseudo-label, next-nearest same-group
//! entries fill the remaining slots with their label overridden and flagged.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{bin_continuous, DatasetSchema, Record};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, EvalSample};
use crate::model::{ChatRequest, Predictor};
use crate::serializer::{serialize_record, FewShotExample, TaskContext};

/// Jaccard similarity between two records over (feature, value) tokens.
///
/// Both records should already be binned via
/// [`crate::dataset::bin_continuous`] so continuous features compare by
/// interval. With `m` matching features out of `d`, the token-set Jaccard is
/// `m / (2d - m)`.
pub fn jaccard_similarity(a: &Record, b: &Record, schema: &DatasetSchema) -> Result<f64> {
    let d = schema.features.len();
    if d == 0 {
        return Err(Error::Schema("schema has no features".to_string()));
    }
    let mut matching = 0usize;
    for feature in &schema.features {
        let left = a.value(&feature.name).ok_or_else(|| {
            Error::Schema(format!("record is missing feature '{}'", feature.name))
        })?;
        let right = b.value(&feature.name).ok_or_else(|| {
            Error::Schema(format!("record is missing feature '{}'", feature.name))
        })?;
        if left == right {
            matching += 1;
        }
    }
    Ok(matching as f64 / (2 * d - matching) as f64)
}

/// One pool entry: the original record, its binned form for similarity, and
/// the zero-shot pseudo-label.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub record: Record,
    pub binned: Record,
    pub pseudo_label: u8,
}

/// Candidate pool labeled by the backend's own zero-shot predictions.
#[derive(Debug, Clone)]
pub struct PseudoLabeledPool {
    pub entries: Vec<PoolEntry>,
    /// Backend id that produced the pseudo-labels.
    pub provenance: String,
    /// Schema with quantile bin edges filled in from this pool.
    pub binned_schema: DatasetSchema,
}

impl PseudoLabeledPool {
    /// Pseudo-label `records` with default zero-shot predictions from the
    /// same backend under evaluation. Records whose prediction fails are
    /// dropped with a warning.
    pub fn build(
        records: &[Record],
        ctx: &TaskContext,
        predictor: &Predictor,
        parallelism: usize,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("few-shot pool is empty".to_string()));
        }
        let binned_schema = ctx.schema.with_quantile_bins(records, 5)?;
        let requests: Vec<ChatRequest> = records
            .iter()
            .map(|record| {
                let bundle = ctx.bundle_for(record, None, None)?;
                Ok(ChatRequest::from_bundle(&bundle, 256, 0.0))
            })
            .collect::<Result<_>>()?;
        let outcomes = predictor.batch_predict(&requests, parallelism);
        let mut entries = Vec::with_capacity(records.len());
        let mut dropped = 0usize;
        for (record, outcome) in records.iter().zip(outcomes) {
            match outcome {
                Ok(prediction) => entries.push(PoolEntry {
                    binned: bin_continuous(record, &binned_schema)?,
                    record: record.clone(),
                    pseudo_label: prediction.label,
                }),
                Err(e) => {
                    dropped += 1;
                    log::warn!("pool record dropped (no pseudo-label): {e}");
                }
            }
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} pool records without pseudo-labels");
        }
        if entries.is_empty() {
            return Err(Error::EmptyInput(
                "no pool record obtained a pseudo-label".to_string(),
            ));
        }
        Ok(Self {
            entries,
            provenance: predictor.backend_id().to_string(),
            binned_schema,
        })
    }

    /// Build a pool from externally supplied pseudo-labels (tests, replays).
    pub fn from_labeled(
        records: &[(Record, u8)],
        schema: &DatasetSchema,
        provenance: &str,
    ) -> Result<Self> {
        let plain: Vec<Record> = records.iter().map(|(r, _)| r.clone()).collect();
        let binned_schema = schema.with_quantile_bins(&plain, 5)?;
        let entries = records
            .iter()
            .map(|(record, label)| {
                Ok(PoolEntry {
                    binned: bin_continuous(record, &binned_schema)?,
                    record: record.clone(),
                    pseudo_label: *label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            provenance: provenance.to_string(),
            binned_schema,
        })
    }
}

/// Round-half-up of `p * k`.
pub fn positive_count(p: f64, k: usize) -> usize {
    (((p * k as f64) + 0.5).floor() as usize).min(k)
}

/// One selected example with its provenance.
#[derive(Debug, Clone)]
pub struct SelectedExample {
    pub pool_index: usize,
    pub record: Record,
    pub pseudo_label: u8,
    pub similarity: f64,
    /// True when the slot was filled by overriding a next-nearest example's
    /// pseudo-label to reach the requested ratio.
    pub overridden: bool,
}

/// How example slots are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    /// Descending Jaccard similarity (ties by pool index).
    NearestNeighbor,
    /// Uniform same-group sampling at the same label ratios.
    Random,
}

/// Select `k` same-group examples for `test` with a positive fraction of
/// `p`. Output is ordered by descending similarity (ties by pool index).
pub fn select_examples(
    test: &Record,
    pool: &PseudoLabeledPool,
    k: usize,
    p: f64,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Vec<SelectedExample>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".to_string()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "positive fraction {p} outside [0, 1]"
        )));
    }
    let binned_test = bin_continuous(test, &pool.binned_schema)?;
    let mut same_group: Vec<(usize, f64)> = Vec::new();
    for (i, entry) in pool.entries.iter().enumerate() {
        if entry.record.group() != test.group() {
            continue;
        }
        let similarity = jaccard_similarity(&binned_test, &entry.binned, &pool.binned_schema)?;
        same_group.push((i, similarity));
    }
    if same_group.len() < k {
        return Err(Error::Config(format!(
            "pool has {} same-group entries for group '{}', need {k}",
            same_group.len(),
            test.group()
        )));
    }
    match strategy {
        SelectionStrategy::NearestNeighbor => {
            same_group.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        }
        SelectionStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            same_group.shuffle(&mut rng);
        }
    }

    let n_pos = positive_count(p, k);
    let mut chosen: Vec<SelectedExample> = Vec::with_capacity(k);
    let mut used = vec![false; pool.entries.len()];
    let take_label =
        |need: usize, label: u8, chosen: &mut Vec<SelectedExample>, used: &mut Vec<bool>| {
            let mut taken = 0;
            for &(i, similarity) in same_group.iter() {
                if taken == need {
                    break;
                }
                if used[i] || pool.entries[i].pseudo_label != label {
                    continue;
                }
                used[i] = true;
                taken += 1;
                chosen.push(SelectedExample {
                    pool_index: i,
                    record: pool.entries[i].record.clone(),
                    pseudo_label: label,
                    similarity,
                    overridden: false,
                });
            }
            taken
        };
    let got_pos = take_label(n_pos, 1, &mut chosen, &mut used);
    let got_neg = take_label(k - n_pos, 0, &mut chosen, &mut used);
    // Fill any shortfall with next-nearest same-group entries, overriding
    // their pseudo-label to the needed value.
    let mut shortfalls = Vec::new();
    if got_pos < n_pos {
        shortfalls.push((n_pos - got_pos, 1u8));
    }
    if got_neg < k - n_pos {
        shortfalls.push((k - n_pos - got_neg, 0u8));
    }
    for (need, label) in shortfalls {
        let mut taken = 0;
        for &(i, similarity) in same_group.iter() {
            if taken == need {
                break;
            }
            if used[i] {
                continue;
            }
            used[i] = true;
            taken += 1;
            chosen.push(SelectedExample {
                pool_index: i,
                record: pool.entries[i].record.clone(),
                pseudo_label: label,
                similarity,
                overridden: true,
            });
        }
    }
    debug_assert_eq!(chosen.len(), k);
    chosen.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap()
            .then(a.pool_index.cmp(&b.pool_index))
    });
    Ok(chosen)
}

/// Render selected examples into prompt form.
pub fn to_fewshot_block(
    selected: &[SelectedExample],
    ctx: &TaskContext,
) -> Result<Vec<FewShotExample>> {
    let labels = ctx.answer_labels();
    selected
        .iter()
        .map(|example| {
            Ok(FewShotExample {
                record_text: serialize_record(&example.record, &ctx.schema)?,
                answer_text: labels.text_for(example.pseudo_label).to_string(),
            })
        })
        .collect()
}

/// One positive-ratio pair: `p_f` applies to test records of the
/// alphabetically first protected group, `p_m` to the second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPair {
    pub p_f: f64,
    pub p_m: f64,
}

const RATIO_LEVELS: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];

/// The 36 ratio pairs, in row-major order with `p_f` varying slowest.
pub fn ratio_grid() -> Vec<RatioPair> {
    let mut pairs = Vec::with_capacity(36);
    for &p_f in &RATIO_LEVELS {
        for &p_m in &RATIO_LEVELS {
            pairs.push(RatioPair { p_f, p_m });
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy)]
pub struct GridOptions {
    pub k: usize,
    pub strategy: SelectionStrategy,
    pub parallelism: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            k: 10,
            strategy: SelectionStrategy::NearestNeighbor,
            parallelism: 1,
        }
    }
}

/// Metrics for one (ratio pair, seed) run.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub pair: RatioPair,
    pub seed: u64,
    pub report: EvalReport,
}

/// Per-pair mean and standard deviation across seeds.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub pair: RatioPair,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_dp: f64,
    pub std_dp: f64,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub cells: Vec<GridCell>,
    /// (group receiving p_f, group receiving p_m).
    pub groups: (String, String),
}

/// Evaluate every ratio pair for every seed. Per-record example selection
/// uses the group-appropriate fraction; metrics are reported per seed plus
/// mean and standard deviation across seeds.
pub fn run_grid(
    eval: &[Record],
    pool: &PseudoLabeledPool,
    ctx: &TaskContext,
    predictor: &Predictor,
    seeds: &[u64],
    options: &GridOptions,
) -> Result<GridOutcome> {
    if eval.is_empty() {
        return Err(Error::EmptyInput("grid eval split is empty".to_string()));
    }
    if seeds.is_empty() {
        return Err(Error::Config(
            "run_grid needs at least one seed".to_string(),
        ));
    }
    let declared = ctx.schema.protected_values();
    let mut rows = Vec::with_capacity(36 * seeds.len());
    for pair in ratio_grid() {
        for &seed in seeds {
            let mut requests = Vec::with_capacity(eval.len());
            for (i, record) in eval.iter().enumerate() {
                let p = if record.group() == declared.0 {
                    pair.p_f
                } else {
                    pair.p_m
                };
                let selected = select_examples(
                    record,
                    pool,
                    options.k,
                    p,
                    options.strategy,
                    seed ^ (i as u64).wrapping_mul(0x100000001b3),
                )?;
                let block = to_fewshot_block(&selected, ctx)?;
                let bundle = ctx.bundle_for(record, None, Some(block))?;
                requests.push(ChatRequest::from_bundle(&bundle, 256, 0.0));
            }
            let outcomes = predictor.batch_predict(&requests, options.parallelism);
            let samples: Vec<EvalSample> = eval
                .iter()
                .zip(outcomes)
                .map(|(record, outcome)| EvalSample {
                    prediction: match outcome {
                        Ok(o) => Some(o.label),
                        Err(e) => {
                            log::warn!("grid abstention: {e}");
                            None
                        }
                    },
                    group: record.group().to_string(),
                    label: record.label(),
                })
                .collect();
            let report = EvalReport::compute(&samples, (&declared.0, &declared.1))?;
            rows.push(GridRow { pair, seed, report });
        }
    }
    let cells = summarize_cells(&rows, seeds.len());
    Ok(GridOutcome {
        rows,
        cells,
        groups: declared,
    })
}

fn summarize_cells(rows: &[GridRow], seeds: usize) -> Vec<GridCell> {
    let mean_std = |values: &[f64]| -> (f64, f64) {
        // Identical values (e.g. a deterministic backend across seeds) must
        // report exactly zero deviation, without mean-division noise.
        if values.windows(2).all(|w| w[0] == w[1]) {
            return (values[0], 0.0);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, variance.sqrt())
    };
    rows.chunks(seeds)
        .map(|chunk| {
            let pair = chunk[0].pair;
            let accuracies: Vec<f64> = chunk.iter().filter_map(|r| r.report.accuracy).collect();
            let (mean_accuracy, std_accuracy) = if accuracies.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&accuracies);
                (Some(m), Some(s))
            };
            let dps: Vec<f64> = chunk.iter().map(|r| r.report.dp_ratio).collect();
            let (mean_dp, std_dp) = mean_std(&dps);
            GridCell {
                pair,
                mean_accuracy,
                std_accuracy,
                mean_dp,
                std_dp,
            }
        })
        .collect()
}

/// Write per-seed grid rows as plot-ready CSV.
pub fn write_grid_csv(path: impl AsRef<std::path::Path>, outcome: &GridOutcome) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let (group_f, group_m) = &outcome.groups;
    writer.write_record([
        "p_f",
        "p_m",
        "seed",
        "accuracy",
        "dp_ratio",
        "eo_ratio",
        &format!("rate_{group_f}"),
        &format!("rate_{group_m}"),
    ])?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &outcome.rows {
        writer.write_record([
            row.pair.p_f.to_string(),
            row.pair.p_m.to_string(),
            row.seed.to_string(),
            fmt(row.report.accuracy),
            row.report.dp_ratio.to_string(),
            fmt(row.report.eo_ratio),
            fmt(row.report.rates.rate(group_f)),
            fmt(row.report.rates.rate(group_m)),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
