//! Batched prediction with model-driven post-hoc correction, plus a
//! deterministic boundary-flip reference post-processor.
//!
//! A batch is refined only when the absolute difference in positive rates
//! across groups exceeds the trigger gap. Refinement replies must follow the
//! strict `<id>: <label text>` grammar; anything else (parse failure, unknown
//! ids, duplicate ids, or a gap-increasing result) is rejected and the
//! initial predictions are kept.

use std::collections::BTreeSet;

use crate::dataset::{DatasetSchema, Record};
use crate::error::{Error, Result};
use crate::metrics::{selection_rates, EvalReport, EvalSample, GroupRates};
use crate::model::{BackendResponse, ChatRequest, PredictionOutcome, Predictor};
use crate::serializer::{build_refinement_prompt, AnswerLabels};

/// One prediction with the confidence needed for boundary flipping.
#[derive(Debug, Clone)]
pub struct ScoredPrediction {
    pub group: String,
    pub score: f64,
    pub label: u8,
}

/// True when the absolute positive-rate difference strictly exceeds
/// `trigger_gap`. Uses the integer-scaled comparison, so a 0.50 vs 0.35
/// batch sits exactly on a 0.15 boundary and does not trigger.
pub fn needs_refinement(rates: &GroupRates, trigger_gap: f64) -> Result<bool> {
    rates.gap()?; // surfaces MissingRate for absent groups
    let counts: Vec<(&str, &crate::metrics::GroupCount)> = rates.iter().collect();
    let (a, b) = (counts[0].1, counts[1].1);
    Ok(!gap_within(
        a.positives,
        a.count,
        b.positives,
        b.count,
        trigger_gap,
    ))
}

/// Exact rate-gap feasibility check: |p_a/n_a - p_b/n_b| <= gap, compared in
/// integer-scaled form so boundary cases like 0.50 vs 0.35 at a 0.15 gap are
/// immune to float division noise.
fn gap_within(pos_a: usize, n_a: usize, pos_b: usize, n_b: usize, gap: f64) -> bool {
    let scaled_diff = (pos_a as f64 * n_b as f64 - pos_b as f64 * n_a as f64).abs();
    scaled_diff <= gap * n_a as f64 * n_b as f64
}

/// Minimal set of label flips bringing the positive-rate gap to at most
/// `target_gap`.
///
/// Each group's positive count may move down (demote positives) or up
/// (promote negatives); the plan exhaustively scans the reachable count
/// pairs for the cheapest feasible one. Equal-cost solutions prefer raising
/// the under-selected group, which keeps selection rates (and therefore the
/// min/max parity ratio) high. Within a group, the samples closest to a
/// score of 0.5 flip first, ties broken by lower sample id.
pub fn boundary_flip_plan(samples: &[ScoredPrediction], target_gap: f64) -> Vec<(usize, u8)> {
    let groups: BTreeSet<&str> = samples.iter().map(|s| s.group.as_str()).collect();
    if groups.len() != 2 {
        return Vec::new();
    }
    let mut names = groups.into_iter();
    let (g0, g1) = (names.next().unwrap(), names.next().unwrap());
    let count = |g: &str| samples.iter().filter(|s| s.group == g).count();
    let positives = |g: &str| {
        samples
            .iter()
            .filter(|s| s.group == g && s.label == 1)
            .count()
    };
    let (n0, n1) = (count(g0), count(g1));
    let (p0, p1) = (positives(g0), positives(g1));
    if gap_within(p0, n0, p1, n1, target_gap) {
        return Vec::new();
    }
    let over_is_g0 = p0 * n1 > p1 * n0;
    let (over, n_over, pos_over, under, n_under, pos_under) = if over_is_g0 {
        (g0, n0, p0, g1, n1, p1)
    } else {
        (g1, n1, p1, g0, n0, p0)
    };

    // Exhaustive scan over final positive counts per group; batches are small.
    let mut best: Option<(usize, usize, usize)> = None; // (cost, a_over, b_under)
    for a in 0..=n_over {
        for b in 0..=n_under {
            if !gap_within(a, n_over, b, n_under, target_gap) {
                continue;
            }
            let cost = a.abs_diff(pos_over) + b.abs_diff(pos_under);
            let better = match best {
                None => true,
                Some((best_cost, best_a, best_b)) => {
                    cost < best_cost
                        || (cost == best_cost && (b > best_b || (b == best_b && a > best_a)))
                }
            };
            if better {
                best = Some((cost, a, b));
            }
        }
    }
    let Some((_, a_over, b_under)) = best else {
        return Vec::new();
    };

    // Flip the required number of boundary samples in each group.
    let pick = |group: &str, label: u8, take: usize| -> Vec<usize> {
        let mut candidates: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].group == group && samples[i].label == label)
            .collect();
        candidates.sort_by(|&a, &b| {
            let da = (samples[a].score - 0.5).abs();
            let db = (samples[b].score - 0.5).abs();
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        candidates.truncate(take);
        candidates
    };
    let mut flips: Vec<(usize, u8)> = Vec::new();
    for (group, pos, target) in [(over, pos_over, a_over), (under, pos_under, b_under)] {
        if target < pos {
            flips.extend(pick(group, 1, pos - target).into_iter().map(|i| (i, 0)));
        } else if target > pos {
            flips.extend(pick(group, 0, target - pos).into_iter().map(|i| (i, 1)));
        }
    }
    flips.sort_by_key(|(i, _)| *i);
    flips
}

/// Deterministic non-LLM post-processing baseline: apply the minimal
/// boundary-flip plan and return the full relabeled vector.
pub fn reference_post_process(samples: &[ScoredPrediction], trigger_gap: f64) -> Vec<u8> {
    let mut labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    for (i, new_label) in boundary_flip_plan(samples, trigger_gap) {
        labels[i] = new_label;
    }
    labels
}

/// Parse the strict refinement grammar: one `<id>: <label text>` line per
/// changed sample. Empty text means no changes.
pub fn parse_refinement_response(
    text: &str,
    labels: &AnswerLabels,
    batch_len: usize,
) -> Result<Vec<(usize, u8)>> {
    let mut changes = Vec::new();
    let mut seen = BTreeSet::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id_text, label_text) = line.split_once(':').ok_or_else(|| {
            Error::RefinementRejected(format!("line '{line}' is not '<id>: <label text>'"))
        })?;
        let id: usize = id_text.trim().parse().map_err(|_| {
            Error::RefinementRejected(format!("'{}' is not a sample id", id_text.trim()))
        })?;
        if id >= batch_len {
            return Err(Error::RefinementRejected(format!(
                "unknown sample id {id} (batch has {batch_len})"
            )));
        }
        if !seen.insert(id) {
            return Err(Error::RefinementRejected(format!(
                "sample id {id} listed more than once"
            )));
        }
        let label = labels.label_for(label_text).ok_or_else(|| {
            Error::RefinementRejected(format!("'{}' is not an answer label", label_text.trim()))
        })?;
        changes.push((id, label));
    }
    Ok(changes)
}

/// One batch flowing through the two-stage predict/refine pipeline.
#[derive(Debug, Clone)]
pub struct RefineBatch {
    pub records: Vec<Record>,
    pub initial: Vec<PredictionOutcome>,
    pub refined: Option<Vec<u8>>,
    pub trigger_gap: f64,
    /// Why the model's refinement was discarded, when it was.
    pub rejected: Option<String>,
}

impl RefineBatch {
    pub fn new(records: Vec<Record>, initial: Vec<PredictionOutcome>, trigger_gap: f64) -> Self {
        debug_assert_eq!(records.len(), initial.len());
        Self {
            records,
            initial,
            refined: None,
            trigger_gap,
            rejected: None,
        }
    }

    pub fn initial_labels(&self) -> Vec<u8> {
        self.initial.iter().map(|o| o.label).collect()
    }

    fn rates(&self, schema: &DatasetSchema) -> Result<GroupRates> {
        let declared = schema.protected_values();
        selection_rates(
            self.initial
                .iter()
                .zip(&self.records)
                .map(|(o, r)| (o.label, r.group())),
            (&declared.0, &declared.1),
        )
    }

    fn gap_of(&self, labels: &[u8], schema: &DatasetSchema) -> Result<f64> {
        let declared = schema.protected_values();
        selection_rates(
            labels
                .iter()
                .zip(&self.records)
                .map(|(l, r)| (*l, r.group())),
            (&declared.0, &declared.1),
        )?
        .gap()
    }
}

/// Second-stage correction: send the batch to the backend when the trigger
/// fires, validate the reply, and apply it. Invalid or gap-increasing replies
/// leave the initial predictions in place with the incident recorded.
pub fn refine(
    mut batch: RefineBatch,
    schema: &DatasetSchema,
    predictor: &Predictor,
    target_gap: f64,
    max_tokens: u32,
) -> Result<RefineBatch> {
    let initial_labels = batch.initial_labels();
    let rates = match batch.rates(schema) {
        Ok(rates) => rates,
        Err(Error::MissingRate(group)) => {
            log::warn!("batch has no '{group}' samples; skipping refinement");
            batch.refined = Some(initial_labels);
            return Ok(batch);
        }
        Err(e) => return Err(e),
    };
    if !needs_refinement(&rates, batch.trigger_gap)? {
        batch.refined = Some(initial_labels);
        return Ok(batch);
    }
    let prompt =
        build_refinement_prompt(&batch.records, &initial_labels, schema, &rates, target_gap)?;
    let request = ChatRequest {
        user_text: prompt,
        assistant_prefix: String::new(),
        max_tokens,
        temperature: 0.0,
        candidate_labels: AnswerLabels::from_schema(schema),
    };
    let applied = predictor
        .complete_raw(&request)
        .and_then(|response| match response {
            BackendResponse::Generated { text } => {
                parse_refinement_response(&text, &request.candidate_labels, batch.records.len())
            }
            BackendResponse::Likelihood { .. } => Err(Error::RefinementRejected(
                "likelihood response to a refinement prompt".to_string(),
            )),
        })
        .and_then(|changes| {
            let mut labels = initial_labels.clone();
            for (id, label) in changes {
                labels[id] = label;
            }
            let old_gap = batch.gap_of(&initial_labels, schema)?;
            let new_gap = batch.gap_of(&labels, schema)?;
            if new_gap > old_gap {
                return Err(Error::RefinementRejected(format!(
                    "gap increased from {old_gap:.4} to {new_gap:.4}"
                )));
            }
            Ok(labels)
        });
    match applied {
        Ok(labels) => batch.refined = Some(labels),
        Err(e) => {
            log::warn!("refinement rejected: {e}");
            batch.rejected = Some(e.to_string());
            batch.refined = Some(initial_labels);
        }
    }
    Ok(batch)
}

/// Settings for [`run_batched`].
#[derive(Debug, Clone, Copy)]
pub struct RefineOptions {
    pub batch_size: usize,
    pub trigger_gap: f64,
    pub target_gap: f64,
    pub max_tokens: u32,
    pub parallelism: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            batch_size: 40,
            trigger_gap: 0.15,
            target_gap: 0.15,
            max_tokens: 1024,
            parallelism: 1,
        }
    }
}

/// Outcome of a batched predict-then-refine run.
#[derive(Debug, Clone)]
pub struct BatchedRunReport {
    pub before: EvalReport,
    pub after: EvalReport,
    pub batches: Vec<RefineBatch>,
    pub refined_batches: usize,
    pub rejected_batches: usize,
}

/// Predict all records, partition them into consecutive batches (the last
/// one may be short), refine each triggered batch, and report pooled metrics
/// before and after. Batches whose predictions failed keep their initial
/// state untouched.
pub fn run_batched(
    records: &[Record],
    ctx: &crate::serializer::TaskContext,
    predictor: &Predictor,
    options: &RefineOptions,
) -> Result<BatchedRunReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("run_batched needs records".to_string()));
    }
    let requests: Vec<ChatRequest> = records
        .iter()
        .map(|record| {
            let bundle = ctx.bundle_for(record, None, None)?;
            Ok(ChatRequest::from_bundle(&bundle, 256, 0.0))
        })
        .collect::<Result<_>>()?;
    let outcomes = predictor.batch_predict(&requests, options.parallelism);

    let declared = ctx.schema.protected_values();
    let mut before_samples = Vec::with_capacity(records.len());
    let mut after_samples = Vec::with_capacity(records.len());
    let mut batches = Vec::new();
    let mut refined_batches = 0;
    let mut rejected_batches = 0;

    for chunk_start in (0..records.len()).step_by(options.batch_size.max(1)) {
        let chunk_end = (chunk_start + options.batch_size.max(1)).min(records.len());
        let chunk_records = &records[chunk_start..chunk_end];
        let chunk_outcomes = &outcomes[chunk_start..chunk_end];
        let all_ok = chunk_outcomes.iter().all(Result::is_ok);
        let before_labels: Vec<Option<u8>> = chunk_outcomes
            .iter()
            .map(|o| o.as_ref().ok().map(|p| p.label))
            .collect();

        let after_labels: Vec<Option<u8>> = if all_ok {
            let initial: Vec<PredictionOutcome> = chunk_outcomes
                .iter()
                .map(|o| o.as_ref().unwrap().clone())
                .collect();
            let batch = RefineBatch::new(chunk_records.to_vec(), initial, options.trigger_gap);
            let batch = refine(
                batch,
                &ctx.schema,
                predictor,
                options.target_gap,
                options.max_tokens,
            )?;
            let refined = batch.refined.clone().expect("refine always fills labels");
            if batch.rejected.is_some() {
                rejected_batches += 1;
            } else if refined != batch.initial_labels() {
                refined_batches += 1;
            }
            let labels = refined.into_iter().map(Some).collect();
            batches.push(batch);
            labels
        } else {
            log::warn!("batch at {chunk_start} has failed predictions; keeping initial labels");
            before_labels.clone()
        };

        for ((record, before), after) in chunk_records.iter().zip(&before_labels).zip(&after_labels)
        {
            before_samples.push(EvalSample {
                prediction: *before,
                group: record.group().to_string(),
                label: record.label(),
            });
            after_samples.push(EvalSample {
                prediction: *after,
                group: record.group().to_string(),
                label: record.label(),
            });
        }
    }

    Ok(BatchedRunReport {
        before: EvalReport::compute(&before_samples, (&declared.0, &declared.1))?,
        after: EvalReport::compute(&after_samples, (&declared.0, &declared.1))?,
        batches,
        refined_batches,
        rejected_batches,
    })
}
