//! Meta-model loop for fairness instructions: propose, evaluate, and select
//! Pareto-optimal prompts.
//!
//! Each iteration builds a meta-prompt showing the most fair previous
//! instruction plus two randomly drawn ones (with their demographic parity
//! scores and group selection rates), asks the proposer for one new
//! instruction, and evaluates it: accuracy on the small labeled validation
//! split, demographic parity and selection rates on the eval split. Both
//! numbers are recorded so the eval-split feedback loop stays auditable.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::metrics::{
    dp_ratio, pareto_front, select_operating_point, EvalReport, EvalSample, GroupRates,
    OperatingPoint, TradeoffPoint,
};
use crate::model::{BackendResponse, ChatRequest, Predictor};
use crate::serializer::TaskContext;
use crate::util::normalize_text;

/// The manually curated fairness prompts evaluated in manual-prompt mode.
pub const MANUAL_FAIR_PROMPTS: [&str; 3] = [
    "Ignore sex completely when making predictions",
    "Assign positive label to females and males at the same rate.",
    "Assign positive label to females slightly more often than to males.",
];

/// One evaluated fairness instruction. An empty text is the no-instruction
/// baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateInstruction {
    pub text: String,
    pub validation_accuracy: f64,
    pub dp_ratio_eval: f64,
    pub rates: GroupRates,
    pub iteration: usize,
}

impl CandidateInstruction {
    fn display_text(&self) -> &str {
        if self.text.is_empty() {
            "[empty prompt]"
        } else {
            &self.text
        }
    }

    pub fn tag(&self) -> String {
        format!("{:04}", self.iteration)
    }

    pub fn tradeoff_point(&self) -> TradeoffPoint {
        TradeoffPoint::new(self.validation_accuracy, self.dp_ratio_eval, self.tag())
    }
}

/// Append-only record of the optimization run.
#[derive(Debug, Clone)]
pub struct CandidateHistory {
    pub candidates: Vec<CandidateInstruction>,
    pub rng_seed: u64,
}

impl CandidateHistory {
    pub fn best_so_far_dp(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.candidates
            .iter()
            .map(|c| {
                best = best.max(c.dp_ratio_eval);
                best
            })
            .collect()
    }
}

/// Index of the most fair candidate (first among ties).
fn max_dp_index(candidates: &[CandidateInstruction]) -> usize {
    let mut best = 0;
    for (i, candidate) in candidates.iter().enumerate() {
        if candidate.dp_ratio_eval > candidates[best].dp_ratio_eval {
            best = i;
        }
    }
    best
}

/// Render the meta-prompt: the most fair previous instruction plus two
/// exemplars drawn uniformly without replacement from the rest (seeded by the
/// history seed and length), each with its demographic parity score and both
/// group selection rates, ending with a request for one new instruction.
pub fn build_meta_prompt(history: &CandidateHistory) -> Result<String> {
    if history.candidates.is_empty() {
        return Err(Error::EmptyInput("meta-prompt needs history".to_string()));
    }
    let candidates = &history.candidates;
    let best = max_dp_index(candidates);
    let mut chosen = vec![best];
    if candidates.len() > 1 {
        let rest: Vec<usize> = (0..candidates.len()).filter(|&i| i != best).collect();
        let draw = rest.len().min(2);
        let mut rng = ChaCha8Rng::seed_from_u64(
            history
                .rng_seed
                .wrapping_add((candidates.len() as u64).wrapping_mul(0x9e3779b97f4a7c15)),
        );
        let mut picks: Vec<usize> = sample(&mut rng, rest.len(), draw)
            .into_iter()
            .map(|i| rest[i])
            .collect();
        picks.sort_unstable();
        chosen.extend(picks);
    }
    let mut text = String::from(
        "You are optimizing fairness instructions for a language model that predicts on \
tabular data.\nBelow are some previous fairness instructions with the demographic parity \
they achieved (1.0 is perfect parity) and the positive-prediction rate for each group.\n\n",
    );
    for &i in &chosen {
        let candidate = &candidates[i];
        let rates: Vec<String> = candidate
            .rates
            .iter()
            .map(|(group, _)| match candidate.rates.rate(group) {
                Some(rate) => format!("{group}: {rate:.4}"),
                None => format!("{group}: n/a"),
            })
            .collect();
        text.push_str(&format!(
            "Instruction: {}\nDemographic parity: {:.4} (selection rates: {})\n\n",
            candidate.display_text(),
            candidate.dp_ratio_eval,
            rates.join("; ")
        ));
    }
    text.push_str(
        "Write one new fairness instruction for the model that brings demographic parity \
closer to 1.0 while keeping accuracy high. Reply with only the instruction text.",
    );
    Ok(text)
}

/// Pull the instruction out of a meta-model reply: the first double-quoted
/// span when present, otherwise the whole reply with leading boilerplate
/// stripped, flattened to one line.
pub fn extract_instruction(reply: &str) -> Result<String> {
    let flattened = reply.replace(['\n', '\r'], " ");
    let quoted = flattened
        .split_once('"')
        .and_then(|(_, rest)| rest.split_once('"'))
        .map(|(inner, _)| inner.trim().to_string())
        .filter(|s| !s.is_empty());
    let text = match quoted {
        Some(inner) => inner,
        None => {
            let re = regex::Regex::new(
                r"(?i)^\s*(?:(?:new|revised)\s+)?(?:fairness\s+)?instruction\s*[:\-]\s*",
            )
            .unwrap();
            re.replace(&flattened, "").trim().to_string()
        }
    };
    if text.is_empty() {
        return Err(Error::Extraction {
            reason: "meta reply contained no instruction".to_string(),
            raw: reply.to_string(),
        });
    }
    Ok(text)
}

/// A source of new fairness instructions.
pub trait MetaProposer: Send + Sync {
    fn propose(&self, meta_prompt: &str, history: &CandidateHistory) -> Result<String>;
}

/// Meta-proposer backed by a chat backend (by default the same model that
/// makes downstream predictions, at a nonzero temperature for diversity).
pub struct LlmMetaProposer {
    pub predictor: Arc<Predictor>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl LlmMetaProposer {
    pub fn new(predictor: Arc<Predictor>) -> Self {
        Self {
            predictor,
            temperature: 0.7,
            max_tokens: 256,
        }
    }
}

impl MetaProposer for LlmMetaProposer {
    fn propose(&self, meta_prompt: &str, _history: &CandidateHistory) -> Result<String> {
        let request = ChatRequest {
            user_text: meta_prompt.to_string(),
            assistant_prefix: String::new(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            candidate_labels: crate::serializer::AnswerLabels {
                positive: "unused".to_string(),
                negative: "n/a".to_string(),
            },
        };
        match self.predictor.complete_raw(&request)? {
            BackendResponse::Generated { text } => extract_instruction(&text),
            BackendResponse::Likelihood { .. } => Err(Error::Backend(
                "meta backend must generate text".to_string(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    pub iterations: usize,
    pub rng_seed: u64,
    pub parallelism: usize,
    pub max_tokens: u32,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            iterations: 100,
            rng_seed: 0,
            parallelism: 1,
            max_tokens: 256,
        }
    }
}

/// Evaluate one instruction: accuracy on the validation split, demographic
/// parity and selection rates on the eval split. Abstentions are excluded
/// and logged.
pub fn evaluate_instruction(
    ctx: &TaskContext,
    predictor: &Predictor,
    instruction: Option<&str>,
    validation: &[Record],
    eval: &[Record],
    parallelism: usize,
) -> Result<(f64, f64, GroupRates)> {
    let predict_split = |records: &[Record]| -> Result<Vec<EvalSample>> {
        let requests: Vec<ChatRequest> = records
            .iter()
            .map(|record| {
                let bundle = ctx.bundle_for(record, instruction, None)?;
                Ok(ChatRequest::from_bundle(&bundle, 256, 0.0))
            })
            .collect::<Result<_>>()?;
        let outcomes = predictor.batch_predict(&requests, parallelism);
        Ok(records
            .iter()
            .zip(outcomes)
            .map(|(record, outcome)| {
                let prediction = match outcome {
                    Ok(o) => Some(o.label),
                    Err(e) => {
                        log::warn!("abstention: {e}");
                        None
                    }
                };
                EvalSample {
                    prediction,
                    group: record.group().to_string(),
                    label: record.label(),
                }
            })
            .collect())
    };
    let declared = ctx.schema.protected_values();
    let declared = (declared.0.as_str(), declared.1.as_str());

    let val_report = EvalReport::compute(&predict_split(validation)?, declared)?;
    let accuracy = val_report.accuracy.ok_or_else(|| {
        Error::EmptyInput("validation split produced no labeled predictions".to_string())
    })?;
    let eval_samples = predict_split(eval)?;
    let rates = crate::metrics::selection_rates(
        eval_samples
            .iter()
            .filter_map(|s| s.prediction.map(|p| (p, s.group.as_str()))),
        declared,
    )?;
    let dp = dp_ratio(&rates)?;
    Ok((accuracy, dp, rates))
}

/// Run the full optimization loop. The history always starts with the
/// empty-instruction baseline at iteration 0 and gains one entry per
/// successful iteration; duplicate proposals are re-recorded from the
/// instruction cache without re-evaluating.
pub fn optimize(
    ctx: &TaskContext,
    predictor: &Predictor,
    meta: &dyn MetaProposer,
    validation: &[Record],
    eval: &[Record],
    options: &OptimizeOptions,
) -> Result<CandidateHistory> {
    let mut history = CandidateHistory {
        candidates: Vec::with_capacity(options.iterations + 1),
        rng_seed: options.rng_seed,
    };
    let mut evaluated: HashMap<String, (f64, f64, GroupRates)> = HashMap::new();
    let baseline =
        evaluate_instruction(ctx, predictor, None, validation, eval, options.parallelism)?;
    evaluated.insert(String::new(), baseline.clone());
    history.candidates.push(CandidateInstruction {
        text: String::new(),
        validation_accuracy: baseline.0,
        dp_ratio_eval: baseline.1,
        rates: baseline.2,
        iteration: 0,
    });
    for iteration in 1..=options.iterations {
        let meta_prompt = build_meta_prompt(&history)?;
        let proposal = match meta.propose(&meta_prompt, &history) {
            Ok(text) => text,
            Err(e) => {
                log::warn!("iteration {iteration}: proposal failed, skipping: {e}");
                continue;
            }
        };
        let key = normalize_text(&proposal);
        let metrics = match evaluated.get(&key) {
            Some(found) => found.clone(),
            None => {
                let computed = evaluate_instruction(
                    ctx,
                    predictor,
                    Some(&proposal),
                    validation,
                    eval,
                    options.parallelism,
                )?;
                evaluated.insert(key, computed.clone());
                computed
            }
        };
        history.candidates.push(CandidateInstruction {
            text: proposal,
            validation_accuracy: metrics.0,
            dp_ratio_eval: metrics.1,
            rates: metrics.2,
            iteration,
        });
    }
    Ok(history)
}

/// Evaluate a fixed list of manually written prompts (plus the baseline)
/// without any meta calls.
pub fn evaluate_manual(
    ctx: &TaskContext,
    predictor: &Predictor,
    prompts: &[String],
    validation: &[Record],
    eval: &[Record],
    options: &OptimizeOptions,
) -> Result<CandidateHistory> {
    let mut history = CandidateHistory {
        candidates: Vec::with_capacity(prompts.len() + 1),
        rng_seed: options.rng_seed,
    };
    let baseline =
        evaluate_instruction(ctx, predictor, None, validation, eval, options.parallelism)?;
    history.candidates.push(CandidateInstruction {
        text: String::new(),
        validation_accuracy: baseline.0,
        dp_ratio_eval: baseline.1,
        rates: baseline.2,
        iteration: 0,
    });
    for (i, prompt) in prompts.iter().enumerate() {
        let metrics = evaluate_instruction(
            ctx,
            predictor,
            Some(prompt),
            validation,
            eval,
            options.parallelism,
        )?;
        history.candidates.push(CandidateInstruction {
            text: prompt.clone(),
            validation_accuracy: metrics.0,
            dp_ratio_eval: metrics.1,
            rates: metrics.2,
            iteration: i + 1,
        });
    }
    Ok(history)
}

/// Pareto set, operating point, and the extreme-parity Pareto members.
#[derive(Debug, Clone)]
pub struct OptimizationReport {
    pub pareto: Vec<TradeoffPoint>,
    pub operating_point: OperatingPoint,
    pub most_fair: CandidateInstruction,
    pub least_fair: CandidateInstruction,
}

/// Summarize a history: Pareto front over (validation accuracy, eval DP),
/// the operating point at `dp_min`, and the Pareto members with the highest
/// and lowest demographic parity.
pub fn report(history: &CandidateHistory, dp_min: f64) -> Result<OptimizationReport> {
    let points: Vec<TradeoffPoint> = history
        .candidates
        .iter()
        .map(CandidateInstruction::tradeoff_point)
        .collect();
    let pareto = pareto_front(&points);
    let operating_point = select_operating_point(&points, dp_min)?;
    let by_tag = |tag: &str| {
        history
            .candidates
            .iter()
            .find(|c| c.tag() == tag)
            .cloned()
            .expect("pareto tags come from the history")
    };
    let most_fair_point = pareto
        .iter()
        .max_by(|a, b| {
            a.dp_ratio
                .partial_cmp(&b.dp_ratio)
                .unwrap()
                .then(b.tag.cmp(&a.tag))
        })
        .expect("front is nonempty");
    let least_fair_point = pareto
        .iter()
        .min_by(|a, b| {
            a.dp_ratio
                .partial_cmp(&b.dp_ratio)
                .unwrap()
                .then(a.tag.cmp(&b.tag))
        })
        .expect("front is nonempty");
    Ok(OptimizationReport {
        most_fair: by_tag(&most_fair_point.tag),
        least_fair: by_tag(&least_fair_point.tag),
        pareto,
        operating_point,
    })
}

/// Persist a history as JSONL, one candidate per line.
pub fn save_history(path: impl AsRef<Path>, history: &CandidateHistory) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for candidate in &history.candidates {
        writeln!(file, "{}", serde_json::to_string(candidate)?)?;
    }
    Ok(())
}

pub fn load_history(path: impl AsRef<Path>, rng_seed: u64) -> Result<CandidateHistory> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut candidates = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            candidates.push(serde_json::from_str(&line)?);
        }
    }
    Ok(CandidateHistory {
        candidates,
        rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::selection_rates;
    use crate::simulator::{synthetic, ScriptedProposer, SimulatorBackend, SyntheticLLMConfig};
    use std::collections::BTreeMap;

    fn rates(pos_f: usize, n_f: usize, pos_m: usize, n_m: usize) -> GroupRates {
        selection_rates(
            (0..n_f)
                .map(|i| (u8::from(i < pos_f), "female"))
                .chain((0..n_m).map(|i| (u8::from(i < pos_m), "male"))),
            ("female", "male"),
        )
        .unwrap()
    }

    fn candidate(text: &str, acc: f64, dp: f64, iteration: usize) -> CandidateInstruction {
        CandidateInstruction {
            text: text.to_string(),
            validation_accuracy: acc,
            dp_ratio_eval: dp,
            rates: rates(2, 10, 5, 10),
            iteration,
        }
    }

    #[test]
    fn meta_prompt_single_exemplar() {
        let history = CandidateHistory {
            candidates: vec![candidate("", 0.7, 0.4, 0)],
            rng_seed: 1,
        };
        let prompt = build_meta_prompt(&history).unwrap();
        assert_eq!(prompt.matches("Instruction:").count(), 1);
        assert!(prompt.contains("[empty prompt]"));
        assert!(prompt.contains("Demographic parity: 0.4000"));
        assert!(prompt.contains("female: 0.2000"));
        assert!(prompt.contains("male: 0.5000"));
    }

    #[test]
    fn meta_prompt_three_exemplars_deterministic_with_max_dp() {
        let candidates: Vec<CandidateInstruction> = (0..10)
            .map(|i| candidate(&format!("prompt {i}"), 0.7, 0.05 * i as f64, i))
            .collect();
        let history = CandidateHistory {
            candidates,
            rng_seed: 42,
        };
        let first = build_meta_prompt(&history).unwrap();
        let second = build_meta_prompt(&history).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.matches("Instruction:").count(), 3);
        // The max-DP entry (prompt 9) is always demonstrated.
        assert!(first.contains("prompt 9"));
    }

    #[test]
    fn meta_prompt_always_shows_max_dp_entry() {
        for n in 1..12usize {
            let candidates: Vec<CandidateInstruction> = (0..n)
                .map(|i| {
                    candidate(
                        &format!("c{i}"),
                        0.5,
                        if i == n / 2 { 0.99 } else { 0.3 },
                        i,
                    )
                })
                .collect();
            let history = CandidateHistory {
                candidates,
                rng_seed: n as u64,
            };
            let prompt = build_meta_prompt(&history).unwrap();
            let needle = format!("Instruction: c{}\n", n / 2);
            assert!(prompt.contains(&needle), "n={n}: missing max-DP exemplar");
        }
    }

    #[test]
    fn extract_instruction_variants() {
        assert_eq!(
            extract_instruction("Here you go: \"Treat both groups equally.\" Hope that helps")
                .unwrap(),
            "Treat both groups equally."
        );
        assert_eq!(
            extract_instruction("Instruction: Balance the rates across sexes").unwrap(),
            "Balance the rates across sexes"
        );
        assert_eq!(
            extract_instruction("New fairness instruction - Be fair\nacross lines").unwrap(),
            "Be fair across lines"
        );
        assert!(extract_instruction("  ").is_err());
    }

    fn simulator_setup(
        bias_female: f64,
        bias_male: f64,
        n: usize,
    ) -> (
        crate::serializer::TaskContext,
        Predictor,
        Vec<Record>,
        Vec<Record>,
    ) {
        let ctx = synthetic::task_context();
        let config = SyntheticLLMConfig {
            group_bias: BTreeMap::from([
                ("female".to_string(), bias_female),
                ("male".to_string(), bias_male),
            ]),
            feature_scale: 1.0,
            ..SyntheticLLMConfig::default()
        };
        let records = synthetic::records(n, 23, &config);
        let backend = SimulatorBackend::new(config, Arc::new(ctx.schema.clone())).unwrap();
        let predictor = Predictor::new(Arc::new(backend));
        let validation = records[..50].to_vec();
        let eval = records[50..].to_vec();
        (ctx, predictor, validation, eval)
    }

    #[test]
    fn zero_iterations_history_is_just_the_baseline() {
        let (ctx, predictor, validation, eval) = simulator_setup(-0.5, 0.5, 120);
        let history = optimize(
            &ctx,
            &predictor,
            &ScriptedProposer::default(),
            &validation,
            &eval,
            &OptimizeOptions {
                iterations: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(history.candidates.len(), 1);
        assert_eq!(history.candidates[0].text, "");
        assert_eq!(history.candidates[0].iteration, 0);
    }

    #[test]
    fn manual_mode_evaluates_three_prompts_without_meta_calls() {
        let (ctx, predictor, validation, eval) = simulator_setup(-0.5, 0.5, 120);
        let prompts: Vec<String> = MANUAL_FAIR_PROMPTS.iter().map(|s| s.to_string()).collect();
        let history = evaluate_manual(
            &ctx,
            &predictor,
            &prompts,
            &validation,
            &eval,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(history.candidates.len(), 4);
        assert_eq!(history.candidates[0].text, "");
        for (i, prompt) in prompts.iter().enumerate() {
            assert_eq!(&history.candidates[i + 1].text, prompt);
        }
        // Iterations strictly increasing.
        for pair in history.candidates.windows(2) {
            assert!(pair[1].iteration > pair[0].iteration);
        }
    }

    #[test]
    fn scripted_loop_converges_on_biased_simulator() {
        let (ctx, predictor, validation, eval) = simulator_setup(-1.6, 0.0, 300);
        let history = optimize(
            &ctx,
            &predictor,
            &ScriptedProposer::default(),
            &validation,
            &eval,
            &OptimizeOptions {
                iterations: 25,
                rng_seed: 7,
                parallelism: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(history.candidates.len(), 26);
        assert!(
            history.candidates[0].dp_ratio_eval < 0.8,
            "baseline should start unfair, got {}",
            history.candidates[0].dp_ratio_eval
        );
        // Best-so-far DP never decreases (cumulative max by construction),
        // and the loop actually improves parity.
        let best = history.best_so_far_dp();
        assert!(best.windows(2).all(|w| w[1] >= w[0]));
        assert!(*best.last().unwrap() >= 0.95, "final best {best:?}");
        let summary = report(&history, 0.9).unwrap();
        assert!(summary.operating_point.point.dp_ratio >= 0.9);
    }

    #[test]
    fn duplicate_proposals_are_rerecorded_without_new_calls() {
        struct ConstantProposer;
        impl MetaProposer for ConstantProposer {
            fn propose(&self, _p: &str, _h: &CandidateHistory) -> Result<String> {
                Ok("Always the same instruction.".to_string())
            }
        }
        let (ctx, predictor, validation, eval) = simulator_setup(-0.5, 0.5, 80);
        let history = optimize(
            &ctx,
            &predictor,
            &ConstantProposer,
            &validation,
            &eval,
            &OptimizeOptions {
                iterations: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(history.candidates.len(), 6);
        let calls_after = predictor
            .stats
            .backend_calls
            .load(std::sync::atomic::Ordering::Relaxed);
        // Baseline + one unique instruction; each evaluated once over 80 records.
        assert_eq!(calls_after, 160);
        for candidate in &history.candidates[2..] {
            assert_eq!(candidate.dp_ratio_eval, history.candidates[1].dp_ratio_eval);
        }
    }

    #[test]
    fn failing_proposer_skips_iterations() {
        struct FlakyProposer;
        impl MetaProposer for FlakyProposer {
            fn propose(&self, _p: &str, history: &CandidateHistory) -> Result<String> {
                if history.candidates.len() % 2 == 1 {
                    Err(Error::Backend("no proposal".to_string()))
                } else {
                    Ok(format!("instruction {}", history.candidates.len()))
                }
            }
        }
        let (ctx, predictor, validation, eval) = simulator_setup(-0.5, 0.5, 80);
        let history = optimize(
            &ctx,
            &predictor,
            &FlakyProposer,
            &validation,
            &eval,
            &OptimizeOptions {
                iterations: 4,
                ..Default::default()
            },
        )
        .unwrap();
        // Baseline plus the non-failing iterations only.
        assert!(history.candidates.len() < 5);
        assert!(!history.candidates.is_empty());
    }

    #[test]
    fn report_matches_hand_filtered_oracle() {
        let history = CandidateHistory {
            candidates: vec![
                candidate("", 0.80, 0.50, 0),
                candidate("a", 0.78, 0.92, 1),
                candidate("b", 0.74, 0.99, 2),
                candidate("c", 0.79, 0.85, 3),
            ],
            rng_seed: 0,
        };
        let summary = report(&history, 0.9).unwrap();
        assert!(summary.operating_point.constraint_met);
        assert_eq!(summary.operating_point.point.tag, "0001");
        assert_eq!(summary.most_fair.text, "b");
        assert_eq!(summary.least_fair.text, "");
        // Single candidate: it is everything.
        let single = CandidateHistory {
            candidates: vec![candidate("only", 0.7, 0.8, 0)],
            rng_seed: 0,
        };
        let summary = report(&single, 0.9).unwrap();
        assert!(!summary.operating_point.constraint_met);
        assert_eq!(summary.most_fair.text, "only");
        assert_eq!(summary.least_fair.text, "only");
        assert_eq!(summary.pareto.len(), 1);
    }

    #[test]
    fn history_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let history = CandidateHistory {
            candidates: vec![candidate("", 0.8, 0.5, 0), candidate("x", 0.7, 0.9, 1)],
            rng_seed: 3,
        };
        save_history(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let loaded = load_history(&path, 3).unwrap();
        assert_eq!(loaded.candidates, history.candidates);
    }
}
