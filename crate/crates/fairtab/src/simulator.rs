//! Deterministic stand-in language model and scripted meta-proposer, so every
//! method runs offline with known ground truth.
//!
//! The simulator scores a prompt structurally: it parses the test record back
//! into feature-value tokens, hashes each token to a fixed signed weight,
//! adds a per-group logit offset, a few-shot term proportional to the
//! positive-example fraction, and any `ADJUST <GROUP> BY <delta>` directives
//! found in the instructions. The resulting logistic score is exact and
//! reproducible, which makes monotone-trend and convergence tests possible.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_group, DatasetSchema, Record};
use crate::error::{Error, Result};
use crate::model::{BackendResponse, ChatBackend, ChatRequest, PredictionOutcome, Source};
use crate::promptopt::CandidateHistory;
use crate::selfrefine::{boundary_flip_plan, ScoredPrediction};
use crate::serializer::{AnswerLabels, PromptBundle, REFINEMENT_HEADER};
use crate::util::{fnv1a64, normalize_text};

/// Behavioral knobs of the synthetic model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticLLMConfig {
    /// Derives a fixed weight per hashed feature-value token.
    pub weight_seed: u64,
    /// Per-group logit offset; models systematic disparity.
    pub group_bias: BTreeMap<String, f64>,
    /// Few-shot sensitivity: logit shift per unit of (positive fraction - 0.5).
    pub fewshot_sensitivity: f64,
    /// Directive sensitivity: multiplier on parsed directive deltas.
    pub directive_sensitivity: f64,
    /// Size of the hashed weight table.
    pub hash_dim: usize,
    /// Scales all token weights; zero disables feature effects entirely.
    pub feature_scale: f64,
}

impl Default for SyntheticLLMConfig {
    fn default() -> Self {
        Self {
            weight_seed: 17,
            group_bias: BTreeMap::new(),
            fewshot_sensitivity: 2.0,
            directive_sensitivity: 1.0,
            hash_dim: 64,
            feature_scale: 1.0,
        }
    }
}

impl SyntheticLLMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hash_dim < 8 {
            return Err(Error::Config("hash_dim must be at least 8".to_string()));
        }
        for (name, value) in [
            ("fewshot_sensitivity", self.fewshot_sensitivity),
            ("directive_sensitivity", self.directive_sensitivity),
            ("feature_scale", self.feature_scale),
        ] {
            if !value.is_finite() || value < 0.0 && name != "feature_scale" {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn weight_table(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.weight_seed);
        (0..self.hash_dim)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect()
    }

    /// Signed hashed weight of one feature-value token.
    fn token_weight(&self, table: &[f64], token: &str) -> f64 {
        let h = fnv1a64(token.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        table[(h % self.hash_dim as u64) as usize] * sign * self.feature_scale
    }

    /// Feature logit of a serialized record, ignoring the protected feature:
    /// group effects are owned entirely by `group_bias`.
    pub fn feature_logit(&self, tokens: &[(String, String)], protected: &str) -> f64 {
        let table = self.weight_table();
        tokens
            .iter()
            .filter(|(feature, _)| feature != protected)
            .map(|(feature, value)| self.token_weight(&table, &format!("{feature}: {value}")))
            .sum()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A parsed logit-shift instruction, grammar `ADJUST <GROUP> BY <delta>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Directive {
    pub group: String,
    pub delta: f64,
}

impl Directive {
    /// Case-insensitive match, accepting the group name or its first letter.
    pub fn applies_to(&self, group: &str) -> bool {
        let d = normalize_text(&self.group);
        let g = normalize_text(group);
        d == g || (d.len() == 1 && g.starts_with(&d))
    }
}

fn directive_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\bADJUST\s+([A-Za-z][A-Za-z_-]*)\s+BY\s+([+-]?\d+(?:\.\d+)?)").unwrap()
    })
}

/// Extract every directive occurrence from free text.
pub fn parse_directives(text: &str) -> Vec<Directive> {
    directive_regex()
        .captures_iter(text)
        .map(|captures| Directive {
            group: captures[1].to_string(),
            delta: captures[2].parse().expect("regex guarantees a number"),
        })
        .collect()
}

/// Split a serialized record line back into (feature, value) tokens.
pub fn parse_record_tokens(record_text: &str) -> Result<Vec<(String, String)>> {
    let trimmed = record_text.strip_suffix('.').ok_or_else(|| {
        Error::Backend(format!(
            "record text does not end with '.': {record_text:?}"
        ))
    })?;
    trimmed
        .split("; ")
        .map(|token| {
            token
                .split_once(": ")
                .map(|(feature, value)| (feature.to_string(), value.to_string()))
                .ok_or_else(|| Error::Backend(format!("unparseable record token {token:?}")))
        })
        .collect()
}

#[derive(Debug, Clone)]
struct PromptParts {
    instructions: String,
    fewshot: Option<(usize, usize)>, // (count, positives)
    record_tokens: Vec<(String, String)>,
}

impl PromptParts {
    fn from_bundle(bundle: &PromptBundle) -> Result<Self> {
        let mut instructions = bundle.task_instructions.clone();
        if let Some(fairness) = &bundle.fairness_instruction {
            instructions.push(' ');
            instructions.push_str(fairness);
        }
        let fewshot = bundle.fewshot_block.as_ref().map(|examples| {
            let positives = examples
                .iter()
                .filter(|ex| bundle.answer_labels.label_for(&ex.answer_text) == Some(1))
                .count();
            (examples.len(), positives)
        });
        Ok(Self {
            instructions,
            fewshot,
            record_tokens: parse_record_tokens(&bundle.test_record_text)?,
        })
    }

    /// Structural parse of a rendered prompt: line 0 is the instruction
    /// header, the last line the question, and the middle lines hold
    /// (record, answer) pairs followed by the test record.
    fn from_user_text(
        user_text: &str,
        assistant_prefix: &str,
        labels: &AnswerLabels,
    ) -> Result<Self> {
        let lines: Vec<&str> = user_text.lines().collect();
        if lines.len() < 3 {
            return Err(Error::Backend(format!(
                "prompt has {} lines, expected at least 3",
                lines.len()
            )));
        }
        let middle = &lines[1..lines.len() - 1];
        let mut pairs = 0usize;
        let mut positives = 0usize;
        let mut test_record: Option<&str> = None;
        let mut i = 0;
        while i < middle.len() {
            let line = middle[i];
            let next_is_answer = middle
                .get(i + 1)
                .is_some_and(|next| next.starts_with(assistant_prefix));
            if next_is_answer {
                let answer = middle[i + 1];
                let content = answer
                    .split_once('[')
                    .and_then(|(_, rest)| rest.split_once(']'))
                    .map(|(inner, _)| inner)
                    .ok_or_else(|| {
                        Error::Backend(format!("few-shot answer without brackets: {answer:?}"))
                    })?;
                if normalize_text(content) == normalize_text(&labels.positive) {
                    positives += 1;
                }
                pairs += 1;
                i += 2;
            } else {
                if i != middle.len() - 1 {
                    return Err(Error::Backend(
                        "unexpected line between few-shot block and test record".to_string(),
                    ));
                }
                test_record = Some(line);
                i += 1;
            }
        }
        let record_text = test_record
            .ok_or_else(|| Error::Backend("prompt has no test record line".to_string()))?;
        Ok(Self {
            instructions: lines[0].to_string(),
            fewshot: if pairs > 0 {
                Some((pairs, positives))
            } else {
                None
            },
            record_tokens: parse_record_tokens(record_text)?,
        })
    }

    fn group(&self, schema: &DatasetSchema) -> Result<String> {
        self.record_tokens
            .iter()
            .find(|(feature, _)| *feature == schema.protected_attribute)
            .map(|(_, value)| normalize_group(value))
            .ok_or_else(|| {
                Error::Backend(format!(
                    "record lacks protected feature '{}'",
                    schema.protected_attribute
                ))
            })
    }
}

fn score_parts(
    parts: &PromptParts,
    config: &SyntheticLLMConfig,
    schema: &DatasetSchema,
) -> Result<f64> {
    let group = parts.group(schema)?;
    let mut logit = config.feature_logit(&parts.record_tokens, &schema.protected_attribute);
    logit += config.group_bias.get(&group).copied().unwrap_or(0.0);
    if let Some((count, positives)) = parts.fewshot {
        if count > 0 {
            let fraction = positives as f64 / count as f64;
            logit += config.fewshot_sensitivity * (fraction - 0.5);
        }
    }
    for directive in parse_directives(&parts.instructions) {
        if directive.applies_to(&group) {
            logit += config.directive_sensitivity * directive.delta;
        }
    }
    Ok(sigmoid(logit))
}

/// Score a prompt bundle directly; fully deterministic.
pub fn simulate_predict(
    bundle: &PromptBundle,
    config: &SyntheticLLMConfig,
    schema: &DatasetSchema,
) -> Result<PredictionOutcome> {
    let parts = PromptParts::from_bundle(bundle)?;
    let score = score_parts(&parts, config, schema)?;
    let label = u8::from(score >= 0.5);
    Ok(PredictionOutcome {
        label,
        score: Some(score),
        raw_text: format!("[{}]", bundle.answer_labels.text_for(label)),
        source: Source::Simulated,
    })
}

/// Reference refinement behavior: flip the samples nearest the decision
/// boundary (over-selected group down, under-selected group up, whichever
/// needs fewer flips) until the positive-rate gap is at most `threshold`,
/// then emit the strict `<id>: <label text>` grammar for the changed ids.
pub fn simulate_refinement(
    samples: &[ScoredPrediction],
    labels: &AnswerLabels,
    threshold: f64,
) -> String {
    boundary_flip_plan(samples, threshold)
        .into_iter()
        .map(|(id, label)| format!("{id}: {}\n", labels.text_for(label)))
        .collect()
}

/// The deterministic in-process chat backend.
pub struct SimulatorBackend {
    config: SyntheticLLMConfig,
    schema: Arc<DatasetSchema>,
    id: String,
}

impl SimulatorBackend {
    pub fn new(config: SyntheticLLMConfig, schema: Arc<DatasetSchema>) -> Result<Self> {
        config.validate()?;
        let id = format!("simulator:{}", config.weight_seed);
        Ok(Self { config, schema, id })
    }

    pub fn config(&self) -> &SyntheticLLMConfig {
        &self.config
    }

    fn refine(&self, request: &ChatRequest) -> Result<BackendResponse> {
        let threshold = Regex::new(r"at most\s+([0-9.]+)%")
            .unwrap()
            .captures(&request.user_text)
            .and_then(|c| c[1].parse::<f64>().ok())
            .map(|pct| pct / 100.0)
            .ok_or_else(|| {
                Error::Backend("refinement prompt does not state a target gap".to_string())
            })?;
        let labels = &request.candidate_labels;
        let mut samples = Vec::new();
        for line in request.user_text.lines() {
            let fields: Vec<&str> = line.split(" | ").collect();
            if fields.len() != 4 || fields[0].parse::<usize>().is_err() {
                continue;
            }
            let label = labels.label_for(fields[2]).ok_or_else(|| {
                Error::Backend(format!("unknown prediction label {:?}", fields[2]))
            })?;
            let tokens = parse_record_tokens(fields[3])?;
            let parts = PromptParts {
                instructions: String::new(),
                fewshot: None,
                record_tokens: tokens,
            };
            let score = score_parts(&parts, &self.config, &self.schema)?;
            samples.push(ScoredPrediction {
                group: fields[1].to_string(),
                score,
                label,
            });
        }
        Ok(BackendResponse::Generated {
            text: simulate_refinement(&samples, labels, threshold),
        })
    }
}

impl ChatBackend for SimulatorBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<BackendResponse> {
        if request.user_text.starts_with(REFINEMENT_HEADER) {
            return self.refine(request);
        }
        let parts = PromptParts::from_user_text(
            &request.user_text,
            &request.assistant_prefix,
            &request.candidate_labels,
        )?;
        let score = score_parts(&parts, &self.config, &self.schema)?;
        Ok(BackendResponse::Likelihood { positive: score })
    }

    fn source_tag(&self) -> Source {
        Source::Simulated
    }
}

/// Deterministic stand-in for the meta-LLM: reads the latest selection rates
/// from the history and nudges a single group's logit toward parity with the
/// update `delta' = delta + eta * (rate_other - rate_target)`.
pub fn scripted_meta_propose(history: &CandidateHistory, eta: f64) -> Result<String> {
    let latest = history
        .candidates
        .last()
        .ok_or_else(|| Error::EmptyInput("scripted proposer needs history".to_string()))?;
    let (group_a, group_b) = latest.rates.group_names();
    let rate_a = latest
        .rates
        .rate(group_a)
        .ok_or_else(|| Error::MissingRate(group_a.to_string()))?;
    let rate_b = latest
        .rates
        .rate(group_b)
        .ok_or_else(|| Error::MissingRate(group_b.to_string()))?;
    let previous = parse_directives(&latest.text).into_iter().last();
    let (target, delta) = match previous {
        Some(directive) => {
            let target = if directive.applies_to(group_a) {
                group_a
            } else {
                group_b
            };
            (target.to_string(), directive.delta)
        }
        None => {
            let target = if rate_a <= rate_b { group_a } else { group_b };
            (target.to_string(), 0.0)
        }
    };
    let (rate_target, rate_other) = if target == group_a {
        (rate_a, rate_b)
    } else {
        (rate_b, rate_a)
    };
    let new_delta = delta + eta * (rate_other - rate_target);
    Ok(format!(
        "To balance selection rates, ADJUST {} BY {:+.2} when weighing this profile.",
        target.to_uppercase(),
        new_delta
    ))
}

/// [`crate::promptopt::MetaProposer`] backed by [`scripted_meta_propose`].
pub struct ScriptedProposer {
    pub eta: f64,
}

impl Default for ScriptedProposer {
    fn default() -> Self {
        Self { eta: 2.0 }
    }
}

impl crate::promptopt::MetaProposer for ScriptedProposer {
    fn propose(&self, _meta_prompt: &str, history: &CandidateHistory) -> Result<String> {
        scripted_meta_propose(history, self.eta)
    }
}

/// Offline synthetic dataset generation for demos and trend tests.
pub mod synthetic {
    use super::*;
    use crate::dataset::{FeatureKind, FeatureSpec, FieldValue};
    use crate::serializer::{PromptTemplate, TaskContext};

    pub const TEMPLATE_TEXT: &str = "You must follow the instructions to predict the outcome \
for a synthetic profile. {task_instructions}{fairness_instruction} You must provide an \
explanation and include answer enclosed in square brackets at the beginning of your response.\n\
{fewshot_block}{test_record}\n\
You must predict the outcome for the profile. Answer with one of the following: [high] or \
[low].\n===ASSISTANT===\nBased on the information provided the answer is\n";

    pub fn schema() -> DatasetSchema {
        let identity = |values: &[&str]| -> BTreeMap<String, String> {
            values
                .iter()
                .map(|v| (v.to_string(), v.to_string()))
                .collect()
        };
        DatasetSchema {
            name: "synthetic".to_string(),
            features: vec![
                FeatureSpec {
                    name: "color".to_string(),
                    kind: FeatureKind::Categorical,
                    decoder: Some(identity(&["red", "green", "blue", "yellow"])),
                    bin_edges: None,
                },
                FeatureSpec {
                    name: "shape".to_string(),
                    kind: FeatureKind::Categorical,
                    decoder: Some(identity(&["circle", "square", "triangle", "hexagon"])),
                    bin_edges: None,
                },
                FeatureSpec {
                    name: "size".to_string(),
                    kind: FeatureKind::Integer,
                    decoder: None,
                    bin_edges: None,
                },
                FeatureSpec {
                    name: "score".to_string(),
                    kind: FeatureKind::Continuous,
                    decoder: None,
                    bin_edges: None,
                },
                FeatureSpec {
                    name: "sex".to_string(),
                    kind: FeatureKind::Categorical,
                    decoder: Some(identity(&["female", "male"])),
                    bin_edges: None,
                },
            ],
            protected_attribute: "sex".to_string(),
            label_column: "outcome".to_string(),
            positive_label_code: "1".to_string(),
            negative_label_code: "0".to_string(),
            positive_label_text: "high".to_string(),
            negative_label_text: "low".to_string(),
            task_instructions: "Profiles with larger sizes, higher scores, and warmer colors \
tend to have high outcomes, while smaller and cooler profiles tend to have low outcomes."
                .to_string(),
        }
    }

    pub fn task_context() -> TaskContext {
        TaskContext::new(schema(), PromptTemplate::parse(TEMPLATE_TEXT).unwrap())
            .expect("synthetic template is valid")
    }

    /// Generate `n` records with labels equal to the unbiased simulator
    /// decision (the same hashed weights with zero group bias), so the
    /// ground truth is known exactly and independent of group.
    pub fn records(n: usize, seed: u64, llm: &SyntheticLLMConfig) -> Vec<Record> {
        let schema = schema();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let colors = ["red", "green", "blue", "yellow"];
        let shapes = ["circle", "square", "triangle", "hexagon"];
        (0..n)
            .map(|_| {
                let color = colors[rng.random_range(0..colors.len())];
                let shape = shapes[rng.random_range(0..shapes.len())];
                let size = rng.random_range(1..=6i64);
                let score = f64::from(rng.random_range(0..=100u32)) / 10.0;
                let sex = if rng.random_bool(0.5) {
                    "female"
                } else {
                    "male"
                };
                let mut values = BTreeMap::new();
                values.insert(
                    "color".to_string(),
                    FieldValue::Categorical {
                        code: color.to_string(),
                        display: color.to_string(),
                    },
                );
                values.insert(
                    "shape".to_string(),
                    FieldValue::Categorical {
                        code: shape.to_string(),
                        display: shape.to_string(),
                    },
                );
                values.insert("size".to_string(), FieldValue::Integer(size));
                values.insert("score".to_string(), FieldValue::Continuous(score));
                values.insert(
                    "sex".to_string(),
                    FieldValue::Categorical {
                        code: sex.to_string(),
                        display: sex.to_string(),
                    },
                );
                let record = Record::new(&schema, values, sex.to_string(), None).unwrap();
                let tokens = parse_record_tokens(
                    &crate::serializer::serialize_record(&record, &schema).unwrap(),
                )
                .unwrap();
                let label =
                    u8::from(llm.feature_logit(&tokens, &schema.protected_attribute) >= 0.0);
                record.with_label(Some(label))
            })
            .collect()
    }

    /// Write a complete runnable bundle (schema, template, CSV) to `dir`.
    pub fn write_bundle(
        dir: &Path,
        n: usize,
        seed: u64,
        llm: &SyntheticLLMConfig,
    ) -> Result<(std::path::PathBuf, std::path::PathBuf, std::path::PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let schema = schema();
        let schema_path = dir.join("synthetic_schema.json");
        std::fs::write(&schema_path, serde_json::to_string_pretty(&schema)?)?;
        let template_path = dir.join("synthetic_template.txt");
        std::fs::write(&template_path, TEMPLATE_TEXT)?;
        let csv_path = dir.join("synthetic_data.csv");
        let mut writer = csv::Writer::from_path(&csv_path)?;
        let mut header: Vec<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
        header.push(&schema.label_column);
        writer.write_record(&header)?;
        for record in records(n, seed, llm) {
            writer.write_record(record.raw_fields(&schema))?;
        }
        writer.flush()?;
        Ok((schema_path, template_path, csv_path))
    }
}
