//! Prompt construction: record-to-text serialization, prediction prompts
//! rendered from per-dataset golden templates, and batch refinement prompts.
//!
//! Templates are UTF-8 text files with four named placeholders that must
//! appear exactly once, in order: `{task_instructions}`,
//! `{fairness_instruction}`, `{fewshot_block}`, `{test_record}`. A line
//! containing only `===ASSISTANT===` separates the user text from the
//! assistant prefix. Rendering is pure string assembly, so identical bundles
//! always produce identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSchema, Record};
use crate::error::{Error, Result};
use crate::metrics::GroupRates;

/// The two answer texts the model must choose between.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerLabels {
    pub positive: String,
    pub negative: String,
}

impl AnswerLabels {
    pub fn from_schema(schema: &DatasetSchema) -> Self {
        Self {
            positive: schema.positive_label_text.clone(),
            negative: schema.negative_label_text.clone(),
        }
    }

    pub fn text_for(&self, label: u8) -> &str {
        if label == 1 {
            &self.positive
        } else {
            &self.negative
        }
    }

    /// Label value for an answer text (exact match after trimming).
    pub fn label_for(&self, text: &str) -> Option<u8> {
        let trimmed = text.trim();
        if trimmed == self.positive {
            Some(1)
        } else if trimmed == self.negative {
            Some(0)
        } else {
            None
        }
    }
}

const ASSISTANT_SEPARATOR: &str = "\n===ASSISTANT===\n";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    TaskInstructions,
    FairnessInstruction,
    FewshotBlock,
    TestRecord,
}

/// A parsed per-dataset prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
    question_text: String,
    assistant_prefix: String,
}

impl PromptTemplate {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (user, prefix) = text
            .split_once(ASSISTANT_SEPARATOR)
            .ok_or_else(|| Error::Template("missing ===ASSISTANT=== separator".to_string()))?;
        let assistant_prefix = prefix.trim_end_matches('\n').to_string();
        let placeholders = [
            ("{task_instructions}", Segment::TaskInstructions),
            ("{fairness_instruction}", Segment::FairnessInstruction),
            ("{fewshot_block}", Segment::FewshotBlock),
            ("{test_record}", Segment::TestRecord),
        ];
        let mut segments = Vec::new();
        let mut rest = user;
        for (marker, segment) in placeholders {
            if rest.matches(marker).count() != 1 {
                return Err(Error::Template(format!(
                    "placeholder {marker} must appear exactly once, in order"
                )));
            }
            let (before, after) = rest.split_once(marker).unwrap();
            if !before.is_empty() {
                segments.push(Segment::Text(before.to_string()));
            }
            segments.push(segment);
            rest = after;
        }
        let question_text = rest
            .strip_prefix('\n')
            .ok_or_else(|| {
                Error::Template(
                    "the question must start on the line after {test_record}".to_string(),
                )
            })?
            .to_string();
        segments.push(Segment::Text(format!("\n{question_text}")));
        Ok(Self {
            segments,
            question_text,
            assistant_prefix,
        })
    }

    pub fn question_text(&self) -> &str {
        &self.question_text
    }

    pub fn assistant_prefix(&self) -> &str {
        &self.assistant_prefix
    }
}

/// One rendered in-context example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub record_text: String,
    pub answer_text: String,
}

/// Everything needed to render one prediction prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    template: PromptTemplate,
    pub task_instructions: String,
    pub fairness_instruction: Option<String>,
    pub fewshot_block: Option<Vec<FewShotExample>>,
    pub test_record_text: String,
    pub question_text: String,
    pub answer_labels: AnswerLabels,
    pub assistant_prefix: String,
}

/// Schema plus template for one dataset: the factory for prompt bundles.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub schema: DatasetSchema,
    pub template: PromptTemplate,
}

impl TaskContext {
    pub fn new(schema: DatasetSchema, template: PromptTemplate) -> Result<Self> {
        let labels = AnswerLabels::from_schema(&schema);
        for label in [&labels.positive, &labels.negative] {
            let needle = format!("[{label}]");
            if template.question_text.matches(needle.as_str()).count() != 1 {
                return Err(Error::Template(format!(
                    "question must contain {needle} exactly once"
                )));
            }
        }
        Ok(Self { schema, template })
    }

    /// Load schema and template from their fixture files.
    pub fn load(schema_path: impl AsRef<Path>, template_path: impl AsRef<Path>) -> Result<Self> {
        Self::new(
            DatasetSchema::load(schema_path)?,
            PromptTemplate::load(template_path)?,
        )
    }

    pub fn answer_labels(&self) -> AnswerLabels {
        AnswerLabels::from_schema(&self.schema)
    }

    /// Assemble a bundle for one test record, with an optional fairness
    /// instruction and optional few-shot examples.
    pub fn bundle_for(
        &self,
        record: &Record,
        fairness_instruction: Option<&str>,
        fewshots: Option<Vec<FewShotExample>>,
    ) -> Result<PromptBundle> {
        let labels = self.answer_labels();
        if let Some(instruction) = fairness_instruction {
            if instruction.contains('\n') {
                return Err(Error::Template(
                    "fairness instruction must be a single line".to_string(),
                ));
            }
        }
        if let Some(examples) = &fewshots {
            for example in examples {
                if labels.label_for(&example.answer_text).is_none() {
                    return Err(Error::Template(format!(
                        "few-shot answer '{}' is not one of the answer labels",
                        example.answer_text
                    )));
                }
            }
        }
        Ok(PromptBundle {
            template: self.template.clone(),
            task_instructions: self.schema.task_instructions.clone(),
            fairness_instruction: fairness_instruction
                .filter(|t| !t.trim().is_empty())
                .map(str::to_string),
            fewshot_block: fewshots,
            test_record_text: serialize_record(record, &self.schema)?,
            question_text: self.template.question_text.clone(),
            answer_labels: labels,
            assistant_prefix: self.template.assistant_prefix.clone(),
        })
    }
}

/// Render a record as `name: value; name: value; ... name: value.` in schema
/// feature order, with decoded categorical values.
pub fn serialize_record(record: &Record, schema: &DatasetSchema) -> Result<String> {
    let mut parts = Vec::with_capacity(schema.features.len());
    for feature in &schema.features {
        let value = record.value(&feature.name).ok_or_else(|| {
            Error::Schema(format!("record is missing feature '{}'", feature.name))
        })?;
        parts.push(format!("{}: {}", feature.name, value.display_text()));
    }
    Ok(format!("{}.", parts.join("; ")))
}

/// Render the user text and assistant prefix for one prediction.
///
/// Layout: task preamble, instructions, the fairness instruction when
/// present, the bracket directive, few-shot examples when present, the test
/// record, and the question naming both bracketed labels.
pub fn build_prediction_prompt(bundle: &PromptBundle) -> (String, String) {
    let fairness = bundle
        .fairness_instruction
        .as_deref()
        .map(|t| format!(" {t}"))
        .unwrap_or_default();
    let fewshot = bundle
        .fewshot_block
        .as_deref()
        .map(|examples| {
            examples
                .iter()
                .map(|ex| {
                    format!(
                        "{}\n{} [{}]\n",
                        ex.record_text, bundle.assistant_prefix, ex.answer_text
                    )
                })
                .collect::<String>()
        })
        .unwrap_or_default();
    let mut user = String::new();
    for segment in &bundle.template.segments {
        match segment {
            Segment::Text(t) => user.push_str(t),
            Segment::TaskInstructions => user.push_str(&bundle.task_instructions),
            Segment::FairnessInstruction => user.push_str(&fairness),
            Segment::FewshotBlock => user.push_str(&fewshot),
            Segment::TestRecord => user.push_str(&bundle.test_record_text),
        }
    }
    (user, bundle.assistant_prefix.clone())
}

/// First line of every refinement prompt; backends use it to tell refinement
/// requests apart from prediction requests.
pub const REFINEMENT_HEADER: &str =
    "You are reviewing a batch of predictions for demographic parity.";

/// Render a gap as a percentage without float noise ("15", "2.5").
pub fn gap_percent(gap: f64) -> String {
    let v = (gap * 100.0 * 1e9).round() / 1e9;
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Build the batch refinement prompt: per-group positive rates, the parity
/// target, one enumerated line per sample, and the strict answer grammar
/// (one `<id>: <label text>` line per changed sample).
pub fn build_refinement_prompt(
    batch_records: &[Record],
    predictions: &[u8],
    schema: &DatasetSchema,
    rates: &GroupRates,
    target_gap: f64,
) -> Result<String> {
    if batch_records.len() != predictions.len() {
        return Err(Error::Schema(format!(
            "{} predictions for {} records",
            predictions.len(),
            batch_records.len()
        )));
    }
    let labels = AnswerLabels::from_schema(schema);
    let pct = gap_percent(target_gap);
    let mut text = String::new();
    text.push_str(REFINEMENT_HEADER);
    text.push('\n');
    text.push_str("Positive-prediction rates by group: ");
    let rate_parts: Vec<String> = rates
        .iter()
        .map(|(group, _)| match rates.rate(group) {
            Some(rate) => format!("{group}: {rate:.4}"),
            None => format!("{group}: n/a"),
        })
        .collect();
    text.push_str(&rate_parts.join("; "));
    text.push_str(".\n");
    text.push_str(&format!(
        "Predictions must be adjusted when the difference in positive rates across groups exceeds {pct}%.\n"
    ));
    text.push_str("Samples (id | group | prediction | features):\n");
    for (id, (record, prediction)) in batch_records.iter().zip(predictions).enumerate() {
        text.push_str(&format!(
            "{id} | {} | {} | {}\n",
            record.group(),
            labels.text_for(*prediction),
            serialize_record(record, schema)?
        ));
    }
    text.push_str(&format!(
        "Identify the individuals from both groups that are near the decision boundary and flip \
their labels so that the gap in positive rates is at most {pct}%. Keep every other prediction \
unchanged. Respond with one line per changed sample in the form \"<id>: <label text>\", where \
<label text> is \"{}\" or \"{}\", and nothing else.",
        labels.positive, labels.negative
    ));
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_csv;
    use crate::metrics::selection_rates;
    use std::path::PathBuf;

    fn fixture(rel: &str) -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("fixtures")
            .join(rel)
    }

    fn adult() -> (TaskContext, Vec<Record>) {
        let ctx = TaskContext::load(
            fixture("schemas/adult.json"),
            fixture("templates/adult.txt"),
        )
        .unwrap();
        let records = load_csv(fixture("data/adult.csv"), &ctx.schema).unwrap();
        (ctx, records)
    }

    fn german() -> (TaskContext, Vec<Record>) {
        let ctx = TaskContext::load(
            fixture("schemas/german_credit.json"),
            fixture("templates/german_credit.txt"),
        )
        .unwrap();
        let records = load_csv(fixture("data/german_credit.csv"), &ctx.schema).unwrap();
        (ctx, records)
    }

    fn read_golden(rel: &str) -> (String, String) {
        let text = std::fs::read_to_string(fixture(rel)).unwrap();
        let (user, prefix) = text.split_once(ASSISTANT_SEPARATOR).unwrap();
        (user.to_string(), prefix.trim_end_matches('\n').to_string())
    }

    #[test]
    fn adult_record_serialization_matches_sample_line() {
        let (ctx, records) = adult();
        let text = serialize_record(&records[0], &ctx.schema).unwrap();
        assert_eq!(
            text,
            "workclass:  Private; hours-per-week: 40; sex:  Male; age: 38; occupation:  \
Craft-repair; capital-loss: 0; education:  HS-grad; capital-gain: 0; marital-status:  \
Divorced; relationship:  Not-in-family."
        );
    }

    #[test]
    fn german_record_serialization_matches_sample_line() {
        let (ctx, records) = german();
        let text = serialize_record(&records[0], &ctx.schema).unwrap();
        assert_eq!(
            text,
            "age: 36.0; sex: male; job: skilled; housing: own; savings  status: no known \
savings; checking status: 0<=X<200; credit amount: 2181.0; duration: 30.0; purpose: new car."
        );
    }

    #[test]
    fn single_feature_record() {
        let schema: DatasetSchema = serde_json::from_str(
            r#"{
                "name": "mini",
                "features": [
                    {"name": "age", "kind": "integer"},
                    {"name": "sex", "kind": "categorical",
                     "decoder": {"m": "male", "f": "female"}}
                ],
                "protected_attribute": "sex",
                "label_column": "y",
                "positive_label_code": "1",
                "negative_label_code": "0",
                "positive_label_text": "yes",
                "negative_label_text": "no",
                "task_instructions": "Predict."
            }"#,
        )
        .unwrap();
        schema.validate().unwrap();
        let records =
            crate::dataset::load_csv_reader("age,sex,y\n36,m,1\n".as_bytes(), &schema).unwrap();
        let mini = DatasetSchema {
            features: schema.features[..1].to_vec(),
            ..schema.clone()
        };
        let text = serialize_record(&records[0], &mini).unwrap();
        assert_eq!(text, "age: 36.");
    }

    #[test]
    fn adult_default_prompt_matches_golden() {
        let (ctx, records) = adult();
        let bundle = ctx.bundle_for(&records[0], None, None).unwrap();
        let (user, prefix) = build_prediction_prompt(&bundle);
        let (expected_user, expected_prefix) = read_golden("golden/adult_default.txt");
        assert_eq!(user, expected_user);
        assert_eq!(prefix, expected_prefix);
    }

    #[test]
    fn german_default_prompt_matches_golden() {
        let (ctx, records) = german();
        let bundle = ctx.bundle_for(&records[0], None, None).unwrap();
        let (user, prefix) = build_prediction_prompt(&bundle);
        let (expected_user, expected_prefix) = read_golden("golden/german_default.txt");
        assert_eq!(user, expected_user);
        assert_eq!(prefix, expected_prefix);
    }

    #[test]
    fn acs_default_prompts_match_goldens() {
        for (schema, template, data, golden) in [
            (
                "schemas/acs_income.json",
                "templates/acs_income.txt",
                "data/acs_income.csv",
                "golden/acs_income_default.txt",
            ),
            (
                "schemas/acs_coverage.json",
                "templates/acs_coverage.txt",
                "data/acs_coverage.csv",
                "golden/acs_coverage_default.txt",
            ),
        ] {
            let ctx = TaskContext::load(fixture(schema), fixture(template)).unwrap();
            let records = load_csv(fixture(data), &ctx.schema).unwrap();
            let bundle = ctx.bundle_for(&records[0], None, None).unwrap();
            let (user, prefix) = build_prediction_prompt(&bundle);
            let (expected_user, expected_prefix) = read_golden(golden);
            assert_eq!(user, expected_user, "{golden}");
            assert_eq!(prefix, expected_prefix, "{golden}");
        }
    }

    #[test]
    fn fixture_csv_round_trips_field_for_field() {
        let (ctx, records) = adult();
        let source = std::fs::read_to_string(fixture("data/adult.csv")).unwrap();
        for (line, record) in source.lines().skip(1).zip(&records) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(record.raw_fields(&ctx.schema), fields);
        }
    }

    #[test]
    fn fairness_instruction_sits_between_instructions_and_directive() {
        let (ctx, records) = adult();
        let instruction = "Ignore sex completely when making predictions";
        let bundle = ctx
            .bundle_for(&records[0], Some(instruction), None)
            .unwrap();
        let (user, _) = build_prediction_prompt(&bundle);
        let expected = format!(
            "{} {instruction} You must provide an explanation",
            ctx.schema.task_instructions
        );
        assert!(user.contains(&expected), "got:\n{user}");
    }

    #[test]
    fn fewshot_pairs_render_before_test_record() {
        let (ctx, records) = adult();
        let examples = vec![
            FewShotExample {
                record_text: serialize_record(&records[1], &ctx.schema).unwrap(),
                answer_text: "greater than 50K".to_string(),
            },
            FewShotExample {
                record_text: serialize_record(&records[2], &ctx.schema).unwrap(),
                answer_text: "less than or equal to 50K".to_string(),
            },
        ];
        let bundle = ctx
            .bundle_for(&records[0], None, Some(examples.clone()))
            .unwrap();
        let (user, _) = build_prediction_prompt(&bundle);
        let lines: Vec<&str> = user.lines().collect();
        // header, then (record, answer) per example, then test record, question.
        assert_eq!(lines.len(), 3 + 2 * examples.len());
        assert_eq!(lines[1], examples[0].record_text);
        assert_eq!(
            lines[2],
            "Based on the information provided the answer is [greater than 50K]"
        );
        assert_eq!(lines[3], examples[1].record_text);
        assert_eq!(lines[5], bundle.test_record_text);
    }

    #[test]
    fn fewshot_answer_must_be_a_label() {
        let (ctx, records) = adult();
        let bad = vec![FewShotExample {
            record_text: "age: 1.".to_string(),
            answer_text: "maybe".to_string(),
        }];
        assert!(ctx.bundle_for(&records[0], None, Some(bad)).is_err());
    }

    #[test]
    fn refinement_prompt_contains_rates_threshold_and_lines() {
        let (ctx, records) = german();
        let batch: Vec<Record> = records.iter().cloned().cycle().take(40).collect();
        let predictions: Vec<u8> = batch
            .iter()
            .enumerate()
            .map(|(i, r)| u8::from(r.group() == "male" && i % 2 == 0 || i % 5 == 0))
            .collect();
        let rates = selection_rates(
            predictions.iter().zip(&batch).map(|(p, r)| (*p, r.group())),
            ("female", "male"),
        )
        .unwrap();
        let prompt =
            build_refinement_prompt(&batch, &predictions, &ctx.schema, &rates, 0.15).unwrap();
        assert!(prompt.starts_with(REFINEMENT_HEADER));
        assert!(prompt.contains("exceeds 15%"));
        assert!(prompt.contains("at most 15%"));
        for (group, _) in rates.iter() {
            let rate = rates.rate(group).unwrap();
            assert!(prompt.contains(&format!("{group}: {rate:.4}")));
        }
        // Exactly 40 enumerated sample lines.
        let sample_lines = prompt
            .lines()
            .filter(|l| {
                l.split(" | ")
                    .next()
                    .is_some_and(|id| id.parse::<usize>().is_ok())
            })
            .count();
        assert_eq!(sample_lines, 40);
    }

    #[test]
    fn refinement_prompt_renders_even_when_within_gap() {
        let (ctx, records) = german();
        let batch = records[..4].to_vec();
        let predictions = vec![1, 1, 0, 0];
        let rates = selection_rates(
            predictions.iter().zip(&batch).map(|(p, r)| (*p, r.group())),
            ("female", "male"),
        )
        .unwrap();
        let prompt =
            build_refinement_prompt(&batch, &predictions, &ctx.schema, &rates, 0.15).unwrap();
        assert!(prompt.contains("Samples"));
    }

    #[test]
    fn gap_percent_rendering() {
        assert_eq!(gap_percent(0.15), "15");
        assert_eq!(gap_percent(0.05), "5");
        assert_eq!(gap_percent(0.125), "12.5");
    }

    #[test]
    fn template_rejects_missing_placeholder() {
        let text =
            "hello {task_instructions}\n{test_record}\nq [a] or [b].\n===ASSISTANT===\nprefix\n";
        assert!(matches!(
            PromptTemplate::parse(text),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn question_must_contain_each_label_once() {
        let (ctx, _) = adult();
        let mut schema = ctx.schema.clone();
        schema.positive_label_text = "never mentioned".to_string();
        assert!(TaskContext::new(schema, ctx.template.clone()).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rendering_is_deterministic(
                fairness in proptest::option::of("[a-zA-Z ]{1,40}"),
                n_shots in 0usize..3,
            ) {
                let (ctx, records) = adult();
                let shots = if n_shots == 0 {
                    None
                } else {
                    Some(
                        (0..n_shots)
                            .map(|i| FewShotExample {
                                record_text: serialize_record(&records[i + 1], &ctx.schema)
                                    .unwrap(),
                                answer_text: "greater than 50K".to_string(),
                            })
                            .collect::<Vec<_>>(),
                    )
                };
                let fairness = fairness.as_deref().map(str::trim).filter(|s| !s.is_empty());
                let bundle_a = ctx.bundle_for(&records[0], fairness, shots.clone()).unwrap();
                let bundle_b = ctx.bundle_for(&records[0], fairness, shots).unwrap();
                prop_assert_eq!(
                    build_prediction_prompt(&bundle_a),
                    build_prediction_prompt(&bundle_b)
                );
            }

            #[test]
            fn question_contains_both_labels_exactly_once(record_idx in 0usize..16) {
                let (ctx, records) = adult();
                let bundle = ctx.bundle_for(&records[record_idx], None, None).unwrap();
                let (user, _) = build_prediction_prompt(&bundle);
                let question = user.lines().last().unwrap();
                prop_assert_eq!(question.matches("[greater than 50K]").count(), 1);
                prop_assert_eq!(question.matches("[less than or equal to 50K]").count(), 1);
            }

            #[test]
            fn serialization_follows_schema_order(record_idx in 0usize..12) {
                let (ctx, records) = german();
                let text = serialize_record(&records[record_idx], &ctx.schema).unwrap();
                let mut cursor = 0usize;
                for feature in &ctx.schema.features {
                    let marker = format!("{}: ", feature.name);
                    let pos = text[cursor..].find(&marker);
                    prop_assert!(pos.is_some(), "feature {} out of order", feature.name);
                    cursor += pos.unwrap() + marker.len();
                }
            }
        }
    }
}
