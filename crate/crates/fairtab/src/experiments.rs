//! Experiment orchestration: a single JSON configuration drives dataset
//! loading, backend construction, one of the seven methods, and persistence
//! of results.
//!
//! Every run writes a manifest first (so interrupted runs are detectable),
//! then `results.jsonl` plus per-method artifacts (`history.jsonl`,
//! `grid.csv`, `trace.csv`, `pareto.csv`, `soft_prompt.bin`) and a
//! human-readable `summary.md`. `results.jsonl` contains no timestamps, so
//! simulator-backed runs with the same config digest are byte-identical.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline;
use crate::dataset::{load_csv, split, Record, SplitPlan};
use crate::error::{Error, Result};
use crate::fewshot::{self, GridOptions, PseudoLabeledPool, SelectionStrategy};
use crate::metrics::{select_operating_point, EvalReport, EvalSample, TradeoffPoint};
use crate::model::{ChatRequest, HttpBackend, Predictor};
use crate::promptopt::{self, LlmMetaProposer, MetaProposer, OptimizeOptions};
use crate::selfrefine::{self, RefineOptions};
use crate::serializer::TaskContext;
use crate::simulator::{
    parse_record_tokens, ScriptedProposer, SimulatorBackend, SyntheticLLMConfig,
};
use crate::softprompt::{self, SoftPromptHeader, ToyLM, TrainConfig, TuneSample};
use crate::util::to_hex;

/// Which backend serves predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    /// The in-process deterministic simulator; no network access at all.
    Simulator {
        #[serde(flatten)]
        config: SyntheticLLMConfig,
    },
    /// OpenAI-style chat endpoint, configured through environment variables.
    Http { model: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Default,
    ManualPrompts,
    PromptOpt,
    FewshotGrid,
    Softprompt,
    SelfRefine,
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Default => "default",
            Method::ManualPrompts => "manual-prompts",
            Method::PromptOpt => "prompt-opt",
            Method::FewshotGrid => "fewshot-grid",
            Method::Softprompt => "softprompt",
            Method::SelfRefine => "self-refine",
            Method::Baseline => "baseline",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "default" => Method::Default,
            "manual-prompts" => Method::ManualPrompts,
            "prompt-opt" => Method::PromptOpt,
            "fewshot-grid" => Method::FewshotGrid,
            "softprompt" => Method::Softprompt,
            "self-refine" => Method::SelfRefine,
            "baseline" => Method::Baseline,
            other => return Err(Error::Config(format!("unknown method '{other}'"))),
        })
    }
}

/// Method parameters with paper-aligned defaults; unused fields are ignored
/// by methods that do not need them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodParams {
    pub iterations: usize,
    pub k: usize,
    pub dp_min: f64,
    pub batch_size: usize,
    pub trigger_gap: f64,
    pub target_gap: f64,
    pub parallelism: usize,
    pub manual_prompts: Vec<String>,
    pub selection: SelectionStrategy,
    pub lambda: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub softprompt_batch: usize,
    pub embed_dim: usize,
    pub vocab_dim: usize,
    pub max_pool: usize,
}

impl Default for MethodParams {
    fn default() -> Self {
        Self {
            iterations: 100,
            k: 10,
            dp_min: 0.9,
            batch_size: 40,
            trigger_gap: 0.15,
            target_gap: 0.15,
            parallelism: 1,
            manual_prompts: promptopt::MANUAL_FAIR_PROMPTS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            selection: SelectionStrategy::NearestNeighbor,
            lambda: 0.5,
            epochs: 20,
            warmup_epochs: 3,
            learning_rate: 0.05,
            softprompt_batch: 50,
            embed_dim: 16,
            vocab_dim: 512,
            max_pool: 1000,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One experiment: dataset, backend, method, and parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema: PathBuf,
    pub template: PathBuf,
    pub data: PathBuf,
    pub backend: BackendSpec,
    pub method: Method,
    pub split: SplitPlan,
    #[serde(default)]
    pub params: MethodParams,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(config)
    }

    /// Validate method parameters before any model call.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if p.parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&p.dp_min) {
            return Err(Error::Config("dp_min must lie in [0, 1]".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".to_string()));
        }
        match self.method {
            Method::FewshotGrid => {
                if p.k == 0 {
                    return Err(Error::Config("fewshot-grid needs k >= 1".to_string()));
                }
            }
            Method::SelfRefine => {
                if p.batch_size == 0 {
                    return Err(Error::Config(
                        "self-refine needs batch_size >= 1".to_string(),
                    ));
                }
                for (name, gap) in [("trigger_gap", p.trigger_gap), ("target_gap", p.target_gap)] {
                    if !(0.0..=1.0).contains(&gap) {
                        return Err(Error::Config(format!("{name} must lie in [0, 1]")));
                    }
                }
            }
            Method::Softprompt => {
                if p.warmup_epochs >= p.epochs {
                    return Err(Error::Config(
                        "softprompt needs warmup_epochs < epochs".to_string(),
                    ));
                }
                if p.lambda < 0.0 {
                    return Err(Error::Config("lambda must be >= 0".to_string()));
                }
            }
            Method::ManualPrompts if p.manual_prompts.is_empty() => {
                return Err(Error::Config(
                    "manual-prompts needs at least one prompt".to_string(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Stable digest over everything that affects results. The output
    /// directory and cache location are excluded: they change where results
    /// land, not what they contain.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct DigestView<'a> {
            schema: &'a PathBuf,
            template: &'a PathBuf,
            data: &'a PathBuf,
            backend: &'a BackendSpec,
            method: &'a Method,
            split: &'a SplitPlan,
            params: &'a MethodParams,
            seeds: &'a [u64],
        }
        let view = DigestView {
            schema: &self.schema,
            template: &self.template,
            data: &self.data,
            backend: &self.backend,
            method: &self.method,
            split: &self.split,
            params: &self.params,
            seeds: &self.seeds,
        };
        let canonical = serde_json::to_string(&view).expect("config serializes");
        to_hex(&Sha256::digest(canonical.as_bytes()))
    }
}

/// Summary of one completed run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config_digest: String,
    pub version: String,
    pub method: String,
    pub dataset: String,
    pub out_dir: PathBuf,
    pub wall_ms: u128,
    pub cache_hits: u64,
    pub backend_calls: u64,
    pub network_calls: u64,
    pub result_lines: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config_digest: String,
    version: String,
    method: String,
    dataset: String,
    started_unix: u64,
    finished: bool,
    wall_ms: Option<u128>,
    cache_hits: Option<u64>,
    backend_calls: Option<u64>,
    network_calls: Option<u64>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn full_eval_report(
    ctx: &TaskContext,
    predictor: &Predictor,
    records: &[Record],
    instruction: Option<&str>,
    parallelism: usize,
) -> Result<EvalReport> {
    let requests: Vec<ChatRequest> = records
        .iter()
        .map(|record| {
            let bundle = ctx.bundle_for(record, instruction, None)?;
            Ok(ChatRequest::from_bundle(&bundle, 256, 0.0))
        })
        .collect::<Result<_>>()?;
    let outcomes = predictor.batch_predict(&requests, parallelism);
    let samples: Vec<EvalSample> = records
        .iter()
        .zip(outcomes)
        .map(|(record, outcome)| EvalSample {
            prediction: match outcome {
                Ok(o) => Some(o.label),
                Err(e) => {
                    log::warn!("abstention: {e}");
                    None
                }
            },
            group: record.group().to_string(),
            label: record.label(),
        })
        .collect();
    let declared = ctx.schema.protected_values();
    EvalReport::compute(&samples, (&declared.0, &declared.1))
}

fn result_line(
    dataset: &str,
    method: Method,
    variant: &str,
    digest: &str,
    report: serde_json::Value,
    extra: &[(&str, serde_json::Value)],
) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    map.insert("dataset".to_string(), serde_json::json!(dataset));
    map.insert("method".to_string(), serde_json::json!(method.name()));
    map.insert("variant".to_string(), serde_json::json!(variant));
    map.insert("config_digest".to_string(), serde_json::json!(digest));
    map.insert("report".to_string(), report);
    for (key, value) in extra {
        map.insert((*key).to_string(), value.clone());
    }
    serde_json::Value::Object(map)
}

fn write_pareto_csv(path: &Path, points: &[TradeoffPoint], chosen: &str) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["tag", "accuracy", "dp_ratio", "selected"])?;
    for point in points {
        writer.write_record([
            point.tag.clone(),
            point.accuracy.to_string(),
            point.dp_ratio.to_string(),
            (point.tag == chosen).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Execute one configured experiment end to end.
pub fn run(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let started = std::time::Instant::now();
    let digest = config.digest();
    std::fs::create_dir_all(&config.out_dir)?;

    let ctx = TaskContext::load(&config.schema, &config.template)?;
    let dataset_name = ctx.schema.name.clone();
    let manifest_path = config.out_dir.join("manifest.json");
    let mut manifest = Manifest {
        config_digest: digest.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        method: config.method.name().to_string(),
        dataset: dataset_name.clone(),
        started_unix: now_unix(),
        finished: false,
        wall_ms: None,
        cache_hits: None,
        backend_calls: None,
        network_calls: None,
    };
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    let records = load_csv(&config.data, &ctx.schema)?;
    let splits = split(&records, &config.split)?;
    let schema_arc = Arc::new(ctx.schema.clone());
    let backend: Arc<dyn crate::model::ChatBackend> = match &config.backend {
        BackendSpec::Simulator { config: sim } => {
            Arc::new(SimulatorBackend::new(sim.clone(), schema_arc)?)
        }
        BackendSpec::Http { model } => Arc::new(HttpBackend::from_env(model)?),
    };
    let mut predictor = Predictor::new(backend);
    if let Some(cache_path) = &config.cache_path {
        predictor = predictor.with_cache_file(cache_path)?;
    }

    let lines = dispatch(config, &ctx, &predictor, &splits, &dataset_name, &digest)?;

    let results_path = config.out_dir.join("results.jsonl");
    let mut results_file = std::fs::File::create(&results_path)?;
    for line in &lines {
        writeln!(results_file, "{}", serde_json::to_string(line)?)?;
    }
    std::fs::write(
        config.out_dir.join("summary.md"),
        render_summary(&dataset_name, &lines)?,
    )?;

    let (cache_hits, backend_calls, network_calls) = predictor.stats.snapshot();
    manifest.finished = true;
    manifest.wall_ms = Some(started.elapsed().as_millis());
    manifest.cache_hits = Some(cache_hits);
    manifest.backend_calls = Some(backend_calls);
    manifest.network_calls = Some(network_calls);
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    Ok(RunRecord {
        config_digest: digest,
        version: env!("CARGO_PKG_VERSION").to_string(),
        method: config.method.name().to_string(),
        dataset: dataset_name,
        out_dir: config.out_dir.clone(),
        wall_ms: started.elapsed().as_millis(),
        cache_hits,
        backend_calls,
        network_calls,
        result_lines: lines.len(),
    })
}

fn dispatch(
    config: &ExperimentConfig,
    ctx: &TaskContext,
    predictor: &Predictor,
    splits: &crate::dataset::Splits,
    dataset: &str,
    digest: &str,
) -> Result<Vec<serde_json::Value>> {
    let p = &config.params;
    match config.method {
        Method::Default => {
            let report = full_eval_report(ctx, predictor, &splits.eval, None, p.parallelism)?;
            Ok(vec![result_line(
                dataset,
                config.method,
                "default",
                digest,
                report.to_json(),
                &[],
            )])
        }
        Method::ManualPrompts | Method::PromptOpt => {
            let options = OptimizeOptions {
                iterations: p.iterations,
                rng_seed: config.seeds[0],
                parallelism: p.parallelism,
                max_tokens: 256,
            };
            let history = if config.method == Method::ManualPrompts {
                promptopt::evaluate_manual(
                    ctx,
                    predictor,
                    &p.manual_prompts,
                    &splits.validation,
                    &splits.eval,
                    &options,
                )?
            } else {
                let scripted = ScriptedProposer::default();
                let llm_meta;
                let meta: &dyn MetaProposer = match &config.backend {
                    BackendSpec::Simulator { .. } => &scripted,
                    BackendSpec::Http { model } => {
                        llm_meta = LlmMetaProposer::new(Arc::new(Predictor::new(Arc::new(
                            HttpBackend::from_env(model)?,
                        ))));
                        &llm_meta
                    }
                };
                promptopt::optimize(
                    ctx,
                    predictor,
                    meta,
                    &splits.validation,
                    &splits.eval,
                    &options,
                )?
            };
            promptopt::save_history(config.out_dir.join("history.jsonl"), &history)?;
            let summary = promptopt::report(&history, p.dp_min)?;
            write_pareto_csv(
                &config.out_dir.join("pareto.csv"),
                &summary.pareto,
                &summary.operating_point.point.tag,
            )?;
            let chosen = history
                .candidates
                .iter()
                .find(|c| c.tag() == summary.operating_point.point.tag)
                .expect("operating point comes from the history");
            let instruction = if chosen.text.is_empty() {
                None
            } else {
                Some(chosen.text.as_str())
            };
            let report =
                full_eval_report(ctx, predictor, &splits.eval, instruction, p.parallelism)?;
            Ok(vec![result_line(
                dataset,
                config.method,
                "operating-point",
                digest,
                report.to_json(),
                &[
                    ("instruction", serde_json::json!(chosen.text)),
                    (
                        "constraint_met",
                        serde_json::json!(summary.operating_point.constraint_met),
                    ),
                    (
                        "validation_accuracy",
                        serde_json::json!(chosen.validation_accuracy),
                    ),
                    ("most_fair", serde_json::json!(summary.most_fair.text)),
                    ("least_fair", serde_json::json!(summary.least_fair.text)),
                ],
            )])
        }
        Method::FewshotGrid => run_fewshot_grid(config, ctx, predictor, splits, dataset, digest),
        Method::Softprompt => run_softprompt(config, ctx, predictor, splits, dataset, digest),
        Method::SelfRefine => {
            let report = selfrefine::run_batched(
                &splits.eval,
                ctx,
                predictor,
                &RefineOptions {
                    batch_size: p.batch_size,
                    trigger_gap: p.trigger_gap,
                    target_gap: p.target_gap,
                    max_tokens: 2048,
                    parallelism: p.parallelism,
                },
            )?;
            Ok(vec![
                result_line(
                    dataset,
                    config.method,
                    "before",
                    digest,
                    report.before.to_json(),
                    &[],
                ),
                result_line(
                    dataset,
                    config.method,
                    "after",
                    digest,
                    report.after.to_json(),
                    &[
                        ("refined_batches", serde_json::json!(report.refined_batches)),
                        (
                            "rejected_batches",
                            serde_json::json!(report.rejected_batches),
                        ),
                    ],
                ),
            ])
        }
        Method::Baseline => {
            let declared = ctx.schema.protected_values();
            let declared = (declared.0.as_str(), declared.1.as_str());
            let scorer = baseline::fit_logistic(
                &splits.validation,
                &ctx.schema,
                &baseline::FitOptions::default(),
            )?;
            let policy =
                baseline::grid_search_thresholds(&scorer, &splits.validation, p.dp_min, declared)?;
            std::fs::write(
                config.out_dir.join("baseline_policy.json"),
                serde_json::to_string_pretty(&policy)?,
            )?;
            let report = baseline::evaluate_policy(&scorer, &policy, &splits.eval, declared)?;
            Ok(vec![result_line(
                dataset,
                config.method,
                "baseline",
                digest,
                report.to_json(),
                &[(
                    "thresholds",
                    serde_json::to_value(&policy.threshold_by_group)?,
                )],
            )])
        }
    }
}

fn run_fewshot_grid(
    config: &ExperimentConfig,
    ctx: &TaskContext,
    predictor: &Predictor,
    splits: &crate::dataset::Splits,
    dataset: &str,
    digest: &str,
) -> Result<Vec<serde_json::Value>> {
    let p = &config.params;
    let pool = PseudoLabeledPool::build(&splits.pool, ctx, predictor, p.parallelism)?;
    let options = GridOptions {
        k: p.k,
        strategy: p.selection,
        parallelism: p.parallelism,
    };
    let outcome = fewshot::run_grid(&splits.eval, &pool, ctx, predictor, &config.seeds, &options)?;
    fewshot::write_grid_csv(config.out_dir.join("grid.csv"), &outcome)?;

    // Validation accuracy per pair drives operating-point selection, exactly
    // like prompt candidates; eval DP comes from the grid cells.
    let declared = ctx.schema.protected_values();
    let mut points = Vec::with_capacity(outcome.cells.len());
    for cell in &outcome.cells {
        let mut accuracies = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let mut requests = Vec::with_capacity(splits.validation.len());
            for (i, record) in splits.validation.iter().enumerate() {
                let fraction = if record.group() == declared.0 {
                    cell.pair.p_f
                } else {
                    cell.pair.p_m
                };
                let selected = fewshot::select_examples(
                    record,
                    &pool,
                    p.k,
                    fraction,
                    p.selection,
                    seed ^ (i as u64).wrapping_mul(0x100000001b3),
                )?;
                let block = fewshot::to_fewshot_block(&selected, ctx)?;
                let bundle = ctx.bundle_for(record, None, Some(block))?;
                requests.push(ChatRequest::from_bundle(&bundle, 256, 0.0));
            }
            let outcomes = predictor.batch_predict(&requests, p.parallelism);
            let correct = outcomes
                .iter()
                .zip(&splits.validation)
                .filter(|(o, r)| o.as_ref().ok().map(|p| p.label) == r.label())
                .count();
            accuracies.push(correct as f64 / splits.validation.len() as f64);
        }
        let val_acc = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        points.push(TradeoffPoint::new(
            val_acc,
            cell.mean_dp,
            format!("pf={},pm={}", cell.pair.p_f, cell.pair.p_m),
        ));
    }
    let operating = select_operating_point(&points, p.dp_min)?;
    write_pareto_csv(
        &config.out_dir.join("pareto.csv"),
        &crate::metrics::pareto_front(&points),
        &operating.point.tag,
    )?;
    // Headline report: mean eval metrics of the chosen pair across seeds.
    let chosen_rows: Vec<&fewshot::GridRow> = outcome
        .rows
        .iter()
        .filter(|row| format!("pf={},pm={}", row.pair.p_f, row.pair.p_m) == operating.point.tag)
        .collect();
    let mean_of = |extract: &dyn Fn(&EvalReport) -> Option<f64>| -> serde_json::Value {
        let values: Vec<f64> = chosen_rows
            .iter()
            .filter_map(|row| extract(&row.report))
            .collect();
        if values.is_empty() {
            serde_json::Value::Null
        } else {
            serde_json::json!(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let mut report = serde_json::Map::new();
    report.insert("accuracy".to_string(), mean_of(&|r| r.accuracy));
    report.insert("dp_ratio".to_string(), mean_of(&|r| Some(r.dp_ratio)));
    report.insert("eo_ratio".to_string(), mean_of(&|r| r.eo_ratio));
    for group in [&declared.0, &declared.1] {
        report.insert(format!("rate_{group}"), mean_of(&|r| r.rates.rate(group)));
    }
    report.insert(
        "n".to_string(),
        serde_json::json!(chosen_rows.first().map_or(0, |r| r.report.n)),
    );
    report.insert(
        "abstentions".to_string(),
        serde_json::json!(chosen_rows.first().map_or(0, |r| r.report.abstentions)),
    );
    Ok(vec![result_line(
        dataset,
        config.method,
        "operating-point",
        digest,
        serde_json::Value::Object(report),
        &[
            ("ratio_pair", serde_json::json!(operating.point.tag)),
            (
                "constraint_met",
                serde_json::json!(operating.constraint_met),
            ),
            (
                "validation_accuracy",
                serde_json::json!(operating.point.accuracy),
            ),
        ],
    )])
}

fn tune_samples(records: &[Record], ctx: &TaskContext, labels: &[u8]) -> Result<Vec<TuneSample>> {
    records
        .iter()
        .zip(labels)
        .map(|(record, label)| {
            let text = crate::serializer::serialize_record(record, &ctx.schema)?;
            let tokens = parse_record_tokens(&text)?
                .into_iter()
                .map(|(feature, value)| format!("{feature}: {value}"))
                .collect();
            Ok(TuneSample {
                tokens,
                group: record.group().to_string(),
                label: *label,
            })
        })
        .collect()
}

fn run_softprompt(
    config: &ExperimentConfig,
    ctx: &TaskContext,
    predictor: &Predictor,
    splits: &crate::dataset::Splits,
    dataset: &str,
    digest: &str,
) -> Result<Vec<serde_json::Value>> {
    let p = &config.params;
    let seed = config.seeds[0];
    // Pseudo-label the pool with the backend's zero-shot predictions.
    let pool_records: Vec<Record> = splits.pool.iter().take(p.max_pool).cloned().collect();
    if pool_records.is_empty() {
        return Err(Error::EmptyInput(
            "softprompt needs a nonempty pool split".to_string(),
        ));
    }
    let requests: Vec<ChatRequest> = pool_records
        .iter()
        .map(|record| {
            let bundle = ctx.bundle_for(record, None, None)?;
            Ok(ChatRequest::from_bundle(&bundle, 256, 0.0))
        })
        .collect::<Result<_>>()?;
    let outcomes = predictor.batch_predict(&requests, p.parallelism);
    let mut labeled_records = Vec::new();
    let mut pseudo_labels = Vec::new();
    for (record, outcome) in pool_records.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                labeled_records.push(record.clone());
                pseudo_labels.push(o.label);
            }
            Err(e) => log::warn!("pool record skipped (no pseudo-label): {e}"),
        }
    }
    let pool = tune_samples(&labeled_records, ctx, &pseudo_labels)?;
    let validation_labels: Vec<u8> = splits
        .validation
        .iter()
        .map(|r| r.label().unwrap_or(0))
        .collect();
    let validation = tune_samples(&splits.validation, ctx, &validation_labels)?;
    let eval_labels: Vec<u8> = splits.eval.iter().map(|r| r.label().unwrap_or(0)).collect();
    let eval = tune_samples(&splits.eval, ctx, &eval_labels)?;

    let mut model = ToyLM::new(p.vocab_dim, p.embed_dim, seed);
    model.init_soft_prompt_from_text(&ctx.schema.task_instructions);
    softprompt::pretrain_head(&mut model, &pool, 800, 1.0, 0.03)?;
    let train_config = TrainConfig {
        epochs: p.epochs,
        batch_size: p.softprompt_batch,
        learning_rate: p.learning_rate,
        warmup_epochs: p.warmup_epochs,
        penalty_weight: p.lambda,
        seed,
    };
    let trace = softprompt::tune(&mut model, &pool, &validation, &eval, &train_config)?;
    softprompt::write_trace_csv(config.out_dir.join("trace.csv"), &trace)?;

    // Pareto selection over epochs, exactly like prompt candidates.
    let points: Vec<TradeoffPoint> = trace
        .epochs
        .iter()
        .enumerate()
        .map(|(epoch, stats)| {
            TradeoffPoint::new(
                stats.validation_accuracy.unwrap_or(0.0),
                stats.dp_ratio.unwrap_or(0.0),
                format!("epoch-{epoch:02}"),
            )
        })
        .collect();
    let operating = select_operating_point(&points, p.dp_min)?;
    write_pareto_csv(
        &config.out_dir.join("pareto.csv"),
        &crate::metrics::pareto_front(&points),
        &operating.point.tag,
    )?;
    let chosen_epoch: usize = operating
        .point
        .tag
        .trim_start_matches("epoch-")
        .parse()
        .expect("epoch tags are well-formed");
    model.soft_prompt = trace.prompt_snapshots[chosen_epoch].clone();
    softprompt::save_soft_prompt(
        config.out_dir.join("soft_prompt.bin"),
        &model,
        &SoftPromptHeader {
            rows: softprompt::SOFT_PROMPT_ROWS,
            cols: p.embed_dim,
            seed,
            config_digest: digest.to_string(),
        },
    )?;
    // Headline: full eval metrics of the selected epoch's model.
    let declared = ctx.schema.protected_values();
    let samples: Vec<EvalSample> = eval
        .iter()
        .zip(&splits.eval)
        .map(|(sample, record)| EvalSample {
            prediction: Some(u8::from(softprompt::forward(&model, &sample.tokens) >= 0.5)),
            group: sample.group.clone(),
            label: record.label(),
        })
        .collect();
    let report = EvalReport::compute(&samples, (&declared.0, &declared.1))?;
    Ok(vec![result_line(
        dataset,
        config.method,
        "operating-point",
        digest,
        report.to_json(),
        &[
            ("epoch", serde_json::json!(chosen_epoch)),
            (
                "constraint_met",
                serde_json::json!(operating.constraint_met),
            ),
            (
                "pool_agreement",
                serde_json::json!(softprompt::pool_agreement(&model, &pool)),
            ),
        ],
    )])
}

fn format_metric(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.3}"),
        None => "-".to_string(),
    }
}

fn metric(line: &serde_json::Value, key: &str) -> Option<f64> {
    line.get("report")
        .and_then(|r| r.get(key))
        .and_then(serde_json::Value::as_f64)
}

/// Render a markdown comparison table (Acc / DP / EO per method variant),
/// flagging the best accuracy and best DP in bold.
pub fn render_summary(dataset: &str, lines: &[serde_json::Value]) -> Result<String> {
    let mut out =
        format!("# Results: {dataset}\n\n| Method | Acc | DP | EO |\n|---|---|---|---|\n");
    let best_acc = lines
        .iter()
        .filter_map(|l| metric(l, "accuracy"))
        .fold(f64::NEG_INFINITY, f64::max);
    let best_dp = lines
        .iter()
        .filter_map(|l| metric(l, "dp_ratio"))
        .fold(f64::NEG_INFINITY, f64::max);
    for line in lines {
        let method = line["method"].as_str().unwrap_or("?");
        let variant = line["variant"].as_str().unwrap_or("?");
        let name = if variant == method || variant == "default" || variant == "baseline" {
            method.to_string()
        } else {
            format!("{method} ({variant})")
        };
        let acc = metric(line, "accuracy");
        let dp = metric(line, "dp_ratio");
        let eo = metric(line, "eo_ratio");
        let acc_text = match acc {
            Some(v) if v == best_acc => format!("**{v:.3}**"),
            other => format_metric(other),
        };
        let dp_text = match dp {
            Some(v) if v == best_dp => format!("**{v:.3}**"),
            other => format_metric(other),
        };
        out.push_str(&format!(
            "| {name} | {acc_text} | {dp_text} | {} |\n",
            format_metric(eo)
        ));
    }
    Ok(out)
}

/// Merge the primary result lines of several runs into one comparison table.
/// All runs must come from the same dataset.
pub fn summarize(result_files: &[PathBuf]) -> Result<String> {
    use std::io::BufRead;
    let mut lines = Vec::new();
    let mut dataset: Option<String> = None;
    for path in result_files {
        let path = if path.is_dir() {
            path.join("results.jsonl")
        } else {
            path.clone()
        };
        let reader = std::io::BufReader::new(std::fs::File::open(&path)?);
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line)?;
            let line_dataset = value["dataset"].as_str().unwrap_or("?").to_string();
            match &dataset {
                None => dataset = Some(line_dataset),
                Some(existing) if *existing != line_dataset => {
                    return Err(Error::Config(format!(
                        "cannot summarize across datasets: '{existing}' vs '{line_dataset}'"
                    )));
                }
                _ => {}
            }
            lines.push(value);
        }
    }
    if lines.is_empty() {
        return Err(Error::EmptyInput("no result lines found".to_string()));
    }
    render_summary(dataset.as_deref().unwrap_or("?"), &lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::synthetic;
    use std::collections::BTreeMap;

    fn synthetic_config(dir: &Path, method: Method, n: usize) -> ExperimentConfig {
        let llm = SyntheticLLMConfig {
            group_bias: BTreeMap::from([("male".to_string(), 0.8), ("female".to_string(), -0.8)]),
            ..SyntheticLLMConfig::default()
        };
        let (schema, template, data) =
            synthetic::write_bundle(&dir.join("bundle"), n, 41, &llm).unwrap();
        ExperimentConfig {
            schema,
            template,
            data,
            backend: BackendSpec::Simulator { config: llm },
            method,
            split: SplitPlan {
                eval_size: n / 2,
                validation_size: n / 8,
                seed: 1,
            },
            params: MethodParams {
                iterations: 5,
                k: 4,
                parallelism: 2,
                ..MethodParams::default()
            },
            seeds: vec![0],
            out_dir: dir.join("out"),
            cache_path: None,
        }
    }

    #[test]
    fn default_run_produces_one_report_and_no_network() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(dir.path(), Method::Default, 80);
        let record = run(&config).unwrap();
        assert_eq!(record.result_lines, 1);
        assert_eq!(record.network_calls, 0);
        assert!(config.out_dir.join("results.jsonl").exists());
        assert!(config.out_dir.join("summary.md").exists());
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(config.out_dir.join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert!(manifest.finished);
        assert_eq!(manifest.config_digest, record.config_digest);
    }

    #[test]
    fn prompt_opt_history_has_iterations_plus_one_lines() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(dir.path(), Method::PromptOpt, 80);
        run(&config).unwrap();
        let history = std::fs::read_to_string(config.out_dir.join("history.jsonl")).unwrap();
        assert_eq!(history.lines().count(), config.params.iterations + 1);
        assert!(config.out_dir.join("pareto.csv").exists());
    }

    #[test]
    fn fewshot_grid_writes_36_rows_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(dir.path(), Method::FewshotGrid, 96);
        run(&config).unwrap();
        let grid = std::fs::read_to_string(config.out_dir.join("grid.csv")).unwrap();
        assert_eq!(grid.lines().count(), 1 + 36);
    }

    #[test]
    fn self_refine_emits_before_and_after() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = synthetic_config(dir.path(), Method::SelfRefine, 80);
        config.params.batch_size = 20;
        let record = run(&config).unwrap();
        assert_eq!(record.result_lines, 2);
        let results = std::fs::read_to_string(config.out_dir.join("results.jsonl")).unwrap();
        assert!(results.contains("\"variant\":\"before\""));
        assert!(results.contains("\"variant\":\"after\""));
    }

    #[test]
    fn softprompt_writes_trace_and_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = synthetic_config(dir.path(), Method::Softprompt, 120);
        config.params.epochs = 6;
        config.params.warmup_epochs = 2;
        run(&config).unwrap();
        let trace = std::fs::read_to_string(config.out_dir.join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + 6);
        assert!(config.out_dir.join("soft_prompt.bin").exists());
    }

    #[test]
    fn baseline_emits_policy_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = synthetic_config(dir.path(), Method::Baseline, 120);
        config.split.validation_size = 50;
        let record = run(&config).unwrap();
        assert_eq!(record.result_lines, 1);
        assert!(config.out_dir.join("baseline_policy.json").exists());
    }

    #[test]
    fn config_digest_ignores_output_locations() {
        let dir = tempfile::tempdir().unwrap();
        let a = synthetic_config(dir.path(), Method::Default, 80);
        let mut b = a.clone();
        b.out_dir = dir.path().join("elsewhere");
        b.cache_path = Some(dir.path().join("cache.jsonl"));
        assert_eq!(a.digest(), b.digest());
        let mut c = a.clone();
        c.params.k = 9;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn identical_configs_yield_byte_identical_results() {
        let dir = tempfile::tempdir().unwrap();
        let mut first = synthetic_config(dir.path(), Method::ManualPrompts, 80);
        first.out_dir = dir.path().join("run1");
        let mut second = first.clone();
        second.out_dir = dir.path().join("run2");
        run(&first).unwrap();
        run(&second).unwrap();
        let bytes_a = std::fs::read(first.out_dir.join("results.jsonl")).unwrap();
        let bytes_b = std::fs::read(second.out_dir.join("results.jsonl")).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn summarize_merges_runs_and_flags_maxima() {
        let dir = tempfile::tempdir().unwrap();
        let mut default_config = synthetic_config(dir.path(), Method::Default, 80);
        default_config.out_dir = dir.path().join("run_default");
        let mut manual_config = synthetic_config(dir.path(), Method::ManualPrompts, 80);
        manual_config.out_dir = dir.path().join("run_manual");
        run(&default_config).unwrap();
        run(&manual_config).unwrap();
        let table = summarize(&[
            default_config.out_dir.clone(),
            manual_config.out_dir.clone(),
        ])
        .unwrap();
        assert!(table.contains("| default |"));
        assert!(table.contains("manual-prompts"));
        // Exactly one bold winner per flagged column (ties permitted).
        assert!(table.contains("**"));
    }

    #[test]
    fn summarize_rejects_mixed_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let line_a = result_line(
            "adult",
            Method::Default,
            "default",
            "d",
            serde_json::json!({}),
            &[],
        );
        let line_b = result_line(
            "german",
            Method::Default,
            "default",
            "d",
            serde_json::json!({}),
            &[],
        );
        let path_a = dir.path().join("a.jsonl");
        let path_b = dir.path().join("b.jsonl");
        std::fs::write(&path_a, format!("{line_a}\n")).unwrap();
        std::fs::write(&path_b, format!("{line_b}\n")).unwrap();
        assert!(summarize(&[path_a, path_b]).is_err());
    }

    #[test]
    fn invalid_params_fail_before_any_model_call() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = synthetic_config(dir.path(), Method::Softprompt, 80);
        config.params.warmup_epochs = 50;
        assert!(matches!(run(&config), Err(Error::Config(_))));
        let mut config = synthetic_config(dir.path(), Method::FewshotGrid, 80);
        config.params.k = 0;
        assert!(matches!(run(&config), Err(Error::Config(_))));
    }
}
