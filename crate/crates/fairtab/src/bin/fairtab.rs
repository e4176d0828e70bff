//! Thin command-line front end over the fairtab library: run one configured
//! experiment, merge results into a comparison table, or inspect a response
//! cache.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairtab::experiments::{self, ExperimentConfig, Method};
use fairtab::model;

#[derive(Parser)]
#[command(
    name = "fairtab",
    version,
    about = "Group-fair tabular prediction with chat LLMs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment described by a JSON config file.
    Run(RunArgs),
    /// Merge results.jsonl files (or run directories) into a markdown table.
    Summarize {
        /// Paths to results.jsonl files or run output directories.
        paths: Vec<PathBuf>,
    },
    /// Show entry counts for a response cache file.
    CacheStats {
        /// Path to a JSONL cache file.
        #[arg(long)]
        cache: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured method.
    #[arg(long)]
    method: Option<String>,
    /// Override the backend: "simulator" or "http:<model>".
    #[arg(long)]
    backend: Option<String>,
    /// Override the split seed and the method seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override prompt-optimization iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the few-shot example count.
    #[arg(long)]
    k: Option<usize>,
    /// Override the demographic-parity floor for operating points.
    #[arg(long)]
    dp_min: Option<f64>,
    /// Override the self-refinement batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override prediction parallelism.
    #[arg(long)]
    parallelism: Option<usize>,
}

fn apply_overrides(
    mut config: ExperimentConfig,
    args: &RunArgs,
) -> fairtab::Result<ExperimentConfig> {
    if let Some(method) = &args.method {
        config.method = Method::parse(method)?;
    }
    if let Some(backend) = &args.backend {
        config.backend = match backend.as_str() {
            "simulator" => experiments::BackendSpec::Simulator {
                config: Default::default(),
            },
            other => match other.strip_prefix("http:") {
                Some(model) if !model.is_empty() => experiments::BackendSpec::Http {
                    model: model.to_string(),
                },
                _ => {
                    return Err(fairtab::Error::Config(format!(
                        "backend must be 'simulator' or 'http:<model>', got '{other}'"
                    )))
                }
            },
        };
    }
    if let Some(seed) = args.seed {
        config.split.seed = seed;
        config.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(iterations) = args.iterations {
        config.params.iterations = iterations;
    }
    if let Some(k) = args.k {
        config.params.k = k;
    }
    if let Some(dp_min) = args.dp_min {
        config.params.dp_min = dp_min;
    }
    if let Some(batch_size) = args.batch_size {
        config.params.batch_size = batch_size;
    }
    if let Some(parallelism) = args.parallelism {
        config.params.parallelism = parallelism;
    }
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => ExperimentConfig::load(&args.config)
            .and_then(|config| apply_overrides(config, &args))
            .and_then(|config| experiments::run(&config))
            .map(|record| {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&record).expect("serializes")
                );
            }),
        Command::Summarize { paths } => experiments::summarize(&paths).map(|table| {
            println!("{table}");
        }),
        Command::CacheStats { cache } => model::cache_stats(&cache).map(|stats| {
            println!(
                "{}",
                serde_json::to_string_pretty(&stats).expect("serializes")
            );
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
