//! Group-fair tabular prediction through chat-style language models.
//!
//! The library turns tabular records into prompts, obtains binary predictions
//! from a chat backend (a real HTTP endpoint or the built-in deterministic
//! simulator), and applies four fairness interventions: fair prompt
//! optimization via a meta-model, soft prompt tuning with a demographic-parity
//! penalty, fair few-shot example construction, and batched self-refinement.
//! Demographic parity, equalized odds, accuracy, and Pareto-optimal
//! fairness/accuracy trade-offs are measured throughout.
//!
//! Start with the runnable programs under `examples/`: each one demonstrates
//! a single capability end to end on the built-in synthetic dataset, entirely
//! offline. The `fairtab` binary wraps the same machinery behind `run`,
//! `summarize`, and `cache-stats` subcommands for file-driven experiments.

pub mod baseline;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod fewshot;
pub mod metrics;
pub mod model;
pub mod promptopt;
pub mod selfrefine;
pub mod serializer;
pub mod simulator;
pub mod softprompt;
mod util;

pub use error::{Error, Result};
