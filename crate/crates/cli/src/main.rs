//! `rsv`: estimation, Monte Carlo studies and diagnostics from the command line.

mod diagnose;
mod estimate;
mod output;
mod simulate;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rsv_core::error::ErrorClass;
use rsv_core::estimate::{EstimateConfig, Inference};
use rsv_core::predict::{PredictorConfig, PredictorKind};
use rsv_core::{Error, Result};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "rsv", version, about = "Treatment effects with remotely sensed outcome proxies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
enum Command {
    /// Estimate the treatment effect on a CSV dataset.
    Estimate(estimate::EstimateArgs),
    /// Run a Monte Carlo study over a grid of effects and sample sizes.
    Simulate(simulate::SimulateArgs),
    /// Relevance, specification and stability diagnostics.
    Diagnose(diagnose::DiagnoseArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: String,
    /// Format of the summary printed to stdout; both files are always written.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitArgs {
    #[arg(long, default_value_t = 2)]
    pub folds: usize,
    #[arg(long, value_parser = ["logistic", "knn", "stumps"], default_value = "logistic")]
    pub predictor: String,
    /// Outcome-model class weights, e.g. `1:3`.
    #[arg(long)]
    pub class_weights: Option<String>,
    #[arg(long, default_value_t = 0.10)]
    pub alpha: f64,
}

impl FitArgs {
    pub fn config(&self, seed: u64, inference: Inference) -> Result<EstimateConfig> {
        let class_weights = match &self.class_weights {
            None => None,
            Some(s) => Some(
                s.split(':')
                    .map(|w| w.trim().parse::<f64>().map_err(|_| Error::InvalidSpec(format!("bad class weight {w:?} in {s:?}"))))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidSpec(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(EstimateConfig {
            n_folds: self.folds,
            seed,
            predictor: PredictorConfig {
                kind: PredictorKind::parse(&self.predictor).expect("restricted by clap"),
                class_weights,
                seed,
                ..Default::default()
            },
            alpha: self.alpha,
            inference,
            ..Default::default()
        })
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Data => 2,
        ErrorClass::Identification => 3,
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("RSV_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        // A second initialization only fails if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    let echo = serde_json::to_value(&cli.command).expect("flags serialize");
    let result = match &cli.command {
        Command::Estimate(a) => estimate::run(a, &echo),
        Command::Simulate(a) => simulate::run(a, &echo),
        Command::Diagnose(a) => diagnose::run(a, &echo),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
