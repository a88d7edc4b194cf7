use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gormpo_core::density::EstimatorKind;

#[derive(Debug, Parser)]
#[command(name = "gormpo", version, about = "Density-penalized model-based offline RL pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct Inputs {
    /// Offline dataset container (default: OUT/dataset.bin).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dynamics checkpoint (default: OUT/dynamics.bin).
    #[arg(long)]
    pub dynamics: Option<PathBuf>,
    /// Density checkpoint (default: OUT/density_<estimator>.bin).
    #[arg(long)]
    pub density: Option<PathBuf>,
    #[arg(long, value_parser = parse_estimator)]
    pub estimator: Option<EstimatorKind>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect an offline dataset with the behavior policy.
    MakeData,
    /// Drop trajectories that visit the low-support, low-reward box.
    MakeSparse {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Build shifted-noise OOD benchmarks from the test split.
    MakeOod {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Shift means; repeat to give several.
        #[arg(long)]
        mu: Vec<f64>,
    },
    /// Fit and calibrate a density estimator on (s′, a) pairs.
    TrainDensity {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<EstimatorKind>,
    },
    /// Score the OOD benchmarks with fitted estimators.
    EvalOod {
        /// Restrict to one estimator; otherwise every fitted one in OUT.
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<EstimatorKind>,
        /// Restrict to these shift means.
        #[arg(long)]
        mu: Vec<f64>,
    },
    /// Fit the probabilistic dynamics ensemble.
    TrainDynamics {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a policy on the penalized model; --guardian-off or --lambda 0 gives plain MBPO.
    TrainPolicy {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        guardian_off: bool,
    },
    /// Train one policy per λ and pick the best by evaluation return.
    SweepLambda {
        #[command(flatten)]
        inputs: Inputs,
        /// Grid values; repeat to give several.
        #[arg(long)]
        lambda: Vec<f64>,
    },
    /// Evaluate a trained policy in the environment.
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        /// Policy checkpoint (default: OUT/policy.bin).
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Verify the conservatism bounds on random tabular instances.
    TheoryCheck {
        /// Number of random instances for the return-bound check.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Render plots and a summary from the artifacts in OUT.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeData => "make-data",
            Command::MakeSparse { .. } => "make-sparse",
            Command::MakeOod { .. } => "make-ood",
            Command::TrainDensity { .. } => "train-density",
            Command::EvalOod { .. } => "eval-ood",
            Command::TrainDynamics { .. } => "train-dynamics",
            Command::TrainPolicy { .. } => "train-policy",
            Command::SweepLambda { .. } => "sweep-lambda",
            Command::Evaluate { .. } => "evaluate",
            Command::TheoryCheck { .. } => "theory-check",
            Command::Report => "report",
        }
    }
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    s.parse().map_err(|e: gormpo_core::Error| e.to_string())
}
