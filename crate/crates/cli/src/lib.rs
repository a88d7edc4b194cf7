//! Command-line pipeline over the core library.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

use crate::cli::{Cli, Command};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::RunContext;

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        config.out = Some(out.clone());
    }
    if let Command::TheoryCheck { instances: Some(n) } = cli.command {
        config.theory.theorem1_instances = n;
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<i32> {
    let config = load_config(&cli)?;
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("runs/default"));
    let mut ctx = RunContext::new(cli.command.name(), out, config)?;
    let mut code = 0;
    match &cli.command {
        Command::MakeData => commands::make_data(&mut ctx)?,
        Command::MakeSparse { data } => commands::make_sparse(&mut ctx, data)?,
        Command::MakeOod { data, mu } => commands::make_ood_sets(&mut ctx, data, mu)?,
        Command::TrainDensity { data, estimator } => {
            let kind = estimator.unwrap_or(ctx.config.estimator.kind);
            commands::train_density(&mut ctx, data, kind)?
        }
        Command::EvalOod { estimator, mu } => commands::eval_ood(&mut ctx, *estimator, mu)?,
        Command::TrainDynamics { data } => commands::train_dynamics(&mut ctx, data)?,
        Command::TrainPolicy { inputs, lambda, guardian_off } => commands::train_policy(&mut ctx, inputs, *lambda, *guardian_off)?,
        Command::SweepLambda { inputs, lambda } => commands::sweep_lambda(&mut ctx, inputs, lambda)?,
        Command::Evaluate { inputs, policy, episodes } => commands::evaluate(&mut ctx, inputs, policy, *episodes)?,
        Command::TheoryCheck { .. } => {
            let violations = commands::theory_check(&mut ctx)?;
            if violations > 0 {
                eprintln!("{}", CliError::Invariant(format!("{violations} bound violations")).to_json());
                code = 1;
            }
        }
        Command::Report => report::report(&mut ctx)?,
    }
    ctx.finish(if code == 0 { "ok" } else { "failed" })?;
    Ok(code)
}
