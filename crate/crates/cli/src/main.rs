//! `geodiff` command-line driver.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    BuildDatasetArgs, EvaluateArgs, MakeWorldArgs, ProbeFidelityArgs, ProbeFusionArgs, SampleArgs,
    SampleTemporalArgs, TrainArgs, TrainTemporalArgs,
};

#[derive(Parser)]
#[command(name = "geodiff", version, about = "Environment-conditioned diffusion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: stubs, climate grid, images and truth.
    MakeWorld(MakeWorldArgs),
    /// Align image stubs with the climate grid and write a manifest.
    BuildDataset(BuildDatasetArgs),
    /// Train a conditional denoiser on a manifest.
    Train(TrainArgs),
    /// Sample images from a trained model.
    Sample(SampleArgs),
    /// Train the temporal control branch on top of a frozen base model.
    TrainTemporal(TrainTemporalArgs),
    /// Sample with conditioning frames.
    SampleTemporal(SampleTemporalArgs),
    /// Compare generated images with references.
    Evaluate(EvaluateArgs),
    /// Linear-probe recoverability of additive vs concatenated embeddings.
    ProbeFusion(ProbeFusionArgs),
    /// Correlate a swept attribute with its image statistic.
    ProbeFidelity(ProbeFidelityArgs),
}

/// A failure with its exit code: 1 for invalid input, 2 for runtime errors.
#[derive(Debug)]
pub enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<geodiff::Error> for Failure {
    fn from(e: geodiff::Error) -> Self {
        use geodiff::Error as E;
        match e {
            E::InvalidConfig(_) | E::DimensionMismatch { .. } | E::ShapeMismatch { .. } | E::Format { .. } => {
                Failure::Invalid(e.into())
            }
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Invalid(e.into())
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure::Invalid(anyhow::anyhow!("{msg}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::MakeWorld(a) => commands::make_world(a),
        Command::BuildDataset(a) => commands::build_dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::TrainTemporal(a) => commands::train_temporal(a),
        Command::SampleTemporal(a) => commands::sample_temporal(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::ProbeFusion(a) => commands::probe_fusion(a),
        Command::ProbeFidelity(a) => commands::probe_fidelity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
