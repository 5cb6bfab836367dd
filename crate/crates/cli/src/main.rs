//! `mtreg`: synthesize data, train, register, evaluate and export
//! uncertainty maps.
//!
//! Exit status is 0 on success, 1 on runtime or data errors and 2 on usage
//! or validation errors.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mtreg",
    version,
    about = "Mean-teacher deformable 3D registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic multimodal pairs with ground-truth fields.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        pairs: usize,
        #[arg(long, default_value_t = 1.5)]
        amplitude: f64,
        #[arg(long, default_value_t = 3)]
        blobs: usize,
    },
    /// Train a model on every pair in a data directory.
    Train {
        /// JSON training configuration; may also name `data`, `out` and `log`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict a field with a trained model and warp the moving image.
    Register {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        out_warped: PathBuf,
    },
    /// Score a field against segmentations.
    Evaluate {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        moving_seg: PathBuf,
        #[arg(long)]
        fixed_seg: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export MC dropout uncertainty maps and the weights they imply.
    Uncertainty {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long, default_value_t = 6)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_prefix: String,
        /// JSON configuration supplying k1, k2, tau1, tau2, eps_phi, eps_app.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// An error tagged with the exit status it maps to.
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 2,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<mtreg::Error> for Failure {
    fn from(error: mtreg::Error) -> Self {
        Failure {
            code: 1,
            error: error.into(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(error: std::io::Error) -> Self {
        Failure {
            code: 1,
            error: error.into(),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth {
            out,
            seed,
            size,
            pairs,
            amplitude,
            blobs,
        } => commands::synth(&out, seed, size, pairs, amplitude, blobs),
        Command::Train {
            config,
            data,
            out,
            log,
        } => commands::train(config.as_deref(), data, out, log),
        Command::Register {
            model,
            moving,
            fixed,
            out_field,
            out_warped,
        } => commands::register(&model, &moving, &fixed, &out_field, &out_warped),
        Command::Evaluate {
            field,
            moving_seg,
            fixed_seg,
            report,
        } => commands::evaluate(&field, &moving_seg, &fixed_seg, &report),
        Command::Uncertainty {
            model,
            moving,
            fixed,
            passes,
            seed,
            out_prefix,
            config,
        } => commands::uncertainty(
            &model,
            &moving,
            &fixed,
            passes,
            seed,
            &out_prefix,
            config.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
