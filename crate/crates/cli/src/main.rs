//! `dtnet`: data synthesis, training, evaluation, gradient checking,
//! parameter accounting, sweeps, ablations and feature-map dumps.

mod args;
mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::args::{ArchArgs, TrainArgs, VariantArg};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<dtnet_core::Error> for CliError {
    fn from(e: dtnet_core::Error) -> Self {
        use dtnet_core::Error as E;
        match e {
            E::Io { .. } | E::Format { .. } | E::MissingTensor(_) | E::Version { .. } => CliError::Io(e.to_string()),
            E::Config(_) | E::InvalidArgument(_) => CliError::Usage(e.to_string()),
            E::Shape { .. } | E::NonFinite(_) => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dtnet", version, about = "Multi-directional integrated convolution and threshold convolution segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the seeded synthetic shapes corpus.
    SynthData {
        #[arg(long)]
        out: std::path::PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train a model and write curves, the final model and a run manifest.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Score a saved model on a dataset.
    Eval {
        #[arg(long)]
        model: std::path::PathBuf,
        #[arg(long)]
        data: std::path::PathBuf,
        #[arg(long)]
        out: std::path::PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Finite-difference gradient checks in double precision.
    Gradcheck {
        /// all, or one of the check groups.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table and a manifest here.
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// Count parameters and compare with the published totals.
    CountParams {
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
    /// One training run per threshold setting and variant.
    ThresholdSweep {
        #[command(flatten)]
        args: TrainArgs,
        /// Threshold list; `0` or `off` is the no-threshold run.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5")]
        thresholds: Vec<String>,
        #[arg(long, value_delimiter = ',', value_enum, default_value = "eps")]
        variants: Vec<VariantArg>,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// The six strategy ablations with a shared seed.
    Ablate {
        #[command(flatten)]
        args: TrainArgs,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Export an encoder's local feature maps as PGM images.
    DumpFeatures {
        #[arg(long)]
        model: std::path::PathBuf,
        /// Image tensor (DTT, real-32, `[C, S, S]`).
        #[arg(long)]
        image: std::path::PathBuf,
        /// Encoder module, enc1 to enc5.
        #[arg(long, default_value = "enc1")]
        module: String,
        #[arg(long, default_value_t = 1)]
        part: usize,
        /// Channels of the part to export (default: all).
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<usize>>,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Re-run a training manifest and compare with its recorded outcome.
    Replay {
        #[arg(long)]
        manifest: std::path::PathBuf,
        #[arg(long)]
        out: Option<std::path::PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData { out, n, size, classes, channels, seed, noise } => {
            let spec = dtnet_core::dataio::SynthSpec { n_images: n, size, n_classes: classes, channels, seed, noise };
            commands::synth_data(&spec, &out)
        }
        Command::Train { args, out } => commands::train(&args, &out),
        Command::Eval { model, data, out, batch } => commands::eval(&model, &data, &out, batch),
        Command::Gradcheck { scope, tol, eps, seed, out } => commands::gradcheck(&scope, tol, eps, seed, out.as_deref()),
        Command::CountParams { arch, channels, out } => commands::count_params(&arch, channels, out.as_deref()),
        Command::ThresholdSweep { args, thresholds, variants, out } => commands::threshold_sweep(&args, &thresholds, &variants, &out),
        Command::Ablate { args, out } => commands::ablate(&args, &out),
        Command::DumpFeatures { model, image, module, part, channels, out } => {
            commands::dump_features(&model, &image, &module, part, channels.as_deref(), &out)
        }
        Command::Replay { manifest, out } => commands::replay(&manifest, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
