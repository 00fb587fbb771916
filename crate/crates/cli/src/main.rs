use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qnet::Error;

mod commands;

#[derive(Parser)]
#[command(name = "qnet", version, about = "Train, quantize, compile and stress-test low-bit networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory or file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network; the baseline by default, or fine-tune `--init`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stage name for the produced archive.
        #[arg(long)]
        stage: Option<String>,
        /// Archive to start from instead of a fresh network.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Archive whose outputs serve as distillation targets.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Inject the configured `noise.train_point` during training.
        #[arg(long)]
        noise_aware: bool,
    },
    /// Run the gradual-quantization schedule from the baseline archive.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// Reuse stage archives already present in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this stage.
        #[arg(long)]
        stage: Option<String>,
    },
    /// Remove BN and ReLU from a quantized archive.
    TransformFq {
        archive: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compile an fq archive to integer thresholds and verify it.
    CompileInt {
        archive: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Predict a data split with a float or integer archive.
    Infer {
        archive: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Accuracy under the configured noise ladder.
    NoiseEval {
        archive: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write the configured synthetic dataset as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Check an archive; with `--model`, check integer/float equivalence.
    Verify {
        archive: PathBuf,
        /// The fq archive the integer archive was compiled from.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data(_) | Error::Parse { .. } => 3,
        Error::Diverged { .. } | Error::BelowFloor { .. } => 4,
        Error::Equivalence(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, stage, init, teacher, noise_aware } => commands::train(&common, stage, init, teacher, noise_aware),
        Command::Quantize { common, resume, stage } => commands::quantize(&common, resume, stage),
        Command::TransformFq { archive, common } => commands::transform_fq(&archive, &common),
        Command::CompileInt { archive, common } => commands::compile_int(&archive, &common),
        Command::Infer { archive, common, split } => commands::infer(&archive, &common, &split),
        Command::NoiseEval { archive, common, split } => commands::noise_eval(&archive, &common, &split),
        Command::GenData { common } => commands::gen_data(&common),
        Command::Verify { archive, model, common } => commands::verify(&archive, model, &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
