//! `riconv`: generate data, train, evaluate and inspect rotation-invariant
//! point cloud networks.
//!
//! Exit codes: 0 success, 2 configuration error (bad config, missing file,
//! bad flag), 3 runtime error, 4 failed check.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Overrides;
use riconv::model::RotationRegime;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(#[from] riconv::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "riconv", version, about = "Rotation-invariant convolution for 3D point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Replace `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Replace `train.regime` (and `experiment.regimes`): none, z/z, SO3/SO3 or z/SO3.
    #[arg(long, value_parser = parse_regime)]
    regime: Option<RotationRegime>,
    /// Replace `output.dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<config::RunConfig, CliError> {
        let mut cfg = config::RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            epochs: self.epochs,
            regime: self.regime,
            output_dir: self.output_dir.clone(),
        })?;
        Ok(cfg)
    }
}

fn parse_regime(s: &str) -> Result<RotationRegime, String> {
    RotationRegime::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as xyz files plus a manifest.
    GenData {
        #[command(flatten)]
        args: ConfigArgs,
        /// Target directory (default: `<output.dir>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, then write the checkpoint, epoch history and test metrics.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split under a rotation regime.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoint (default: `<output.dir>/checkpoint.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and test under every configured regime and write the regime
    /// table with the accuracy spread.
    Experiment {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Dump per-representative features of one encoder operator as CSV.
    Features {
        /// Input cloud (xyz).
        input: PathBuf,
        /// Encoder operator, counted from 1.
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer's gradients.
    Gradcheck {
        /// Seed for the random inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the results as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { args, out } => commands::gen_data(&args.load()?, out),
        Command::Train { args } => commands::train(&args.load()?),
        Command::Eval { args, checkpoint } => commands::eval(&args.load()?, checkpoint),
        Command::Experiment { args } => commands::experiment(&args.load()?),
        Command::Features {
            input,
            layer,
            checkpoint,
            out,
        } => commands::features(&input, layer, &checkpoint, out),
        Command::Gradcheck { seed, out } => commands::gradcheck(seed, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
