use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use protopad_cli::{
    cmd_det_export, cmd_eval, cmd_extend, cmd_gen_data, cmd_train, CliError, RetrainMode, RunConfig,
};

/// Few-shot prototypical presentation attack detection experiments.
#[derive(Debug, Parser)]
#[command(name = "protopad", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sets every seed in the config to this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Retrain {
    Fresh,
    Finetune,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset as a feature table.
    GenData,
    /// Train the embedder and write a checkpoint and history.
    Train,
    /// Evaluate a checkpoint on the test users.
    Eval {
        /// Checkpoint to load [default: <out>/checkpoint.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare base and new-country-extended support sets.
    Extend {
        /// Base checkpoint to load [default: <out>/checkpoint.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Retrain with the selected new-country users before evaluating.
        #[arg(long, num_args = 0..=1, default_missing_value = "fresh")]
        retrain: Option<Retrain>,
    },
    /// Rebuild DET curves and the report from a score file.
    DetExport {
        #[arg(long)]
        scores: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
        cfg.validate()?;
    }
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref()),
        Command::Extend {
            checkpoint,
            retrain,
        } => {
            let mode = retrain.map(|r| match r {
                Retrain::Fresh => RetrainMode::Fresh,
                Retrain::Finetune => RetrainMode::Finetune,
            });
            cmd_extend(&cfg, checkpoint.as_deref(), mode)
        }
        Command::DetExport { scores } => cmd_det_export(&cfg, scores.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("protopad: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
