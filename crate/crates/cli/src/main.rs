use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iemf_cli::commands::{self, Context};
use iemf_cli::ExperimentConfig;
use iemf_core::parallel::threads_from_env;

#[derive(Parser)]
#[command(name = "iemf", version, about = "Inverse-effectiveness multimodal fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults are used for anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset container written by `generate` (otherwise generated in memory).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset container.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model, logging metrics, the ξ trace and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override iemf.enabled.
        #[arg(long)]
        iemf: Option<bool>,
    },
    /// Class-incremental run producing the accuracy matrix.
    Continual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iemf: Option<bool>,
    },
    Analyze {
        #[command(subcommand)]
        which: Analysis,
    },
}

#[derive(Subcommand)]
enum Analysis {
    Sharpness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    Contraction {
        #[command(flatten)]
        common: Common,
    },
    /// Cost to reach shared error levels; pass `--metrics name=metrics.csv` per method.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        metrics: Vec<String>,
    },
}

fn context(common: &Common, iemf: Option<bool>) -> iemf_core::Result<Context> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(on) = iemf {
        cfg.iemf.enabled = on;
    }
    Context::new(cfg.resolve(common.seed)?, common.out.clone(), threads_from_env())
}

fn run(cli: Cli) -> iemf_core::Result<()> {
    match cli.command {
        Command::Generate { common } => {
            commands::generate_cmd(context(&common, None)?)?;
        }
        Command::Train { common, iemf } => {
            commands::train_cmd(context(&common, iemf)?, common.data.as_deref())?;
        }
        Command::Continual { common, iemf } => {
            commands::continual_cmd(context(&common, iemf)?, common.data.as_deref())?;
        }
        Command::Analyze { which } => match which {
            Analysis::Sharpness { common, checkpoint } => {
                commands::sharpness_cmd(context(&common, None)?, checkpoint.as_deref(), common.data.as_deref())?;
            }
            Analysis::Landscape { common, checkpoint } => {
                commands::landscape_cmd(context(&common, None)?, checkpoint.as_deref(), common.data.as_deref())?;
            }
            Analysis::Contraction { common } => {
                commands::contraction_cmd(context(&common, None)?)?;
            }
            Analysis::Cost { common, metrics } => {
                commands::cost_cmd(context(&common, None)?, &metrics)?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
