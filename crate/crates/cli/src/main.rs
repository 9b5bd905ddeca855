mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliError;

/// Train and evaluate capsule-network GANs.
#[derive(Parser)]
#[command(name = "capsgan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a GAN and write checkpoints plus a loss history.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Sample a checkpoint into a PNG grid and a .npy dump.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Battle two checkpoints and report both orientations.
    Gam {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        a: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        b: Option<PathBuf>,
    },
    /// Label-spreading error rates for each checkpoint and labeled-set size.
    Semisup {
        #[command(flatten)]
        common: Common,
        /// Repeat for several models; replaces semisup.checkpoints.
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
        /// Comma-separated sizes; replaces semisup.n_labeled.
        #[arg(long, value_delimiter = ',')]
        n_labeled: Vec<usize>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => commands::train(&load(&common)?.resolve()?),
        Command::Generate {
            common,
            checkpoint,
            n,
        } => {
            let mut cfg = load(&common)?;
            if checkpoint.is_some() {
                cfg.generate.checkpoint = checkpoint;
            }
            if let Some(n) = n {
                cfg.generate.n = n;
            }
            commands::generate(&mut cfg.resolve()?)
        }
        Command::Gam { common, a, b } => {
            let mut cfg = load(&common)?;
            cfg.gam.checkpoint_a = a.or(cfg.gam.checkpoint_a);
            cfg.gam.checkpoint_b = b.or(cfg.gam.checkpoint_b);
            commands::gam(&cfg.resolve()?)
        }
        Command::Semisup {
            common,
            checkpoints,
            n_labeled,
        } => {
            let mut cfg = load(&common)?;
            if !checkpoints.is_empty() {
                cfg.semisup.checkpoints = checkpoints;
            }
            if !n_labeled.is_empty() {
                cfg.semisup.n_labeled = n_labeled;
            }
            commands::semisup(&cfg.resolve()?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAPSGAN_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
