//! `volseg` command line: synth, train, eval, serve.
//!
//! Exit codes: 0 success, 1 user error (bad config, missing input),
//! 2 internal failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A failure caused by the invocation rather than the program.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Parser)]
#[command(name = "volseg", version, about = "Promptable volumetric tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.lr=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured phantoms as volume files plus a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured phase(s); checkpoints land in the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: PathBuf,
        /// Phase-1 checkpoint for a step-2-only run; defaults to
        /// `<run-dir>/step1.ckpt`.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint and write `report.json` to the run directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = config::RunConfig::load(common.config.as_deref(), &common.overrides)?;
            commands::synth(&cfg, &out)
        }
        Command::Train { common, run_dir, init } => {
            let cfg = config::RunConfig::load(common.config.as_deref(), &common.overrides)?;
            let path = commands::train(&cfg, &run_dir, init.as_deref())?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Eval {
            common,
            run_dir,
            checkpoint,
        } => {
            let cfg = config::RunConfig::load(common.config.as_deref(), &common.overrides)?;
            let report = commands::eval(&cfg, &run_dir, &checkpoint)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Serve { common, checkpoint } => {
            let cfg = config::RunConfig::load(common.config.as_deref(), &common.overrides)?;
            commands::serve(&cfg, &checkpoint)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UserError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<volseg::Error>() {
        Some(
            volseg::Error::NonFiniteLoss { .. } | volseg::Error::Shape(_),
        )
        | None => 2,
        Some(_) => 1,
    }
}
