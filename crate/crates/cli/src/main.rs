//! `nedreamer` command-line driver.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "nedreamer", version, about = "Decoder-free world-model agents on synthetic pixel tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Config file (sectioned key = value text). Built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted `section.key=value` overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one agent and write a run directory under `--out`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the greedy policy of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `env.*` overrides for the evaluation environment.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train every mode x seed combination and summarise.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "full,no_transformer,no_shift,no_projector")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Learning and loss curves from run directories.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Representation diagnostics for a checkpoint and/or the gradient-check suite.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run finite-difference checks of every objective.
        #[arg(long)]
        gradcheck: bool,
        #[arg(long, default_value_t = 64)]
        episodes: usize,
        #[arg(long, default_value_t = 2000)]
        probe_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to `<run>/diagnostics` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Train { config, out } => commands::train(&config, &out, &argv),
        Command::Evaluate { checkpoint, episodes, seed, out, overrides } => commands::evaluate(&checkpoint, episodes, seed, out.as_deref(), &overrides),
        Command::Ablate { config, modes, seeds, out, jobs } => commands::ablate(&config, &modes, &seeds, &out, jobs, &argv),
        Command::Plot { runs, out } => commands::plot(&runs, &out),
        Command::Diagnose { checkpoint, gradcheck, episodes, probe_steps, seed, out } => {
            commands::diagnose(checkpoint.as_deref(), gradcheck, episodes, probe_steps, seed, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
