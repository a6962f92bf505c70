//! Command-line front end: training, disguise, recovery and analysis.

mod commands;
mod error;
mod schema;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{CliError, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "netdisguise", version, about = "Hide a secret network inside an ordinary one and get it back")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// A 64-bit key, decimal or `0x`-prefixed hex.
fn parse_key(s: &str) -> Result<u64, String> {
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|e| format!("`{s}` is not a 64-bit key: {e}"))
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from scratch on a task.
    Train {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        arch: PathBuf,
        /// Epochs, learning rate, batch size and seeds.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Disguise a secret model as a stego-task model and embed the side information.
    Disguise {
        #[arg(long)]
        secret: PathBuf,
        #[arg(long)]
        secret_task: PathBuf,
        #[arg(long)]
        stego_task: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_key)]
        key: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Recover the secret model from a stego model.
    Recover {
        #[arg(long)]
        stego: PathBuf,
        #[arg(long, value_parser = parse_key)]
        key: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on the test split of a task.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: PathBuf,
    },
    /// Expansion rate of a stego model over its secret model.
    Capacity {
        #[arg(long)]
        secret: PathBuf,
        #[arg(long)]
        stego: PathBuf,
    },
    /// Build a cover/stego pool and measure histogram detectors on it.
    Steganalyze {
        #[arg(long)]
        pool: PathBuf,
        /// Write the pool members and their features here.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Write the plain-text accuracy table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Summarize a model, optionally with filter importance scores.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, requires_all = ["secret_task", "stego_task"])]
        scores: bool,
        #[arg(long)]
        secret_task: Option<PathBuf>,
        #[arg(long)]
        stego_task: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        lambda_g: f64,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Seed of the output-layer adaptation to the stego task.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(command: Command) -> error::Result<serde_json::Value> {
    match command {
        Command::Train { task, arch, config, out } => commands::train(&task, &arch, config.as_deref(), &out),
        Command::Disguise { secret, secret_task, stego_task, config, key, out, report } => {
            commands::disguise(&commands::DisguiseArgs { secret, secret_task, stego_task, config, key, out, report })
        }
        Command::Recover { stego, key, out } => commands::recover(&stego, key, &out),
        Command::Evaluate { model, task } => commands::evaluate(&model, &task),
        Command::Capacity { secret, stego } => commands::capacity(&secret, &stego),
        Command::Steganalyze { pool, manifest, table } => commands::steganalyze(&pool, manifest.as_deref(), table.as_deref()),
        Command::Inspect { model, scores, secret_task, stego_task, lambda_g, batches, batch_size, seed } => {
            let scoring = scores.then(|| commands::Scoring {
                secret_task: secret_task.expect("clap requires it"),
                stego_task: stego_task.expect("clap requires it"),
                lambda_g,
                batches,
                batch_size,
                seed,
            });
            commands::inspect(&model, scoring.as_ref())
        }
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.kind.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::new(ErrorKind::Config, e.render().to_string().trim_end())),
    };
    match run(cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
