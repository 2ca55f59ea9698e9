//! `duet`: corpus ingest, training, generation, scoring, evaluation and the
//! live session server.

mod commands;
mod config;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::{CliError, FileConfig};

#[derive(Debug, Parser)]
#[command(name = "duet", version, about = "Online accompaniment generation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Shared settings. Every flag can also come from the config file under its
/// long name.
#[derive(Debug, Args)]
struct Global {
    /// JSON config file keyed by long flag names
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus file or directory (jsonl)
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Directory that relative checkpoint paths are resolved against
    #[arg(long = "ckpt-dir", global = true)]
    ckpt_dir: Option<PathBuf>,
    /// Random seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log filter for stderr (overrides DUET_LOG)
    #[arg(long, global = true)]
    log: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate chorale files and write one normalized jsonl corpus
    Ingest(commands::IngestArgs),
    /// Maximum-likelihood training of a generation or reward model
    Pretrain(commands::PretrainArgs),
    /// Actor-critic fine-tuning against a reward ensemble
    #[command(name = "rl-train")]
    RlTrain(commands::RlTrainArgs),
    /// Generate machine parts for a human part or a whole test corpus
    Generate(commands::GenerateArgs),
    /// Per-step reward breakdown of a duet
    Score(commands::ScoreArgs),
    /// Objective metrics of generated duets against a reference corpus
    Eval(commands::EvalArgs),
    /// Run the live session server
    Serve(commands::ServeArgs),
}

fn init_logging(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| "info".into());
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut file = FileConfig::load(cli.global.config.as_deref())?;
    let log = match file.maybe(cli.global.log, "log")? {
        Some(l) => l,
        None => std::env::var("DUET_LOG").unwrap_or_else(|_| "info".into()),
    };
    init_logging(&log);
    let ckpt_dir = file.maybe(cli.global.ckpt_dir, "ckpt-dir")?;
    file.set_ckpt_dir(ckpt_dir);
    let ctx = commands::Context {
        corpus: file.maybe(cli.global.corpus, "corpus")?,
        seed: file.pick(cli.global.seed, "seed", 0)?,
        file,
    };
    match cli.command {
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::Pretrain(a) => commands::pretrain(&ctx, a),
        Command::RlTrain(a) => commands::rl_train(&ctx, a),
        Command::Generate(a) => commands::generate(&ctx, a),
        Command::Score(a) => commands::score(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Serve(a) => commands::serve(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
