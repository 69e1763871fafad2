//! `dyncot` — one binary driving the whole pipeline: corpus generation,
//! overlap statistics, dataset resampling, reasoning-trace production,
//! training, and evaluation.
//!
//! Every command takes a flat `key = value` config file plus flag
//! overrides (flags win), writes a resolved-config echo next to its
//! artifacts, and prints a one-line JSON summary to stdout on success.
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.

mod cmds;
mod config;

use clap::{Parser, Subcommand};

/// Command outcome classified for the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config values, infeasible settings. Exit 1.
    Usage(String),
    /// Missing or malformed input files. Exit 2.
    Data(String),
    /// Everything else: I/O on outputs, teacher transport, training
    /// divergence. Exit 3.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<dyncot::Error> for CliError {
    fn from(e: dyncot::Error) -> CliError {
        use dyncot::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::InfeasibleSpec(_) => CliError::Usage(msg),
            E::Io { .. }
            | E::Json { .. }
            | E::Parse { .. }
            | E::UndefinedOverlap
            | E::SequenceTooLong { .. }
            | E::TokenOutOfRange { .. } => CliError::Data(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dyncot",
    version,
    about = "Dynamic chain-of-thought supervision laboratory for multi-modal keyphrase generation",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.\n\
                  Environment: TEACHER_URL, TEACHER_TOKEN, TEACHER_MODEL (remote teacher only)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-modal keyphrase corpus (train + test).
    Gen(cmds::GenArgs),
    /// Report keyphrase-overlap statistics for a train/test pair.
    Stats(cmds::StatsArgs),
    /// Lower train/test keyphrase overlap by moving and removing posts.
    Resample(cmds::ResampleArgs),
    /// Produce reasoning traces for every post via a teacher.
    Cotgen(cmds::CotgenArgs),
    /// Train a model with the sft, cot, multitask, or dynamic strategy.
    Train(cmds::TrainArgs),
    /// Decode a checkpoint on a test split and score keyphrase F1.
    Eval(cmds::EvalArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => cmds::run_gen(a),
        Command::Stats(a) => cmds::run_stats(a),
        Command::Resample(a) => cmds::run_resample(a),
        Command::Cotgen(a) => cmds::run_cotgen(a),
        Command::Train(a) => cmds::run_train(a),
        Command::Eval(a) => cmds::run_eval(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {}", err.message());
        std::process::exit(err.exit_code());
    }
}
