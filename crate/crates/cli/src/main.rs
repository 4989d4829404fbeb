mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Thread-aware conversation summarisation.
#[derive(Debug, Parser)]
#[command(name = "threadsum", version, arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config file with dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.num_layers=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Where to write the run manifest (each command has a default when it writes files).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn a post dump (JSON lines) into training-instance shards.
    BuildCorpus(commands::BuildCorpusArgs),
    /// Train from scratch on instance shards.
    Pretrain(commands::TrainArgs),
    /// Continue training a checkpoint on summary data with the summary loss only.
    Finetune(commands::FinetuneArgs),
    /// Beam-search summaries for conversations.
    Generate(commands::GenerateArgs),
    /// ROUGE-1/2/L/SU4 of predictions against references.
    Evaluate(commands::EvaluateArgs),
    /// Finite-difference check of every parameter gradient on a toy conversation.
    GradCheck(commands::GradCheckArgs),
    /// Print the number of learnable scalars for the configured model.
    CountParams(commands::CountParamsArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(commands::EXIT_USAGE),
            };
        }
    };
    if cli.global.deterministic {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let result = match cli.command {
        Command::BuildCorpus(a) => commands::build_corpus(&cli.global, a),
        Command::Pretrain(a) => commands::pretrain(&cli.global, a),
        Command::Finetune(a) => commands::finetune(&cli.global, a),
        Command::Generate(a) => commands::generate(&cli.global, a),
        Command::Evaluate(a) => commands::evaluate(&cli.global, a),
        Command::GradCheck(a) => commands::grad_check(&cli.global, a),
        Command::CountParams(a) => commands::count_params(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
