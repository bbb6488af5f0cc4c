use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use perpneg_cli::{execute, report, ExperimentKind, Overrides};

#[derive(Parser)]
#[command(name = "perpneg", version, about = "Negative-prompt composition experiments on analytic prompt worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the first seed of the configured range.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw samples with one composer.
    Sample(RunArgs),
    /// Success rates of every composer and negative set.
    Compare(RunArgs),
    /// Sweep view interpolation between anchor views.
    Interp(RunArgs),
    /// Vary the weight of one negative prompt.
    Ablate(RunArgs),
    /// Optimize a binned scene with score distillation.
    Distill(RunArgs),
    /// Print the summary of a finished run.
    Report {
        /// Directory a previous run wrote to.
        dir: PathBuf,
        /// Verify the run came from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Sample(a) => (ExperimentKind::Sample, a),
        Command::Compare(a) => (ExperimentKind::Compare, a),
        Command::Interp(a) => (ExperimentKind::Interp, a),
        Command::Ablate(a) => (ExperimentKind::Ablate, a),
        Command::Distill(a) => (ExperimentKind::Distill, a),
        Command::Report { dir, config } => {
            return match report(&dir, config.as_deref()) {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        threads: args.threads,
    };
    match execute(kind, &args.config, &overrides) {
        Ok(summary) => {
            println!("config_hash = {}", summary.config_hash);
            print!("{}", summary.table);
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn fail(e: perpneg_cli::CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}
