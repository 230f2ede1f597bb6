use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eigen_reptile::cli::{self, EvalOptions, Suite};

#[derive(Parser)]
#[command(name = "eigen-reptile", version, about = "Trajectory-PCA meta-learning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a meta-learner from a JSON config and write metrics.csv plus
    /// final_summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Task-parallel inner loops; 1 keeps runs byte-reproducible.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Overrides the config output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate trained parameters on fresh meta-test tasks.
    Eval {
        /// Path to a final_summary.json produced by train.
        summary: PathBuf,
        #[arg(long, default_value_t = 200)]
        tasks: usize,
        /// Adaptation steps before measuring; defaults to the trained
        /// config's eval_adapt_steps.
        #[arg(long)]
        adapt_steps: Option<usize>,
        /// Meta-test stream selector (training validation uses stream 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate the best checkpoint instead of the final parameters.
        #[arg(long)]
        use_best: bool,
    },
    /// Run the numerical verification suites.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train all four update directions under one seed and write the
    /// per-iteration loss series to one CSV.
    CompareDirections {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train { config, seed, threads, output } => cli::cmd_train(&config, seed, threads, output),
        Command::Eval { summary, tasks, adapt_steps, seed, use_best } => {
            cli::cmd_eval(&summary, &EvalOptions { tasks, adapt_steps, stream_seed: seed, use_best })
        }
        Command::Verify { suite, seed } => cli::cmd_verify(suite, seed),
        Command::CompareDirections { config, seed, threads, output } => {
            cli::cmd_compare_directions(&config, seed, threads, output)
        }
    };
    ExitCode::from(code as u8)
}
