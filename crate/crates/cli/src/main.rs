mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irake_core::eval::BatchSetting;

use crate::config::ConfigArgs;

/// Error carrying the process exit code: 2 for configuration problems,
/// 3 for backend failures, 4 for unparseable model output.
#[derive(Debug)]
pub struct ExitError {
    pub code: u8,
    pub message: String,
}

impl ExitError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn aborted(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl fmt::Display for ExitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ExitError {}

#[derive(Parser)]
#[command(name = "irake", version, about = "Multi-hop question answering over edited facts")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question against a set of edited facts
    Solve {
        question: Option<String>,
        /// JSON array of edited facts
        #[arg(long)]
        edits: Option<PathBuf>,
        /// Take edits (and the question, if none is given) from this dataset case
        #[arg(long)]
        case_id: Option<String>,
        /// Pick a random case from the library instead of the most similar
        #[arg(long)]
        random_case: bool,
        /// Print the reasoning steps to stderr
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate a dataset under a batch-editing setting
    Eval {
        /// 1, 100 or all
        #[arg(long, default_value = "1")]
        setting: BatchSetting,
        /// Evaluate only the first N cases
        #[arg(long)]
        limit: Option<usize>,
        /// Extra edits added to every shared memory (100 and all settings)
        #[arg(long)]
        extra_edits: Option<PathBuf>,
        /// Append solved questions to the case library during the run
        #[arg(long)]
        online_append: bool,
        /// Write the case library here after the run
        #[arg(long)]
        save_library: Option<PathBuf>,
        #[arg(long)]
        random_case: bool,
    },
    /// Sample solved cases from a dataset's gold chains into a case library
    BuildLibrary {
        #[arg(long, default_value_t = 500)]
        sample_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// List library records, or rank them against a question
    InspectLibrary {
        #[arg(long)]
        question: Option<String>,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Print the effective configuration
    Config,
    /// Write a bundled demo scenario (olympics, danse-macabre)
    Scenario {
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset with a matching oracle script
    Synth {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        /// How many distractors overwrite an edit of the dataset
        #[arg(long, default_value_t = 0)]
        conflicting: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.config.resolve()?;
    match cli.command {
        Command::Solve {
            question,
            edits,
            case_id,
            random_case,
            trace,
        } => commands::solve(
            &cfg,
            commands::SolveArgs {
                question,
                edits,
                case_id,
                random_case,
                print_trace: trace,
            },
        ),
        Command::Eval {
            setting,
            limit,
            extra_edits,
            online_append,
            save_library,
            random_case,
        } => commands::eval(
            &cfg,
            commands::EvalArgs {
                setting,
                limit,
                extra_edits,
                online_append,
                save_library,
                random_case,
            },
        ),
        Command::BuildLibrary { sample_size, out } => commands::build_library(&cfg, sample_size, &out),
        Command::InspectLibrary { question, top } => commands::inspect_library(&cfg, question.as_deref(), top),
        Command::Config => commands::print_config(&cfg),
        Command::Scenario { name, out } => commands::scenario(&name, &out),
        Command::Synth {
            cases,
            distractors,
            conflicting,
            out,
        } => commands::synth(&cfg, cases, distractors, conflicting, &out),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("IRAKE_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<ExitError>().map_or(1, |e| e.code);
            ExitCode::from(code)
        }
    }
}
