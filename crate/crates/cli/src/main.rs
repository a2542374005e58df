use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod report;
mod run;
mod serve;
mod words;

/// Probe a language model's knowledge of a word list with a battery of
/// yes/no prompts, and report on the answers.
#[derive(Debug, Parser)]
#[command(name = "lexprobe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run (or resume) an experiment and export its results.
    Run(run::RunArgs),
    /// Print histogram, positive-rate or contradiction tables for a stored experiment.
    Report(report::ReportArgs),
    /// Word list utilities.
    Words {
        #[command(subcommand)]
        command: words::WordsCommand,
    },
    /// Serve the HTTP API used by the browser console.
    Serve(serve::ServeArgs),
}

/// Options of the offline mock provider.
#[derive(Debug, Clone, Args)]
pub struct MockArgs {
    /// Seed for the mock's garbled replies.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-prompt YES percentages, P1 first.
    #[arg(long, value_delimiter = ',', default_value = "80,55,50,40")]
    pub mock_thresholds: Vec<u8>,
    /// Probability that a single mock reply is unparseable.
    #[arg(long, default_value_t = 0.0)]
    pub mock_unparseable_rate: f64,
    /// Hash word and prompt together so prompts answer independently.
    #[arg(long)]
    pub mock_per_prompt: bool,
}

impl MockArgs {
    pub fn knowledge(&self) -> anyhow::Result<lexprobe_core::mock::MockKnowledge> {
        anyhow::ensure!(!self.mock_thresholds.is_empty(), "--mock-thresholds is empty");
        anyhow::ensure!(
            self.mock_thresholds.iter().all(|t| *t <= 100),
            "--mock-thresholds are percentages (0-100)"
        );
        anyhow::ensure!(
            (0.0..=1.0).contains(&self.mock_unparseable_rate),
            "--mock-unparseable-rate must be within [0, 1]"
        );
        Ok(lexprobe_core::mock::MockKnowledge {
            thresholds: self.mock_thresholds.clone(),
            seed: self.seed,
            unparseable_rate: self.mock_unparseable_rate,
            per_prompt: self.mock_per_prompt,
        })
    }
}

pub fn default_store(prefix: &std::path::Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".sqlite");
    PathBuf::from(s)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::main(args),
        Command::Report(args) => report::main(args).map(|()| ExitCode::SUCCESS),
        Command::Words { command } => words::main(command).map(|()| ExitCode::SUCCESS),
        Command::Serve(args) => serve::main(args).map(|()| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
