//! Command-line driver: train reprogramming parameters, anonymize embedding
//! files and evaluate privacy under the OO/OA/AA attack scenarios.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{AnonymizerKind, ExperimentConfig, Overrides};
pub use error::CliError;
pub use report::Report;

#[derive(Debug, Parser)]
#[command(name = "anonvec", version, about = "Speaker-embedding anonymization experiments")]
pub struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Experiment seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override a config key, e.g. `--set k=5 --set optimizer.max_iters=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train θ and write `<out>/theta.json` and `<out>/trace.tsv`.
    TrainTheta,
    /// Anonymize `input` into `<out>/anonymized.jsonl`, one record per speaker.
    Anonymize,
    /// Run OO, OA and AA; write `<out>/report.json` and `<out>/report.txt`.
    Evaluate,
    /// Print a saved report as a table.
    Report {
        /// Report file; defaults to `<out>/report.json`.
        path: Option<PathBuf>,
    },
    /// Write a seeded synthetic scenario and matching config into `<out>`.
    Synth,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        set: cli.set,
    };
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::TrainTheta => commands::train_theta(&cfg),
        Command::Anonymize => commands::anonymize(&cfg),
        Command::Evaluate => {
            let report = commands::evaluate(&cfg)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Report { path } => {
            let path = path.unwrap_or_else(|| cfg.out.join("report.json"));
            print!("{}", commands::read_report(&path)?.to_text());
            Ok(())
        }
        Command::Synth => {
            let path = commands::synth(&cfg)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}
