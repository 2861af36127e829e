mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, Exit};

/// Synthetic training sets from a text-to-image model, and classifiers
/// trained on them.
#[derive(Debug, Parser)]
#[command(name = "divgen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the request plan without generating anything.
    Plan {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        trick: Option<String>,
        /// Plan file; defaults to paths.plan.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Generate images for a plan into the staging directory, resuming
    /// from its checkpoint.
    Synthesize {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        trick: Option<String>,
        /// Use this plan file instead of expanding one from the config.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Rescale staged images to native size and write the dataset manifest.
    Assemble {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        staging: Option<PathBuf>,
        /// Dataset root; defaults to paths.dataset.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Re-hash a dataset against its manifest. Exit status 0 only when clean.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train a classifier on an assembled dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Model artifact path; defaults to a name under paths.models.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Top-1 accuracy of a trained model on real test images.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Manifest, dataset directory or class-per-directory image folder.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Read the test set location from this config's task section.
        #[command(flatten)]
        config: ConfigArg,
        /// Record the result into this ledger.
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Write the full result as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Result tables with changes against the base-class baseline.
    Report {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        /// markdown, csv or json.
        #[arg(long, default_value = "markdown")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare full-hull and k-subset interpolation on points around a circle.
    DemoSampling {
        #[arg(long, default_value_t = 60)]
        n: usize,
        #[arg(long, default_value_t = 20_000)]
        draws: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write every sampled point as CSV for plotting.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan requests conditioned on interpolated exemplar embeddings.
    InterpPlan {
        /// Embedding set (JSON) or a directory of exemplar PNGs.
        #[arg(long)]
        embeddings: PathBuf,
        /// full or k3.
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "class")]
        class_label: String,
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Export penultimate-layer features of real and synthetic images.
    Features {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        real: Option<PathBuf>,
        /// Synthetic dataset manifest.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first));
            return ExitCode::from(Exit::Usage as u8);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
