//! `ncae`: train, evaluate and report on noise-contrastive autoencoders for
//! anomaly detection with contaminated training data.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncae_core::evaluation::AblationParam;
use ncae_core::{DatasetKind, NcaeError};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "ncae",
    version,
    about = "Noise-contrastive autoencoder anomaly detection"
)]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on a contaminated training set.
    Train {
        #[command(flatten)]
        cfg: Overrides,
    },
    /// Score the test split with a checkpoint and write the ROC curve.
    Evaluate {
        #[command(flatten)]
        cfg: Overrides,
        /// Defaults to `<output_dir>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep sigma or tau at rho = 0.2 and plot AUC against the value.
    Ablate {
        #[command(flatten)]
        cfg: Overrides,
        /// sigma or tau.
        #[arg(long)]
        param: AblationParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Normal classes to average over [default: normal_class].
        #[arg(long, value_delimiter = ',')]
        classes: Vec<u8>,
        /// Seeds to average over [default: grid.seeds].
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Scatter the latent codes of training samples, colored by contamination.
    PlotLatent {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of samples drawn [default: plots.latent_points].
        #[arg(long)]
        points: Option<usize>,
        /// Shade a kernel density estimate behind the points.
        #[arg(long)]
        density: bool,
    },
    /// Run (or resume) the experiment grid and write the AUC table.
    ReproduceTable {
        #[command(flatten)]
        cfg: Overrides,
        /// Datasets to include [default: dataset].
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<DatasetKind>,
        /// Only aggregate cells already in `<output_dir>/cells.jsonl`.
        #[arg(long)]
        no_run: bool,
    },
    /// Download MNIST and Fashion-MNIST.
    FetchData {
        /// Destination directory [default: $NCAE_DATA_DIR or data].
        #[arg(long)]
        dest: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        dataset: String,
        /// Path to fetch_data.py.
        #[arg(long)]
        script: Option<PathBuf>,
    },
}

fn exit_code(e: &NcaeError) -> u8 {
    match e {
        NcaeError::Config(_) | NcaeError::Argument(_) => 2,
        NcaeError::Ingestion { .. } | NcaeError::Checkpoint(_) | NcaeError::Io(_) => 3,
        NcaeError::NonFinite { .. } => 4,
    }
}

fn run(cli: Cli) -> ncae_core::Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Train { cfg } => commands::train(&RunConfig::load(&cfg)?, quiet),
        Command::Evaluate { cfg, checkpoint } => {
            let cfg = RunConfig::load(&cfg)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"));
            commands::evaluate(&cfg, &ck)
        }
        Command::Ablate {
            cfg,
            param,
            values,
            classes,
            seeds,
        } => {
            let cfg = RunConfig::load(&cfg)?;
            let req = commands::AblateRequest {
                param,
                values,
                classes: if classes.is_empty() {
                    vec![cfg.normal_class]
                } else {
                    classes
                },
                seeds: if seeds.is_empty() {
                    cfg.grid.seeds.clone()
                } else {
                    seeds
                },
            };
            commands::ablate(&cfg, &req, quiet)
        }
        Command::PlotLatent {
            cfg,
            checkpoint,
            points,
            density,
        } => {
            let cfg = RunConfig::load(&cfg)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint.json"));
            let points = points.unwrap_or(cfg.plots.latent_points);
            commands::plot_latent(&cfg, &ck, points, density || cfg.plots.density)
        }
        Command::ReproduceTable {
            cfg,
            datasets,
            no_run,
        } => {
            let cfg = RunConfig::load(&cfg)?;
            let datasets = if datasets.is_empty() {
                vec![cfg.dataset]
            } else {
                datasets
            };
            commands::reproduce_table(&cfg, &datasets, !no_run, quiet)
        }
        Command::FetchData {
            dest,
            dataset,
            script,
        } => {
            let dest = dest
                .or_else(|| std::env::var_os(config::DATA_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data"));
            commands::fetch_data(&dest, &dataset, script.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
