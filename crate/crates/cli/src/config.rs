//! Run configuration: a TOML file plus command-line overrides.
//!
//! Every key is optional. A minimal file:
//!
//! ```toml
//! dataset = "mnist"
//! normal_class = 5
//! rho = 0.2
//! output_dir = "runs/mnist-5"
//!
//! [train]
//! epochs = 30
//! seed = 0
//! ```
//!
//! `[train]` takes the fields of `TrainConfig` (with `[train.weights]` and
//! `[train.model]` tables), `[grid]` the fields of `Grid`, and `[plots]` the
//! plot options below. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use ncae_core::data::DatasetKind;
use ncae_core::evaluation::{hash_json, Grid, ScoreKind};
use ncae_core::{Method, NcaeError, Result, ScoreOrdering, TrainConfig};
use serde::{Deserialize, Serialize};

pub const DATA_ENV: &str = "NCAE_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotFormat {
    Svg,
    Png,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotConfig {
    pub formats: Vec<PlotFormat>,
    /// Points drawn in the latent scatter.
    pub latent_points: usize,
    /// Shade the latent scatter with a kernel density estimate.
    pub density: bool,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            formats: vec![PlotFormat::Svg, PlotFormat::Png],
            latent_points: 500,
            density: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root holding `mnist/` and `fashion-mnist/`. Falls back to
    /// `$NCAE_DATA_DIR`, then `data`.
    pub data_dir: Option<PathBuf>,
    pub dataset: DatasetKind,
    pub normal_class: u8,
    pub rho: f64,
    pub method: Method,
    /// Keep at most this many normal training samples.
    pub max_normal: Option<usize>,
    pub output_dir: PathBuf,
    pub score: ScoreKind,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Write per-step miner scores and ground truth to `miner.csv`.
    pub miner_dump: bool,
    pub train: TrainConfig,
    pub grid: Grid,
    pub plots: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            dataset: DatasetKind::Mnist,
            normal_class: 5,
            rho: 0.2,
            method: Method::Ncae,
            max_normal: None,
            output_dir: PathBuf::from("runs"),
            score: ScoreKind::Reconstruction,
            checkpoint_every: 0,
            miner_dump: false,
            train: TrainConfig::default(),
            grid: Grid::default(),
            plots: PlotConfig::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Dataset root [env: NCAE_DATA_DIR].
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// mnist or fashion-mnist.
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub normal_class: Option<u8>,
    /// Contamination ratio of the training set.
    #[arg(long)]
    pub rho: Option<f64>,
    /// ncae or cae.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// descending or ascending.
    #[arg(long)]
    pub ordering: Option<String>,
    #[arg(long)]
    pub max_normal: Option<usize>,
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> NcaeError {
    NcaeError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| config_err(format!("{}: {}", origin.display(), e.message())))
    }

    /// Reads the file named by `o.config` (if any) and applies the overrides.
    pub fn load(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    config_err(format!("config: cannot read {}: {e}", path.display()))
                })?;
                Self::from_toml(&text, path)?
            }
            None => RunConfig::default(),
        };
        cfg.apply(o)?;
        if cfg.data_dir.is_none() {
            cfg.data_dir = Some(
                std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from),
            );
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) -> Result<()> {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if o.data_dir.is_some() {
            self.data_dir = o.data_dir.clone();
        }
        set!(o.dataset => self.dataset);
        set!(o.normal_class => self.normal_class);
        set!(o.rho => self.rho);
        set!(o.method => self.method);
        set!(o.seed => self.train.seed);
        set!(o.epochs => self.train.epochs);
        set!(o.sigma => self.train.sigma);
        set!(o.tau => self.train.tau);
        set!(o.batch_size => self.train.batch_size);
        set!(o.lr => self.train.initial_lr);
        set!(o.output_dir => self.output_dir);
        if o.max_normal.is_some() {
            self.max_normal = o.max_normal;
        }
        if let Some(s) = &o.ordering {
            self.train.ordering = match s.to_ascii_lowercase().as_str() {
                "descending" => ScoreOrdering::Descending,
                "ascending" => ScoreOrdering::Ascending,
                other => {
                    return Err(config_err(format!(
                        "ordering: expected descending or ascending, got {other:?}"
                    )))
                }
            };
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| {
            config_err(format!(
                "train: {}",
                e.to_string().trim_start_matches("configuration error: ")
            ))
        })?;
        if self.normal_class > 9 {
            return Err(config_err(format!(
                "normal_class: must be 0-9, got {}",
                self.normal_class
            )));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(config_err(format!(
                "rho: must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if self.max_normal == Some(0) {
            return Err(config_err("max_normal: must be positive"));
        }
        if self.plots.latent_points < 2 {
            return Err(config_err("plots.latent_points: must be at least 2"));
        }
        if self.grid.rhos.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(config_err("grid.rhos: every ratio must lie in [0, 1)"));
        }
        if self.grid.normal_classes.iter().any(|&c| c > 9) {
            return Err(config_err("grid.normal_classes: classes must be 0-9"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> &Path {
        self.data_dir
            .as_deref()
            .unwrap_or_else(|| Path::new("data"))
    }

    /// Fails with a configuration error naming `data_dir` when the dataset
    /// directory is missing.
    pub fn require_data(&self, dataset: DatasetKind) -> Result<PathBuf> {
        let dir = self.data_dir().join(dataset.dir_name());
        if !dir.is_dir() {
            return Err(config_err(format!(
                "data_dir: {} does not exist (run `ncae fetch-data` or set {DATA_ENV})",
                dir.display()
            )));
        }
        Ok(self.data_dir().to_path_buf())
    }

    /// Hash of everything that affects a training run's outcome.
    pub fn run_hash(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            dataset: DatasetKind,
            normal_class: u8,
            rho: f64,
            method: Method,
            max_normal: Option<usize>,
            train: &'a TrainConfig,
        }
        hash_json(&View {
            dataset: self.dataset,
            normal_class: self.normal_class,
            rho: self.rho,
            method: self.method,
            max_normal: self.max_normal,
            train: &self.train,
        })
    }
}
