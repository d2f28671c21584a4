use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use ncae_core::data::{
    build_contaminated_trainset_capped, build_testset, load_split, Split, TrainsetManifest,
};
use ncae_core::evaluation::{
    ablation_sweep, aggregate, hash_json, read_results_jsonl, run_protocol, score_images,
    write_results_csv, AblationParam, ProtocolData, ProtocolOptions, ResultTable,
};
use ncae_core::training::{EpochRecord, MiningRecord, StepRecord, TrainObserver};
use ncae_core::{
    Checkpoint, ContaminatedTrainset, DatasetKind, ExperimentResult, ImageBatch, LabeledDataset,
    LatentCenter, Method, NcaeError, NcaeModel, Result,
};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot::{self, LineChart, Scatter, Series, BLUE};

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| std::io::Error::other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> NcaeError {
    NcaeError::Io(std::io::Error::other(e.to_string()))
}

fn load_train(cfg: &RunConfig) -> Result<LabeledDataset> {
    let root = cfg.require_data(cfg.dataset)?;
    let ds = load_split(&root, cfg.dataset, Split::Train)?;
    check_shape(cfg, &ds)?;
    Ok(ds)
}

fn load_test(cfg: &RunConfig, dataset: DatasetKind) -> Result<LabeledDataset> {
    let root = cfg.require_data(dataset)?;
    let ds = load_split(&root, dataset, Split::Test)?;
    check_shape(cfg, &ds)?;
    Ok(ds)
}

fn check_shape(cfg: &RunConfig, ds: &LabeledDataset) -> Result<()> {
    let want = cfg.train.model.input_shape();
    if ds.sample_shape() != want {
        return Err(NcaeError::Config(format!(
            "train.model: architecture expects samples shaped {want:?}, dataset has {:?}",
            ds.sample_shape()
        )));
    }
    Ok(())
}

fn build_trainset(cfg: &RunConfig, ds: &LabeledDataset) -> Result<ContaminatedTrainset> {
    build_contaminated_trainset_capped(
        ds,
        cfg.normal_class,
        cfg.rho,
        cfg.train.seed,
        cfg.max_normal,
    )
}

/// Record of a finished training run, written next to the checkpoint.
#[derive(Serialize)]
struct RunManifest<'a> {
    config_hash: String,
    seed: u64,
    method: Method,
    dataset: DatasetKind,
    normal_class: u8,
    rho: f64,
    version: &'static str,
    trainset_digest: String,
    trainset_len: usize,
    trainset_anomalies: usize,
    train_steps: usize,
    config: &'a RunConfig,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum HistoryLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

struct RunObserver {
    dir: PathBuf,
    history: BufWriter<File>,
    miner: Option<csv::Writer<File>>,
    checkpoint_every: usize,
    /// Training images, for fitting normalisation statistics of intermediate checkpoints.
    images: ImageBatch<f32>,
    steps: usize,
    total_epochs: usize,
    quiet: bool,
}

impl RunObserver {
    fn line(&mut self, l: &HistoryLine<'_>) -> Result<()> {
        serde_json::to_writer(&mut self.history, l)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        self.history.write_all(b"\n")?;
        Ok(())
    }
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.steps = record.step + 1;
        self.line(&HistoryLine::Step(record))
    }

    fn on_mining(&mut self, r: &MiningRecord<'_>) -> Result<()> {
        let Some(w) = &mut self.miner else {
            return Ok(());
        };
        let mut flagged = vec![false; r.scores.len()];
        r.contaminated.iter().for_each(|&i| flagged[i] = true);
        for (i, s) in r.scores.iter().enumerate() {
            w.write_record([
                r.epoch.to_string(),
                r.step.to_string(),
                i.to_string(),
                s.to_string(),
                r.hidden_truth[i].to_string(),
                u8::from(flagged[i]).to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(())
    }

    fn on_epoch(
        &mut self,
        record: &EpochRecord,
        model: &NcaeModel<f32>,
        center: &LatentCenter,
    ) -> Result<()> {
        self.line(&HistoryLine::Epoch(record))?;
        self.history.flush()?;
        if !self.quiet {
            let precision = record
                .miner_precision
                .map_or("-".into(), |p| format!("{p:.3}"));
            eprintln!(
                "epoch {:>3}/{} lr {:.0e} loss {:.4} recon {:.4} miner precision {precision}",
                record.epoch + 1,
                self.total_epochs,
                record.lr,
                record.mean_total,
                record.mean_recon_normal
            );
        }
        if self.checkpoint_every > 0 && (record.epoch + 1) % self.checkpoint_every == 0 {
            let path = self
                .dir
                .join(format!("checkpoint-epoch{:03}.json", record.epoch + 1));
            let mut model = model.clone();
            model.calibrate(&self.images, 256)?;
            Checkpoint::new(model, center.clone(), self.steps as u64).save(&path)?;
        }
        Ok(())
    }
}

pub fn train(cfg: &RunConfig, quiet: bool) -> Result<()> {
    let start = Instant::now();
    let ds = load_train(cfg)?;
    let trainset = build_trainset(cfg, &ds)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("trainset.json"), &trainset.manifest())?;
    fs::write(
        dir.join("config.toml"),
        toml::to_string(cfg).map_err(|e| NcaeError::Config(e.to_string()))?,
    )?;
    if !quiet {
        eprintln!(
            "{} class {} rho {}: {} samples ({} injected), {} {} epochs",
            cfg.dataset.display_name(),
            cfg.normal_class,
            cfg.rho,
            trainset.len(),
            trainset.anomaly_count(),
            cfg.method.tag(),
            cfg.train.epochs
        );
    }
    let miner = if cfg.miner_dump {
        let mut w = csv::Writer::from_path(dir.join("miner.csv")).map_err(csv_err)?;
        w.write_record(["epoch", "step", "index", "score", "truth", "flagged"])
            .map_err(csv_err)?;
        Some(w)
    } else {
        None
    };
    let mut obs = RunObserver {
        dir: dir.clone(),
        history: BufWriter::new(File::create(dir.join("history.jsonl"))?),
        miner,
        checkpoint_every: cfg.checkpoint_every,
        images: trainset.images.clone(),
        steps: 0,
        total_epochs: cfg.train.epochs,
        quiet,
    };
    let out = ncae_core::train_with(&cfg.train, &trainset, cfg.method, &mut obs)?;
    obs.history.flush()?;
    if let Some(w) = &mut obs.miner {
        w.flush()?;
    }
    let steps = out.history.steps.len();
    let ckpt = dir.join("checkpoint.json");
    Checkpoint::new(out.model, out.center, steps as u64).save(&ckpt)?;
    write_json(
        &dir.join("manifest.json"),
        &RunManifest {
            config_hash: cfg.run_hash(),
            seed: cfg.train.seed,
            method: cfg.method,
            dataset: cfg.dataset,
            normal_class: cfg.normal_class,
            rho: cfg.rho,
            version: env!("CARGO_PKG_VERSION"),
            trainset_digest: trainset.digest(),
            trainset_len: trainset.len(),
            trainset_anomalies: trainset.anomaly_count(),
            train_steps: steps,
            config: cfg,
        },
    )?;
    println!(
        "trained {steps} steps in {:.1}s; checkpoint {}",
        start.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let (have, want) = (&ck.model.config, &cfg.train.model);
    if have.latent_dim != want.latent_dim {
        return Err(NcaeError::Checkpoint(format!(
            "{}: latent_dim is {} but the configuration says {}",
            path.display(),
            have.latent_dim,
            want.latent_dim
        )));
    }
    if have.input_shape() != want.input_shape() {
        return Err(NcaeError::Checkpoint(format!(
            "{}: input shape {:?} does not match the configured {:?}",
            path.display(),
            have.input_shape(),
            want.input_shape()
        )));
    }
    Ok(ck)
}

#[derive(Serialize)]
struct Metrics {
    auc: f64,
    dataset: DatasetKind,
    normal_class: u8,
    score: ncae_core::evaluation::ScoreKind,
    test_normals: usize,
    test_anomalies: usize,
    checkpoint_train_step: u64,
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let test = build_testset(&load_test(cfg, cfg.dataset)?, cfg.normal_class)?;
    let scores = score_images(
        &ck.model,
        &ck.center,
        &test.images,
        cfg.score,
        cfg.train.batch_size,
        cfg.train.seed,
    )?;
    let roc = ncae_core::roc_auc(&scores, &test.labels)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("roc.csv")).map_err(csv_err)?;
    w.write_record(["threshold", "fpr", "tpr"])
        .map_err(csv_err)?;
    for i in 0..roc.fpr.len() {
        w.write_record([
            roc.thresholds[i].to_string(),
            roc.fpr[i].to_string(),
            roc.tpr[i].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let anomalies = test.labels.iter().filter(|&&l| l == 1).count();
    write_json(
        &dir.join("metrics.json"),
        &Metrics {
            auc: roc.auc,
            dataset: cfg.dataset,
            normal_class: cfg.normal_class,
            score: cfg.score,
            test_normals: test.labels.len() - anomalies,
            test_anomalies: anomalies,
            checkpoint_train_step: ck.train_step,
        },
    )?;
    println!(
        "AUC {:.4} ({} normal, {anomalies} anomalous test samples)",
        roc.auc,
        test.labels.len() - anomalies
    );
    Ok(())
}

fn protocol_data(cfg: &RunConfig, dataset: DatasetKind) -> Result<ProtocolData> {
    let root = cfg.require_data(dataset)?;
    let train = load_split(&root, dataset, Split::Train)?;
    check_shape(cfg, &train)?;
    let test = load_split(&root, dataset, Split::Test)?;
    Ok(ProtocolData {
        name: dataset.display_name().to_string(),
        train,
        test,
    })
}

fn protocol_options(cfg: &RunConfig, results: PathBuf, quiet: bool) -> ProtocolOptions {
    ProtocolOptions {
        results_path: Some(results),
        max_normal: cfg.max_normal,
        score: cfg.score,
        progress: !quiet,
    }
}

pub struct AblateRequest {
    pub param: AblationParam,
    pub values: Vec<f64>,
    pub classes: Vec<u8>,
    pub seeds: Vec<u64>,
}

pub fn ablate(cfg: &RunConfig, req: &AblateRequest, quiet: bool) -> Result<()> {
    let data = protocol_data(cfg, cfg.dataset)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let name = req.param.name();
    let opts = protocol_options(cfg, dir.join(format!("ablation-{name}-cells.jsonl")), quiet);
    let report = ablation_sweep(
        req.param,
        &req.values,
        &cfg.train,
        &req.classes,
        &req.seeds,
        &data,
        &opts,
    )?;

    let mut w =
        csv::Writer::from_path(dir.join(format!("ablation-{name}.csv"))).map_err(csv_err)?;
    for p in &report.points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;
    let symbol = match req.param {
        AblationParam::Sigma => "sigma",
        AblationParam::Tau => "tau",
    };
    let chart = LineChart {
        title: format!(
            "{} class {:?}, rho 0.2: AUC vs {symbol}",
            data.name, req.classes
        ),
        x_label: symbol.into(),
        y_label: "AUC".into(),
        series: vec![Series {
            name: "NCAE".into(),
            color: BLUE,
            points: report
                .points
                .iter()
                .map(|p| (p.value, p.mean_auc, p.std_auc.max(0.0)))
                .collect(),
        }],
        data_ticks: true,
        log_x: req.values.iter().all(|v| *v > 0.0),
    };
    plot::render(
        &dir.join(format!("ablation-{name}")),
        &cfg.plots.formats,
        |c| chart.draw(c),
    )?;
    for p in &report.points {
        println!(
            "{name} = {:<8} AUC {:.4} ± {:.4} (n = {})",
            p.value, p.mean_auc, p.std_auc, p.n
        );
    }
    report_failures(&report.failures)?;
    Ok(())
}

fn report_failures(failures: &[ncae_core::evaluation::CellFailure]) -> Result<()> {
    for f in failures {
        eprintln!(
            "failed: {} {} class {} rho {} seed {}: {}",
            f.dataset,
            f.method.tag(),
            f.normal_class,
            f.rho,
            f.seed,
            f.error
        );
    }
    Ok(())
}

/// Top-two principal components, or the raw coordinates when `d == 2`.
/// Component signs are fixed so the largest loading is positive.
pub fn project_2d(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = rows.len();
    if n < 2 {
        return Err(NcaeError::Argument(format!(
            "need at least 2 latent points to project, got {n}"
        )));
    }
    let d = rows[0].len();
    if d == 2 {
        return Ok(rows.iter().map(|r| (r[0], r[1])).collect());
    }
    if d < 2 {
        return Err(NcaeError::Argument(format!(
            "cannot plot a {d}-dimensional latent space in 2-D"
        )));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let s = if big < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| x * s).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let dot = |a: &[f64]| (0..d).map(|j| centered[(i, j)] * a[j]).sum::<f64>();
            (dot(&axes[0]), dot(&axes[1]))
        })
        .collect())
}

pub fn plot_latent(cfg: &RunConfig, checkpoint: &Path, points: usize, density: bool) -> Result<()> {
    if points < 2 {
        return Err(NcaeError::Argument(format!(
            "plot-latent needs at least 2 points, got {points}"
        )));
    }
    let ck = load_checkpoint(cfg, checkpoint)?;
    let ds = load_train(cfg)?;
    let manifest_path = checkpoint.with_file_name("trainset.json");
    let trainset = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path)?;
        let m: TrainsetManifest = serde_json::from_str(&text)
            .map_err(|e| NcaeError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
        m.rebuild(&ds)?
    } else {
        build_trainset(cfg, &ds)?
    };
    if trainset.len() < 2 {
        return Err(NcaeError::Argument(format!(
            "trainset has {} samples; need at least 2",
            trainset.len()
        )));
    }
    let k = points.min(trainset.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut idx = index::sample(&mut rng, trainset.len(), k).into_vec();
    idx.sort_unstable();
    let latents = ck.model.encode(&trainset.images.select(&idx))?;
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|i| latents.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let xy = project_2d(&rows)?;
    let pts: Vec<(f64, f64, bool)> = xy
        .iter()
        .zip(&idx)
        .map(|(p, &i)| (p.0, p.1, trainset.hidden_truth[i] == 1))
        .collect();

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("latent.csv")).map_err(csv_err)?;
    w.write_record(["index", "x", "y", "contaminated"])
        .map_err(csv_err)?;
    for (p, &i) in pts.iter().zip(&idx) {
        w.write_record([
            i.to_string(),
            p.0.to_string(),
            p.1.to_string(),
            u8::from(p.2).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let density = density.then(|| {
        let n = 60;
        (n, plot::kde_grid(&pts, Scatter::bounds(&pts), n))
    });
    let scatter = Scatter {
        title: format!(
            "Latent codes, {} class {}",
            cfg.dataset.display_name(),
            cfg.normal_class
        ),
        points: pts,
        density,
        labels: ["normal".into(), "contaminated".into()],
    };
    let written = plot::render(&dir.join("latent"), &cfg.plots.formats, |c| scatter.draw(c))?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// How the grid's cells map onto the averaged experiments, recorded with the results.
#[derive(Serialize)]
struct ProtocolManifest<'a> {
    grid: &'a ncae_core::evaluation::Grid,
    datasets: Vec<&'static str>,
    cells: usize,
    interpretation: &'static str,
    alternative: &'static str,
    train: &'a ncae_core::TrainConfig,
    config_hash: String,
}

pub fn reproduce_table(
    cfg: &RunConfig,
    datasets: &[DatasetKind],
    run: bool,
    quiet: bool,
) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let cells = dir.join("cells.jsonl");
    write_json(
        &dir.join("protocol.json"),
        &ProtocolManifest {
            grid: &cfg.grid,
            datasets: datasets.iter().map(|d| d.display_name()).collect(),
            cells: cfg.grid.cells() * datasets.len(),
            interpretation:
                "each normal class x each seed; anomalies drawn from the pooled other nine classes",
            alternative: "one normal class x nine single anomaly classes x ten seeds (not run)",
            train: &cfg.train,
            config_hash: hash_json(&(&cfg.grid, &cfg.train, cfg.max_normal, cfg.score)),
        },
    )?;
    if run {
        for &d in datasets {
            let data = protocol_data(cfg, d)?;
            let report = run_protocol(
                &cfg.grid,
                &cfg.train,
                &data,
                &protocol_options(cfg, cells.clone(), quiet),
            )?;
            if !quiet {
                eprintln!(
                    "{}: {} cells ({} resumed), {} failed",
                    data.name,
                    report.results.len(),
                    report.resumed,
                    report.failures.len()
                );
            }
            report_failures(&report.failures)?;
        }
    }
    let results: Vec<ExperimentResult> = if cells.is_file() {
        read_results_jsonl(&cells)?
    } else {
        Vec::new()
    };
    let wanted: Vec<&str> = datasets.iter().map(|d| d.display_name()).collect();
    let results: Vec<ExperimentResult> = results
        .into_iter()
        .filter(|r| {
            wanted.contains(&r.dataset.as_str())
                && cfg.grid.normal_classes.contains(&r.normal_class)
                && cfg.grid.seeds.contains(&r.seed)
                && cfg.grid.methods.contains(&r.method)
                && cfg.grid.rhos.iter().any(|x| x.to_bits() == r.rho.to_bits())
        })
        .collect();
    write_results_csv(&results, File::create(dir.join("results.csv"))?)?;
    write_json(&dir.join("results.json"), &results)?;
    let rows = aggregate(&results);
    let table = ResultTable::new(&rows, &wanted, &cfg.grid.methods, &cfg.grid.rhos);
    table.write_csv(File::create(dir.join("table.csv"))?)?;
    let text = table.to_text();
    fs::write(dir.join("table.txt"), &text)?;
    print!("{text}");
    let gaps = table.gaps();
    if !gaps.is_empty() {
        eprintln!("{} table cells have no results:", gaps.len());
        for (d, rho, m) in gaps {
            eprintln!("  {d} {} rho {rho}", m.tag());
        }
    }
    Ok(())
}

pub fn fetch_data(dest: &Path, dataset: &str, script: Option<&Path>) -> Result<()> {
    let script = match script {
        Some(p) => p.to_path_buf(),
        None => locate_script()?,
    };
    let status = std::process::Command::new("python3")
        .arg(&script)
        .arg("--dest")
        .arg(dest)
        .arg("--dataset")
        .arg(dataset)
        .status()
        .map_err(|e| NcaeError::Io(std::io::Error::other(format!("cannot run python3: {e}"))))?;
    if !status.success() {
        return Err(NcaeError::Io(std::io::Error::other(format!(
            "{} exited with {status}",
            script.display()
        ))));
    }
    Ok(())
}

fn locate_script() -> Result<PathBuf> {
    let here = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/fetch_data.py");
    let candidates = [PathBuf::from("scripts/fetch_data.py"), here];
    candidates.into_iter().find(|p| p.is_file()).ok_or_else(|| {
        NcaeError::Config("script: cannot find scripts/fetch_data.py; pass --script".into())
    })
}
