//! Test-time scoring, ROC/AUC, and the experiment grid.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    build_contaminated_trainset_capped, build_testset, ContaminatedTrainset, LabeledDataset,
    Testset,
};
use crate::error::{arg_err, NcaeError, Result};
use crate::losses::per_sample_errors;
use crate::mining::{build_dictionary, contamination_scores};
use crate::model::{ImageBatch, LatentCenter, NcaeModel};
use crate::nn::Scalar;
use crate::training::{
    encode_chunked, rng_stream, train_with, Method, TrainConfig, TrainOutput, CHUNK,
};

/// Contamination ratio used by the ablation sweeps.
pub const ABLATION_RHO: f64 = 0.2;

/// RNG stream for the dictionary of the composite score.
const SCORE_STREAM: u64 = 4;

/// Per-sample pixel-mean reconstruction error; higher is more anomalous.
pub fn anomaly_score<T: Scalar>(model: &NcaeModel<T>, batch: &ImageBatch<T>) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut out = Vec::with_capacity(batch.len());
    for chunk in idx.chunks(CHUNK) {
        let x = batch.select(chunk);
        out.extend(per_sample_errors(&x, &model.reconstruct(&x)?)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    Reconstruction,
    /// Reconstruction error minus the contamination score against a
    /// dictionary generated around the final center.
    Composite,
}

/// Scores with the requested kind. `seed` drives the composite dictionary.
pub fn score_images(
    model: &NcaeModel<f32>,
    center: &LatentCenter,
    images: &ImageBatch<f32>,
    kind: ScoreKind,
    dictionary_rows: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let recon = anomaly_score(model, images)?;
    match kind {
        ScoreKind::Reconstruction => Ok(recon),
        ScoreKind::Composite => {
            let dict = build_dictionary(
                model,
                center,
                dictionary_rows,
                &mut rng_stream(seed, SCORE_STREAM),
            )?;
            let c = contamination_scores(&encode_chunked(model, images)?, &dict)?;
            Ok(recon.iter().zip(&c).map(|(r, c)| r - c).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Decision thresholds; a sample is flagged when its score is `>=` the
    /// threshold. The first entry is `+inf`.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

/// ROC curve and AUC for binary `labels` (1 = anomaly).
///
/// The AUC is the Mann-Whitney statistic with ties counted half, computed
/// from mid-ranks. The curve sweeps every distinct score.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(arg_err(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(arg_err(format!("labels must be 0 or 1, found {l}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(arg_err("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(arg_err(
            "ROC needs at least one positive and one negative label",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    let auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * n);

    let mut thresholds = vec![f64::INFINITY];
    let (mut fpr, mut tpr) = (vec![0.0], vec![0.0]);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let s = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == s {
            if labels[order[k - 1]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        thresholds.push(s);
        fpr.push(fp as f64 / n);
        tpr.push(tp as f64 / p);
    }
    Ok(RocResult {
        thresholds,
        fpr,
        tpr,
        auc,
    })
}

/// Trapezoidal area under a curve given as matching `x`, `y` vectors.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// One trained-and-scored cell of the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    pub method: Method,
    pub normal_class: u8,
    pub rho: f64,
    pub seed: u64,
    pub auc: f64,
    pub runtime_secs: f64,
    pub config_hash: String,
    /// Miner precision over the last epoch, when anything was mined.
    pub miner_precision: Option<f64>,
}

impl ExperimentResult {
    fn key(&self) -> CellKey {
        CellKey::new(
            &self.dataset,
            self.method,
            self.normal_class,
            self.rho,
            self.seed,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct CellKey {
    dataset: String,
    method: Method,
    normal_class: u8,
    rho_bits: u64,
    seed: u64,
}

impl CellKey {
    fn new(dataset: &str, method: Method, normal_class: u8, rho: f64, seed: u64) -> Self {
        CellKey {
            dataset: dataset.to_string(),
            method,
            normal_class,
            rho_bits: rho.to_bits(),
            seed,
        }
    }
}

/// Everything that determines a cell's outcome, hashed into `config_hash`.
#[derive(Serialize)]
struct CellSpec<'a> {
    dataset: &'a str,
    method: Method,
    normal_class: u8,
    rho: f64,
    seed: u64,
    max_normal: Option<usize>,
    score: ScoreKind,
    train: &'a TrainConfig,
}

/// SHA-256 of the JSON serialisation, hex encoded.
pub fn hash_json<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    hex::encode(Sha256::digest(bytes))
}

/// Train and test splits of one dataset.
pub struct ProtocolData {
    pub name: String,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub normal_classes: Vec<u8>,
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            normal_classes: (0..10).collect(),
            rhos: vec![0.0, 0.01, 0.05, 0.1, 0.2],
            seeds: (0..10).collect(),
            methods: vec![Method::Cae, Method::Ncae],
        }
    }
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.normal_classes.len() * self.rhos.len() * self.seeds.len() * self.methods.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ProtocolOptions {
    /// JSON-lines file of finished cells; read to resume, appended to as cells finish.
    pub results_path: Option<PathBuf>,
    pub max_normal: Option<usize>,
    pub score: ScoreKind,
    /// Print one line per cell to standard error.
    pub progress: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub dataset: String,
    pub method: Method,
    pub normal_class: u8,
    pub rho: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProtocolReport {
    /// In grid order, finished cells only.
    pub results: Vec<ExperimentResult>,
    pub failures: Vec<CellFailure>,
    /// Cells taken from the results file instead of being re-run.
    pub resumed: usize,
}

/// Trains one cell and scores the test split.
pub fn evaluate_cell(
    dataset: &str,
    config: &TrainConfig,
    trainset: &ContaminatedTrainset,
    testset: &Testset,
    method: Method,
    score: ScoreKind,
) -> Result<(ExperimentResult, TrainOutput)> {
    let start = Instant::now();
    let out = train_with(config, trainset, method, &mut ())?;
    let scores = score_images(
        &out.model,
        &out.center,
        &testset.images,
        score,
        config.batch_size,
        config.seed,
    )?;
    let roc = roc_auc(&scores, &testset.labels)?;
    let spec = CellSpec {
        dataset,
        method,
        normal_class: trainset.normal_class,
        rho: trainset.rho,
        seed: config.seed,
        max_normal: trainset.max_normal,
        score,
        train: config,
    };
    let result = ExperimentResult {
        dataset: dataset.to_string(),
        method,
        normal_class: trainset.normal_class,
        rho: trainset.rho,
        seed: config.seed,
        auc: roc.auc,
        runtime_secs: start.elapsed().as_secs_f64(),
        config_hash: hash_json(&spec),
        miner_precision: out.history.tail_precision(1),
    };
    Ok((result, out))
}

/// The plain autoencoder baseline on the same data and architecture.
pub fn cae_baseline(
    config: &TrainConfig,
    trainset: &ContaminatedTrainset,
    testset: &Testset,
) -> Result<ExperimentResult> {
    evaluate_cell(
        "",
        config,
        trainset,
        testset,
        Method::Cae,
        ScoreKind::Reconstruction,
    )
    .map(|(r, _)| r)
}

fn read_results(path: &Path) -> Result<Vec<ExperimentResult>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| NcaeError::Ingestion {
            path: path.to_path_buf(),
            field: "results line",
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.push(r);
    }
    Ok(out)
}

fn append_result(path: &Path, r: &ExperimentResult) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(
        f,
        "{}",
        serde_json::to_string(r).expect("result serialises")
    )?;
    Ok(())
}

/// Runs every cell of `grid`. Cells already in the results file with the
/// same configuration hash are reused; a failing cell is recorded and the
/// rest still run.
pub fn run_protocol(
    grid: &Grid,
    base: &TrainConfig,
    data: &ProtocolData,
    opts: &ProtocolOptions,
) -> Result<ProtocolReport> {
    base.validate()?;
    if grid.cells() == 0 {
        return Err(arg_err("experiment grid is empty"));
    }
    let done: HashMap<(CellKey, String), ExperimentResult> = match &opts.results_path {
        Some(p) => read_results(p)?
            .into_iter()
            .map(|r| ((r.key(), r.config_hash.clone()), r))
            .collect(),
        None => HashMap::new(),
    };

    let mut report = ProtocolReport::default();
    let total = grid.cells();
    let mut index = 0;
    for &normal_class in &grid.normal_classes {
        let testset = build_testset(&data.test, normal_class)?;
        for &rho in &grid.rhos {
            for &seed in &grid.seeds {
                for &method in &grid.methods {
                    index += 1;
                    let config = TrainConfig {
                        seed,
                        ..base.clone()
                    };
                    let spec = CellSpec {
                        dataset: &data.name,
                        method,
                        normal_class,
                        rho,
                        seed,
                        max_normal: opts.max_normal,
                        score: opts.score,
                        train: &config,
                    };
                    let key = (
                        CellKey::new(&data.name, method, normal_class, rho, seed),
                        hash_json(&spec),
                    );
                    if let Some(r) = done.get(&key) {
                        report.results.push(r.clone());
                        report.resumed += 1;
                        continue;
                    }
                    let outcome = build_contaminated_trainset_capped(
                        &data.train,
                        normal_class,
                        rho,
                        seed,
                        opts.max_normal,
                    )
                    .and_then(|t| {
                        evaluate_cell(&data.name, &config, &t, &testset, method, opts.score)
                    });
                    match outcome {
                        Ok((r, _)) => {
                            if opts.progress {
                                eprintln!(
                                    "[{index}/{total}] {} class {normal_class} rho {rho} seed {seed} {}: auc {:.4} ({:.1}s)",
                                    data.name,
                                    method.tag(),
                                    r.auc,
                                    r.runtime_secs
                                );
                            }
                            if let Some(p) = &opts.results_path {
                                append_result(p, &r)?;
                            }
                            report.results.push(r);
                        }
                        Err(e) => {
                            if opts.progress {
                                eprintln!("[{index}/{total}] class {normal_class} rho {rho} seed {seed} {}: failed: {e}", method.tag());
                            }
                            report.failures.push(CellFailure {
                                dataset: data.name.clone(),
                                method,
                                normal_class,
                                rho,
                                seed,
                                error: e.to_string(),
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Mean and sample standard deviation of the AUC per (dataset, method, ρ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: Method,
    pub rho: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl AggregateRow {
    /// `mean±std` in percentage points with one decimal.
    pub fn formatted(&self) -> String {
        format!("{:.1}±{:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

pub fn aggregate(results: &[ExperimentResult]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, u64, Method), Vec<f64>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.dataset.clone(), r.rho.to_bits(), r.method))
            .or_default()
            .push(r.auc);
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_iter()
        .map(|((dataset, rho, method), aucs)| {
            let (mean, std) = mean_std(&aucs);
            AggregateRow {
                dataset,
                method,
                rho: f64::from_bits(rho),
                n: aucs.len(),
                mean,
                std,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.dataset
            .cmp(&b.dataset)
            .then(a.rho.total_cmp(&b.rho))
            .then(a.method.cmp(&b.method))
    });
    rows
}

/// Table laid out with one row per (dataset, ρ) and one column per method.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub methods: Vec<Method>,
    pub rows: Vec<(String, f64, Vec<Option<AggregateRow>>)>,
}

impl ResultTable {
    /// Rows for every dataset seen in `rows` or listed in `expected_datasets`,
    /// each with at least the `expected_rhos`.
    pub fn new(
        rows: &[AggregateRow],
        expected_datasets: &[&str],
        methods: &[Method],
        expected_rhos: &[f64],
    ) -> Self {
        let mut keys: Vec<(String, f64)> = Vec::new();
        for r in rows {
            if !keys.iter().any(|(d, rho)| *d == r.dataset && *rho == r.rho) {
                keys.push((r.dataset.clone(), r.rho));
            }
        }
        let seen = keys.iter().map(|(d, _)| d.clone());
        let datasets: Vec<String> = seen
            .chain(expected_datasets.iter().map(|d| d.to_string()))
            .fold(Vec::new(), |mut v, d| {
                if !v.contains(&d) {
                    v.push(d);
                }
                v
            });
        for d in &datasets {
            for &rho in expected_rhos {
                if !keys.iter().any(|(kd, kr)| kd == d && *kr == rho) {
                    keys.push((d.clone(), rho));
                }
            }
        }
        keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let rows = keys
            .into_iter()
            .map(|(d, rho)| {
                let cells = methods
                    .iter()
                    .map(|m| {
                        rows.iter()
                            .find(|r| r.dataset == d && r.rho == rho && r.method == *m)
                            .cloned()
                    })
                    .collect();
                (d, rho, cells)
            })
            .collect();
        ResultTable {
            methods: methods.to_vec(),
            rows,
        }
    }

    /// Cells with no results, as `(dataset, ρ, method)`.
    pub fn gaps(&self) -> Vec<(String, f64, Method)> {
        let mut out = Vec::new();
        for (d, rho, cells) in &self.rows {
            for (m, c) in self.methods.iter().zip(cells) {
                if c.is_none() {
                    out.push((d.clone(), *rho, *m));
                }
            }
        }
        out
    }

    /// Aligned plain-text rendering; missing cells show as `--`.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Dataset".to_string(), "rho".to_string()];
        header.extend(self.methods.iter().map(|m| m.tag().to_string()));
        let mut lines = vec![header];
        for (d, rho, cells) in &self.rows {
            let mut line = vec![d.clone(), format!("{rho:.2}")];
            line.extend(
                cells
                    .iter()
                    .map(|c| c.as_ref().map_or("--".to_string(), |c| c.formatted())),
            );
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| {
                lines
                    .iter()
                    .map(|l| l[j].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, w))| {
                    let pad = w - c.chars().count();
                    if j < 2 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }

    /// CSV with raw `[0, 1]` means and standard deviations plus the formatted cell.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["dataset".to_string(), "rho".to_string()];
        for m in &self.methods {
            let t = m.tag().to_lowercase();
            header.extend([
                format!("{t}_mean"),
                format!("{t}_std"),
                format!("{t}_n"),
                format!("{t}_cell"),
            ]);
        }
        wr.write_record(&header).map_err(csv_err)?;
        for (d, rho, cells) in &self.rows {
            let mut rec = vec![d.clone(), rho.to_string()];
            for c in cells {
                match c {
                    Some(c) => rec.extend([
                        c.mean.to_string(),
                        c.std.to_string(),
                        c.n.to_string(),
                        c.formatted(),
                    ]),
                    None => {
                        rec.extend([String::new(), String::new(), "0".to_string(), String::new()])
                    }
                }
            }
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> NcaeError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => NcaeError::Io(e),
        other => NcaeError::Argument(format!("csv: {other:?}")),
    }
}

pub fn write_results_csv<W: Write>(results: &[ExperimentResult], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in results {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<ExperimentResult>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

pub fn read_results_jsonl(path: &Path) -> Result<Vec<ExperimentResult>> {
    read_results(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationParam {
    Sigma,
    Tau,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Sigma => "sigma",
            AblationParam::Tau => "tau",
        }
    }

    pub fn apply(self, base: &TrainConfig, value: f64) -> TrainConfig {
        match self {
            AblationParam::Sigma => TrainConfig {
                sigma: value,
                ..base.clone()
            },
            AblationParam::Tau => TrainConfig {
                tau: value,
                ..base.clone()
            },
        }
    }
}

impl std::str::FromStr for AblationParam {
    type Err = NcaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigma" => Ok(AblationParam::Sigma),
            "tau" => Ok(AblationParam::Tau),
            other => Err(arg_err(format!("unknown ablation parameter {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: f64,
    pub n: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub param: AblationParam,
    pub points: Vec<AblationPoint>,
    pub results: Vec<ExperimentResult>,
    pub failures: Vec<CellFailure>,
}

/// NCAE at ρ = 0.2 for each value of `param`, averaged over classes and seeds.
pub fn ablation_sweep(
    param: AblationParam,
    values: &[f64],
    base: &TrainConfig,
    normal_classes: &[u8],
    seeds: &[u64],
    data: &ProtocolData,
    opts: &ProtocolOptions,
) -> Result<AblationReport> {
    if values.is_empty() {
        return Err(arg_err("ablation needs at least one value"));
    }
    let grid = Grid {
        normal_classes: normal_classes.to_vec(),
        rhos: vec![ABLATION_RHO],
        seeds: seeds.to_vec(),
        methods: vec![Method::Ncae],
    };
    let mut report = AblationReport {
        param,
        points: Vec::new(),
        results: Vec::new(),
        failures: Vec::new(),
    };
    for &v in values {
        let config = param.apply(base, v);
        let r = run_protocol(&grid, &config, data, opts)?;
        let aucs: Vec<f64> = r.results.iter().map(|r| r.auc).collect();
        let (mean_auc, std_auc) = if aucs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&aucs)
        };
        report.points.push(AblationPoint {
            value: v,
            n: aucs.len(),
            mean_auc,
            std_auc,
        });
        report.results.extend(r.results);
        report.failures.extend(r.failures);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_toy;
    use crate::model::{Architecture, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap().auc,
            1.0
        );
        assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap().auc, 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(NcaeError::Argument(_))
        ));
        assert!(roc_auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_and_curve_is_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(2..200);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..20) as f64) / 4.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let r = roc_auc(&scores, &labels).unwrap();
            assert!((r.auc - pairwise(&scores, &labels)).abs() <= 1e-9);
            assert!((r.auc - trapezoid(&r.fpr, &r.tpr)).abs() <= 1e-9);
            assert_eq!((r.fpr[0], r.tpr[0]), (0.0, 0.0));
            assert_eq!((*r.fpr.last().unwrap(), *r.tpr.last().unwrap()), (1.0, 1.0));
            assert!(
                r.fpr.windows(2).all(|w| w[0] <= w[1]) && r.tpr.windows(2).all(|w| w[0] <= w[1])
            );
        }
    }

    #[test]
    fn aggregate_and_table() {
        let mk = |method, rho, auc| ExperimentResult {
            dataset: "MNIST".into(),
            method,
            normal_class: 5,
            rho,
            seed: 0,
            auc,
            runtime_secs: 1.0,
            config_hash: "x".into(),
            miner_precision: None,
        };
        let results = vec![
            mk(Method::Ncae, 0.2, 0.9),
            mk(Method::Ncae, 0.2, 0.8),
            mk(Method::Cae, 0.2, 0.7),
        ];
        let rows = aggregate(&results);
        assert_eq!(rows.len(), 2);
        let ncae = rows.iter().find(|r| r.method == Method::Ncae).unwrap();
        assert!((ncae.mean - 0.85).abs() < 1e-12);
        assert!((ncae.std - (0.005f64).sqrt()).abs() < 1e-12);
        assert_eq!(ncae.formatted(), "85.0±7.1");

        let table = ResultTable::new(
            &rows,
            &["F-MNIST"],
            &[Method::Cae, Method::Ncae],
            &[0.1, 0.2],
        );
        // MNIST lacks rho 0.1; F-MNIST has no rows at all
        assert_eq!(table.gaps().len(), 2 + 4);
        let text = table.to_text();
        assert!(text.contains("85.0±7.1") && text.contains("--"), "{text}");
        let mut csv = Vec::new();
        table.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 4);
    }

    #[test]
    fn results_csv_roundtrips_bytewise() {
        let r = ExperimentResult {
            dataset: "F-MNIST".into(),
            method: Method::Cae,
            normal_class: 3,
            rho: 0.1,
            seed: 7,
            auc: 0.123456789012345,
            runtime_secs: 12.5,
            config_hash: "abc".into(),
            miner_precision: Some(0.3),
        };
        let mut a = Vec::new();
        write_results_csv(&[r.clone(), r], &mut a).unwrap();
        let back = read_results_csv(a.as_slice()).unwrap();
        let mut b = Vec::new();
        write_results_csv(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    fn toy_data() -> ProtocolData {
        ProtocolData {
            name: "toy".into(),
            train: gaussian_toy(150, 1),
            test: gaussian_toy(60, 2),
        }
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 64,
            model: ModelConfig {
                architecture: Architecture::Mlp {
                    input_dim: 2,
                    hidden: vec![8],
                },
                latent_dim: 2,
                leak: 0.1,
                latent_disc_hidden: vec![8],
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn protocol_runs_resumes_and_records_failures() {
        let dir = tempfile::tempdir().unwrap();
        let opts = ProtocolOptions {
            results_path: Some(dir.path().join("cells.jsonl")),
            ..Default::default()
        };
        let grid = Grid {
            normal_classes: vec![0],
            rhos: vec![0.0, 0.2],
            seeds: vec![1, 2],
            methods: vec![Method::Ncae],
        };
        let data = toy_data();
        let first = run_protocol(&grid, &toy_config(), &data, &opts).unwrap();
        assert_eq!((first.results.len(), first.resumed), (4, 0));
        let again = run_protocol(&grid, &toy_config(), &data, &opts).unwrap();
        assert_eq!(again.resumed, 4);
        assert_eq!(
            again.results.iter().map(|r| r.auc).collect::<Vec<_>>(),
            first.results.iter().map(|r| r.auc).collect::<Vec<_>>()
        );
        let fresh = run_protocol(&grid, &toy_config(), &data, &ProtocolOptions::default()).unwrap();
        assert_eq!(fresh.results[3].auc, first.results[3].auc);

        let bad = Grid {
            rhos: vec![0.2, 0.9],
            seeds: vec![1],
            ..grid
        };
        let r = run_protocol(&bad, &toy_config(), &data, &ProtocolOptions::default()).unwrap();
        assert_eq!((r.results.len(), r.failures.len()), (1, 1));
    }

    #[test]
    fn ablation_yields_one_point_per_value() {
        let data = toy_data();
        let r = ablation_sweep(
            AblationParam::Tau,
            &[0.05, 0.1, 0.2],
            &toy_config(),
            &[0],
            &[1],
            &data,
            &ProtocolOptions::default(),
        )
        .unwrap();
        assert_eq!(r.points.len(), 3);
        assert!(r.results.iter().all(|x| x.rho == ABLATION_RHO));
        assert!(ablation_sweep(
            AblationParam::Sigma,
            &[],
            &toy_config(),
            &[0],
            &[1],
            &data,
            &ProtocolOptions::default()
        )
        .is_err());
    }

    #[test]
    fn score_is_singleton_reconstruction_loss() {
        let data = toy_data();
        let t = crate::data::build_contaminated_trainset(&data.train, 0, 0.1, 1).unwrap();
        let out = crate::training::train(&toy_config(), &t).unwrap();
        let x = t.images.select(&[3]);
        let s = anomaly_score(&out.model, &x).unwrap();
        let l =
            crate::losses::reconstruction_loss(&x, &out.model.reconstruct(&x).unwrap()).unwrap();
        assert_eq!(s, vec![l]);
        let comp = score_images(
            &out.model,
            &out.center,
            &t.images,
            ScoreKind::Composite,
            16,
            0,
        )
        .unwrap();
        assert_eq!(comp.len(), t.len());
    }
}
