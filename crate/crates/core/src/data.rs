//! MNIST-style datasets and the one-class contamination protocol.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg_err, NcaeError, Result};
use crate::model::ImageBatch;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// RNG stream reserved for trainset construction.
const DATA_STREAM: u64 = 3;

/// Images with integer class labels, pixels already scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    sample_shape: [usize; 3],
    pixels: Vec<f32>,
    class_labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(sample_shape: [usize; 3], pixels: Vec<f32>, class_labels: Vec<u8>) -> Result<Self> {
        let per = sample_shape.iter().product::<usize>();
        if per == 0 {
            return Err(arg_err("sample shape has a zero dimension"));
        }
        if pixels.len() != per * class_labels.len() {
            return Err(arg_err(format!(
                "{} pixels do not fit {} samples of shape {:?}",
                pixels.len(),
                class_labels.len(),
                sample_shape
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(arg_err("pixel values must lie in [0, 1]"));
        }
        Ok(LabeledDataset {
            sample_shape,
            pixels,
            class_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn class_labels(&self) -> &[u8] {
        &self.class_labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.pixels_per_sample();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn count_class(&self, class: u8) -> usize {
        self.class_labels.iter().filter(|&&c| c == class).count()
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<ImageBatch<f32>> {
        let per = self.pixels_per_sample();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(arg_err(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.sample_shape;
        ImageBatch::new([idx.len(), c, h, w], data)
    }

    pub fn all(&self) -> Result<ImageBatch<f32>> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

fn ingest_err(path: &Path, field: &'static str, reason: impl Into<String>) -> NcaeError {
    NcaeError::Ingestion {
        path: path.to_path_buf(),
        field,
        reason: reason.into(),
    }
}

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| ingest_err(path, "file", e.to_string()))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| ingest_err(path, "gzip", e.to_string()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingest_err(path, field, "file truncated in header"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(ingest_err(
            path,
            "magic",
            format!("expected 0x{IMAGE_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path, "count")? as usize;
    let rows = be_u32(&bytes, 8, path, "rows")? as usize;
    let cols = be_u32(&bytes, 12, path, "cols")? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() < want {
        return Err(ingest_err(
            path,
            "pixels",
            format!(
                "truncated: header promises {want} bytes, file has {}",
                body.len()
            ),
        ));
    }
    let pixels = body[..want].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(ingest_err(
            path,
            "magic",
            format!("expected 0x{LABEL_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n = be_u32(&bytes, 4, path, "count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(ingest_err(
            path,
            "labels",
            format!(
                "truncated: header promises {n} labels, file has {}",
                body.len()
            ),
        ));
    }
    Ok(body[..n].to_vec())
}

/// Loads a matching pair of IDX image and label files.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let class_labels = read_idx_labels(labels)?;
    if class_labels.len() != n {
        return Err(ingest_err(
            labels,
            "count",
            format!(
                "{} labels but {n} images in {}",
                class_labels.len(),
                images.display()
            ),
        ));
    }
    LabeledDataset::new([1, rows, cols], pixels, class_labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
}

impl DatasetKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::FashionMnist => "fashion-mnist",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "MNIST",
            DatasetKind::FashionMnist => "F-MNIST",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = NcaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion-mnist" | "fashion_mnist" | "f-mnist" | "fmnist" => {
                Ok(DatasetKind::FashionMnist)
            }
            other => Err(arg_err(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn locate(dir: &Path, stem: &str) -> PathBuf {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}

/// Image and label paths of a split under `root/<dataset>/`, preferring `.gz`.
pub fn split_paths(root: &Path, kind: DatasetKind, split: Split) -> (PathBuf, PathBuf) {
    let dir = root.join(kind.dir_name());
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        locate(&dir, &format!("{prefix}-images-idx3-ubyte")),
        locate(&dir, &format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_split(root: &Path, kind: DatasetKind, split: Split) -> Result<LabeledDataset> {
    let (images, labels) = split_paths(root, kind, split);
    load_idx(&images, &labels)
}

/// One-class training set with injected anomalies.
///
/// `hidden_truth` marks the injected samples. Training never reads it; it is
/// kept for miner diagnostics and plots.
#[derive(Clone, Debug, PartialEq)]
pub struct ContaminatedTrainset {
    pub images: ImageBatch<f32>,
    pub class_labels: Vec<u8>,
    pub hidden_truth: Vec<u8>,
    /// Row of each sample in the source dataset.
    pub source_indices: Vec<usize>,
    pub normal_class: u8,
    pub rho: f64,
    pub seed: u64,
    pub max_normal: Option<usize>,
}

impl ContaminatedTrainset {
    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn anomaly_count(&self) -> usize {
        self.hidden_truth.iter().filter(|&&f| f == 1).count()
    }

    pub fn normal_count(&self) -> usize {
        self.len() - self.anomaly_count()
    }

    pub fn actual_rho(&self) -> f64 {
        self.anomaly_count() as f64 / self.len() as f64
    }

    /// SHA-256 over pixels, labels and flags, for reproducibility checks.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.images.data() {
            h.update(p.to_bits().to_le_bytes());
        }
        h.update(&self.class_labels);
        h.update(&self.hidden_truth);
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> TrainsetManifest {
        TrainsetManifest {
            normal_class: self.normal_class,
            rho: self.rho,
            seed: self.seed,
            max_normal: self.max_normal,
            source_indices: self.source_indices.clone(),
        }
    }
}

/// Enough to rebuild a trainset exactly from its source dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainsetManifest {
    pub normal_class: u8,
    pub rho: f64,
    pub seed: u64,
    #[serde(default)]
    pub max_normal: Option<usize>,
    pub source_indices: Vec<usize>,
}

impl TrainsetManifest {
    pub fn rebuild(&self, ds: &LabeledDataset) -> Result<ContaminatedTrainset> {
        assemble(
            ds,
            self.normal_class,
            self.rho,
            self.seed,
            self.max_normal,
            self.source_indices.clone(),
        )
    }
}

/// Number of anomalies that brings `n_normal` normals to contamination `rho`.
pub fn anomaly_count_for(n_normal: usize, rho: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rho) {
        return Err(arg_err(format!("rho must lie in [0, 1), got {rho}")));
    }
    Ok((rho * n_normal as f64 / (1.0 - rho)).round() as usize)
}

/// In-place Fisher-Yates driven by 32-bit draws so results do not depend on
/// the platform's pointer width.
pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i as u32) as usize;
        v.swap(i, j);
    }
}

/// Uniform draw of `k` items without replacement; order is the draw order.
fn draw<T: Copy>(pool: &[T], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v = pool.to_vec();
    let n = v.len();
    for i in 0..k {
        let j = i + rng.gen_range(0..(n - i) as u32) as usize;
        v.swap(i, j);
    }
    v.truncate(k);
    v
}

pub fn build_contaminated_trainset(
    ds: &LabeledDataset,
    normal_class: u8,
    rho: f64,
    seed: u64,
) -> Result<ContaminatedTrainset> {
    build_contaminated_trainset_capped(ds, normal_class, rho, seed, None)
}

/// As [`build_contaminated_trainset`], optionally keeping only a seeded
/// uniform subset of `max_normal` normal samples.
pub fn build_contaminated_trainset_capped(
    ds: &LabeledDataset,
    normal_class: u8,
    rho: f64,
    seed: u64,
    max_normal: Option<usize>,
) -> Result<ContaminatedTrainset> {
    let normals: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.class_labels[i] == normal_class)
        .collect();
    if normals.is_empty() {
        return Err(arg_err(format!(
            "normal class {normal_class} has no samples"
        )));
    }
    let others: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.class_labels[i] != normal_class)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);

    let normals = match max_normal {
        Some(0) => return Err(arg_err("max_normal must be positive")),
        Some(cap) if cap < normals.len() => {
            let mut picked = draw(&normals, cap, &mut rng);
            picked.sort_unstable();
            picked
        }
        _ => normals,
    };
    let a = anomaly_count_for(normals.len(), rho)?;
    if a > others.len() {
        return Err(arg_err(format!(
            "rho {rho} needs {a} anomalies but only {} non-normal samples exist",
            others.len()
        )));
    }
    let mut rows = normals;
    rows.extend(draw(&others, a, &mut rng));
    shuffle(&mut rows, &mut rng);
    assemble(ds, normal_class, rho, seed, max_normal, rows)
}

fn assemble(
    ds: &LabeledDataset,
    normal_class: u8,
    rho: f64,
    seed: u64,
    max_normal: Option<usize>,
    rows: Vec<usize>,
) -> Result<ContaminatedTrainset> {
    let images = ds.batch(&rows)?;
    let class_labels: Vec<u8> = rows.iter().map(|&i| ds.class_labels[i]).collect();
    let hidden_truth = class_labels
        .iter()
        .map(|&c| u8::from(c != normal_class))
        .collect();
    Ok(ContaminatedTrainset {
        images,
        class_labels,
        hidden_truth,
        source_indices: rows,
        normal_class,
        rho,
        seed,
        max_normal,
    })
}

/// Test images with binary labels: 0 for the normal class, 1 otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Testset {
    pub images: ImageBatch<f32>,
    pub labels: Vec<u8>,
    pub class_labels: Vec<u8>,
}

pub fn build_testset(ds: &LabeledDataset, normal_class: u8) -> Result<Testset> {
    Ok(Testset {
        images: ds.all()?,
        labels: ds
            .class_labels
            .iter()
            .map(|&c| u8::from(c != normal_class))
            .collect(),
        class_labels: ds.class_labels.clone(),
    })
}

/// Two-dimensional toy data shaped `[1, 1, 2]`: class 0 is a tight Gaussian
/// around (0.3, 0.3), class 1 a wider one around (0.7, 0.7). Values are
/// clamped to `[0, 1]`.
pub fn gaussian_toy(n_per_class: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for (class, mean, std) in [(0u8, 0.3, 0.05), (1u8, 0.7, 0.12)] {
        let dist = Normal::new(mean, std).expect("valid normal");
        for _ in 0..n_per_class {
            for _ in 0..2 {
                let v: f64 = dist.sample(&mut rng);
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new([1, 1, 2], pixels, labels).expect("toy data is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGE_MAGIC, n, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(LABEL_MAGIC.to_be_bytes());
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn gz(bytes: &[u8]) -> Vec<u8> {
        let mut e = GzEncoder::new(Vec::new(), Compression::default());
        e.write_all(bytes).unwrap();
        e.finish().unwrap()
    }

    fn synthetic(per_class: &[usize]) -> LabeledDataset {
        let mut labels = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            labels.extend(std::iter::repeat(c as u8).take(n));
        }
        let pixels = (0..labels.len() * 4)
            .map(|i| (i % 256) as f32 / 255.0)
            .collect();
        LabeledDataset::new([1, 2, 2], pixels, labels).unwrap()
    }

    #[test]
    fn idx_roundtrip_scales_bytes_and_reads_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.gz");
        let lab = dir.path().join("lab");
        fs::write(&img, gz(&idx_images(2, 1, 2, &[0, 255, 51, 102]))).unwrap();
        fs::write(&lab, idx_labels(&[3, 7])).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape(), [1, 1, 2]);
        assert_eq!(ds.sample(0), &[0.0, 1.0]);
        assert_eq!(ds.sample(1), &[0.2, 0.4]);
        assert_eq!(ds.class_labels(), &[3, 7]);
    }

    #[test]
    fn malformed_files_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&lab, idx_labels(&[1, 2])).unwrap();

        let field = |r: Result<LabeledDataset>| match r {
            Err(NcaeError::Ingestion { field, .. }) => field,
            other => panic!("expected ingestion error, got {other:?}"),
        };

        fs::write(&img, idx_images(2, 1, 2, &[0, 1, 2])).unwrap();
        assert_eq!(field(load_idx(&img, &lab)), "pixels");

        let mut bad = idx_images(2, 1, 2, &[0, 1, 2, 3]);
        bad[3] = 0x01;
        fs::write(&img, bad).unwrap();
        assert_eq!(field(load_idx(&img, &lab)), "magic");

        fs::write(&img, idx_images(3, 1, 2, &[0; 6])).unwrap();
        assert_eq!(field(load_idx(&img, &lab)), "count");

        fs::write(&img, &[0u8, 0, 8]).unwrap();
        assert_eq!(field(load_idx(&img, &lab)), "magic");

        assert_eq!(field(load_idx(&dir.path().join("missing"), &lab)), "file");
    }

    #[test]
    fn anomaly_counts_solve_the_ratio() {
        assert_eq!(anomaly_count_for(900, 0.1).unwrap(), 100);
        assert_eq!(anomaly_count_for(800, 0.2).unwrap(), 200);
        assert_eq!(anomaly_count_for(800, 0.0).unwrap(), 0);
        assert!(anomaly_count_for(10, 1.0).is_err());
        assert!(anomaly_count_for(10, -0.1).is_err());
    }

    #[test]
    fn trainset_flags_match_classes_and_ratio() {
        let ds = synthetic(&[50, 900, 50, 50]);
        let t = build_contaminated_trainset(&ds, 1, 0.1, 4).unwrap();
        assert_eq!(t.normal_count(), 900);
        assert_eq!(t.anomaly_count(), 100);
        for (c, f) in t.class_labels.iter().zip(&t.hidden_truth) {
            assert_eq!(*f == 1, *c != 1);
        }
        assert!((t.actual_rho() - 0.1).abs() <= 1.0 / t.len() as f64);
        assert!(
            t.hidden_truth[..100].iter().any(|&f| f == 1),
            "rows are shuffled"
        );
    }

    #[test]
    fn trainset_is_seed_deterministic_and_rebuildable() {
        let ds = synthetic(&[30, 30, 30]);
        let a = build_contaminated_trainset(&ds, 0, 0.2, 9).unwrap();
        let b = build_contaminated_trainset(&ds, 0, 0.2, 9).unwrap();
        let c = build_contaminated_trainset(&ds, 0, 0.2, 10).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.source_indices, c.source_indices);
        let manifest: TrainsetManifest =
            serde_json::from_str(&serde_json::to_string(&a.manifest()).unwrap()).unwrap();
        assert_eq!(manifest.rebuild(&ds).unwrap(), a);
    }

    #[test]
    fn trainset_errors_and_edge_cases() {
        let ds = synthetic(&[10, 5]);
        assert_eq!(
            build_contaminated_trainset(&ds, 0, 0.0, 1)
                .unwrap()
                .anomaly_count(),
            0
        );
        assert!(matches!(
            build_contaminated_trainset(&ds, 0, 0.5, 1),
            Err(NcaeError::Argument(_))
        ));
        assert!(matches!(
            build_contaminated_trainset(&ds, 7, 0.1, 1),
            Err(NcaeError::Argument(_))
        ));
        let capped = build_contaminated_trainset_capped(&ds, 0, 0.2, 1, Some(4)).unwrap();
        assert_eq!((capped.normal_count(), capped.anomaly_count()), (4, 1));
    }

    #[test]
    fn testset_labels_follow_the_normal_class() {
        let ds = synthetic(&[3, 4, 5]);
        let t = build_testset(&ds, 1).unwrap();
        assert_eq!(t.labels.iter().filter(|&&l| l == 0).count(), 4);
        assert_eq!(t.labels.iter().map(|&l| l as usize).sum::<usize>(), 8);
        let all_normal = synthetic(&[6]);
        assert!(build_testset(&all_normal, 0)
            .unwrap()
            .labels
            .iter()
            .all(|&l| l == 0));
    }

    #[test]
    fn toy_data_is_in_range_and_separated() {
        let ds = gaussian_toy(200, 2);
        assert_eq!(ds.len(), 400);
        let mean = |c: u8| {
            let rows: Vec<_> = (0..ds.len())
                .filter(|&i| ds.class_labels()[i] == c)
                .collect();
            rows.iter().map(|&i| ds.sample(i)[0] as f64).sum::<f64>() / rows.len() as f64
        };
        assert!((mean(0) - 0.3).abs() < 0.02 && (mean(1) - 0.7).abs() < 0.04);
    }
}
