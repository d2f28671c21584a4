//! Contaminated-sample mining against a dictionary of generated normals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};
use crate::model::{sample_noise, ImageBatch, LatentBatch, LatentCenter, NcaeModel};
use crate::nn::Scalar;

/// Which end of the sorted contamination scores is flagged as contaminated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrdering {
    /// Highest scores (most similar to the generated normals) are flagged.
    #[default]
    Descending,
    /// Lowest scores are flagged.
    Ascending,
}

impl ScoreOrdering {
    pub fn opposite(self) -> Self {
        match self {
            ScoreOrdering::Descending => ScoreOrdering::Ascending,
            ScoreOrdering::Ascending => ScoreOrdering::Descending,
        }
    }
}

/// Latent-space metric used to pick each contaminated sample's nearest generated normal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMetric {
    #[default]
    Cosine,
    Euclidean,
}

/// Re-encoded latents of generated high-confidence normal samples.
#[derive(Clone, Debug)]
pub struct NormalDictionary<T = f32> {
    dim: usize,
    /// Row-wise l2-normalised latents, `[m, d]`.
    unit: Vec<f64>,
    raw: LatentBatch<T>,
    noise: LatentBatch<T>,
    images: ImageBatch<T>,
}

/// l2-normalised copy of `v`; the zero vector maps to itself.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Vec<f64> {
    let norm = v.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x.f64() / norm).collect()
}

impl<T: Scalar> NormalDictionary<T> {
    /// Assembles a dictionary from generator noise, the decoded images and their re-encoded latents.
    pub fn from_parts(
        noise: LatentBatch<T>,
        images: ImageBatch<T>,
        latents: LatentBatch<T>,
    ) -> Result<Self> {
        if latents.is_empty() {
            return Err(arg_err("dictionary needs at least one row"));
        }
        if noise.len() != latents.len() || images.len() != latents.len() {
            return Err(arg_err(
                "dictionary noise, images and latents differ in row count",
            ));
        }
        let dim = latents.dim();
        let mut unit = Vec::with_capacity(latents.len() * dim);
        for i in 0..latents.len() {
            unit.extend(l2_normalize(latents.row(i)));
        }
        Ok(NormalDictionary {
            dim,
            unit,
            raw: latents,
            noise,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unit_row(&self, j: usize) -> &[f64] {
        &self.unit[j * self.dim..(j + 1) * self.dim]
    }

    pub fn noise(&self) -> &LatentBatch<T> {
        &self.noise
    }

    pub fn images(&self) -> &ImageBatch<T> {
        &self.images
    }

    pub fn latents(&self) -> &LatentBatch<T> {
        &self.raw
    }
}

/// Draws `m` noises from `N(μ, σI)`, decodes them, re-encodes the images and
/// normalises the resulting latents.
pub fn build_dictionary<T: Scalar, R: Rng + ?Sized>(
    model: &NcaeModel<T>,
    center: &LatentCenter,
    m: usize,
    rng: &mut R,
) -> Result<NormalDictionary<T>> {
    if m == 0 {
        return Err(arg_err("dictionary size must be at least 1"));
    }
    let noise = sample_noise(center, model.sigma, m, rng)?;
    let images = model.decode(&noise)?;
    let latents = model.encode(&images)?;
    NormalDictionary::from_parts(noise, images, latents)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `cᵢ = (1/m)·Σⱼ ⟨f(xᵢ)/‖f(xᵢ)‖, źⱼ⟩`, each in `[−1, 1]`.
pub fn contamination_scores<T: Scalar>(
    latents: &LatentBatch<T>,
    dict: &NormalDictionary<T>,
) -> Result<Vec<f64>> {
    if latents.dim() != dict.dim() {
        return Err(config_err(format!(
            "latent dim {} does not match dictionary dim {}",
            latents.dim(),
            dict.dim()
        )));
    }
    let m = dict.len() as f64;
    Ok((0..latents.len())
        .map(|i| {
            let q = l2_normalize(latents.row(i));
            let s: f64 = (0..dict.len()).map(|j| dot(&q, dict.unit_row(j))).sum();
            (s / m).clamp(-1.0, 1.0)
        })
        .collect())
}

/// Partition of a batch into predicted-contaminated and predicted-normal samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedSplit {
    pub contaminated_indices: Vec<usize>,
    pub normal_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl MinedSplit {
    /// Every sample predicted normal (no mining).
    pub fn all_normal(m: usize) -> Self {
        MinedSplit {
            contaminated_indices: Vec::new(),
            normal_indices: (0..m).collect(),
            scores: vec![0.0; m],
        }
    }
}

/// `⌈τ·m⌉`, robust to the representation error of `τ` (e.g. `0.3·10`).
pub fn contaminated_count(tau: f64, m: usize) -> usize {
    let raw = tau * m as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() <= 1e-9 * raw.abs().max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    (k.max(0.0) as usize).min(m)
}

/// Flags the first `⌈τ·m⌉` samples of the ordering as contaminated; ties go to the lower index.
pub fn select_contaminated(
    scores: &[f64],
    tau: f64,
    ordering: ScoreOrdering,
) -> Result<MinedSplit> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(arg_err(format!("tau must lie in [0, 1], got {tau}")));
    }
    let m = scores.len();
    let mut order: Vec<usize> = (0..m).collect();
    match ordering {
        ScoreOrdering::Descending => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a])),
        ScoreOrdering::Ascending => order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b])),
    }
    let k = contaminated_count(tau, m);
    let mut contaminated_indices = order[..k].to_vec();
    let mut normal_indices = order[k..].to_vec();
    contaminated_indices.sort_unstable();
    normal_indices.sort_unstable();
    Ok(MinedSplit {
        contaminated_indices,
        normal_indices,
        scores: scores.to_vec(),
    })
}

/// Index of the dictionary row nearest to each latent; ties go to the lower row.
pub fn nearest_indices<T: Scalar>(
    latents: &LatentBatch<T>,
    dict: &NormalDictionary<T>,
    metric: NeighborMetric,
) -> Result<Vec<usize>> {
    if dict.is_empty() {
        return Err(arg_err("nearest-neighbour search in an empty dictionary"));
    }
    if latents.dim() != dict.dim() {
        return Err(config_err("latent dim does not match dictionary dim"));
    }
    Ok((0..latents.len())
        .map(|i| match metric {
            NeighborMetric::Cosine => {
                let q = l2_normalize(latents.row(i));
                let mut best = (0, f64::NEG_INFINITY);
                for j in 0..dict.len() {
                    let s = dot(&q, dict.unit_row(j));
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                best.0
            }
            NeighborMetric::Euclidean => {
                let q = latents.row(i);
                let mut best = (0, f64::INFINITY);
                for j in 0..dict.len() {
                    let d: f64 = q
                        .iter()
                        .zip(dict.latents().row(j))
                        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
                        .sum();
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best.0
            }
        })
        .collect())
}

/// Generated image nearest to each contaminated latent.
pub fn nearest_normal<T: Scalar>(
    cont_latents: &LatentBatch<T>,
    dict: &NormalDictionary<T>,
    metric: NeighborMetric,
) -> Result<ImageBatch<T>> {
    if cont_latents.is_empty() {
        return Err(arg_err("no contaminated latents to match"));
    }
    let idx = nearest_indices(cont_latents, dict, metric)?;
    Ok(dict.images().select(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dict_from_rows(rows: &[&[f64]]) -> NormalDictionary<f64> {
        let d = rows[0].len();
        let m = rows.len();
        let latents = LatentBatch::new(m, d, rows.concat()).unwrap();
        let images =
            ImageBatch::new([m, 1, 1, 1], (0..m).map(|j| j as f64 / m as f64).collect()).unwrap();
        NormalDictionary::from_parts(latents.clone(), images, latents).unwrap()
    }

    #[test]
    fn score_examples() {
        let dict = dict_from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = LatentBatch::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert!((contamination_scores(&q, &dict).unwrap()[0] - 0.7).abs() < 1e-15);

        let single = dict_from_rows(&[&[0.2, -0.5, 0.1]]);
        let same = LatentBatch::new(1, 3, vec![0.2, -0.5, 0.1]).unwrap();
        assert!((contamination_scores(&same, &single).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_latent_scores_zero() {
        let dict = dict_from_rows(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let q = LatentBatch::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(contamination_scores(&q, &dict).unwrap(), vec![0.0]);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(contaminated_count(0.1, 128), 13);
        assert_eq!(contaminated_count(0.0, 128), 0);
        assert_eq!(contaminated_count(0.3, 10), 3);
        assert_eq!(contaminated_count(1.0, 127), 127);
        let s = select_contaminated(&[0.9, 0.1, 0.5, 0.9], 0.5, ScoreOrdering::Descending).unwrap();
        assert_eq!(s.contaminated_indices, vec![0, 3]);
        assert_eq!(s.normal_indices, vec![1, 2]);
        let s = select_contaminated(&[0.9, 0.1, 0.5, 0.1], 0.25, ScoreOrdering::Ascending).unwrap();
        assert_eq!(s.contaminated_indices, vec![1]);
        assert!(select_contaminated(&[0.0], 1.5, ScoreOrdering::Descending).is_err());
    }

    #[test]
    fn nearest_examples() {
        let single = dict_from_rows(&[&[1.0, 2.0]]);
        let q = LatentBatch::new(3, 2, vec![0.1, 0.0, -1.0, 5.0, 3.0, 3.0]).unwrap();
        assert_eq!(
            nearest_indices(&q, &single, NeighborMetric::Cosine).unwrap(),
            vec![0, 0, 0]
        );

        let dict = dict_from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let q = LatentBatch::new(1, 2, vec![0.0, 1.0]).unwrap();
        let img = nearest_normal(&q, &dict, NeighborMetric::Cosine).unwrap();
        assert_eq!(img.data(), dict.images().sample(1));
        assert_eq!(
            nearest_indices(&q, &dict, NeighborMetric::Euclidean).unwrap(),
            vec![1]
        );
        // Equal similarity to rows 0 and 1: lower index wins.
        let q = LatentBatch::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(
            nearest_indices(&q, &dict, NeighborMetric::Cosine).unwrap(),
            vec![0]
        );
    }

    #[test]
    fn built_dictionary_rows_are_unit_norm_and_reproducible() {
        let model: NcaeModel = NcaeModel::new(
            ModelConfig::default(),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let center = LatentCenter {
            mu: vec![0.1; 32],
            gamma: 0.01,
            step: 0,
        };
        let a = build_dictionary(&model, &center, 128, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(a.dim(), 32);
        for j in 0..a.len() {
            let n: f64 = a.unit_row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let b = build_dictionary(&model, &center, 128, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.unit, b.unit);
    }

    #[test]
    fn collapsed_noise_gives_identical_rows() {
        let mut model: NcaeModel = NcaeModel::new(
            ModelConfig::default(),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        model.sigma = 1e-40;
        let center = LatentCenter {
            mu: vec![0.3; 32],
            gamma: 0.01,
            step: 0,
        };
        let d = build_dictionary(&model, &center, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for j in 1..5 {
            assert_eq!(d.unit_row(j), d.unit_row(0));
        }
    }
}
