//! Model checkpoints.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format": "ncae-checkpoint",
//!   "version": 1,
//!   "train_step": <u64>,
//!   "center": { "mu": [f64; d], "gamma": f64, "step": u64 },
//!   "model": {
//!     "config": { "architecture": {...}, "latent_dim": d, "leak": f64, "latent_disc_hidden": [...] },
//!     "sigma": f64,
//!     "encoder" | "decoder" | "latent_disc" | "sample_disc": {
//!       "input_shape": [...],
//!       "layers": [ { "type": "dense" | "conv2d" | ..., <dims>, "weight": [...], "bias": [...] }, ... ]
//!     }
//!   }
//! }
//! ```
//!
//! Readers reject unknown `format` strings and any `version` newer than
//! [`CHECKPOINT_VERSION`]. Fields are only ever added within a major version.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NcaeError, Result};
use crate::model::{LatentCenter, NcaeModel};

pub const CHECKPOINT_FORMAT: &str = "ncae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub train_step: u64,
    pub center: LatentCenter,
    pub model: NcaeModel<f32>,
}

impl Checkpoint {
    pub fn new(model: NcaeModel<f32>, center: LatentCenter, train_step: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            train_step,
            center,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(
            &tmp,
            serde_json::to_vec(self).map_err(|e| NcaeError::Checkpoint(e.to_string()))?,
        )?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| NcaeError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| NcaeError::Checkpoint(format!("{}: {e}", path.display())))?;
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(NcaeError::Checkpoint(format!(
                "unknown format {:?}",
                self.format
            )));
        }
        if self.version > CHECKPOINT_VERSION {
            return Err(NcaeError::Checkpoint(format!(
                "version {} is newer than supported {CHECKPOINT_VERSION}",
                self.version
            )));
        }
        self.model
            .validate()
            .map_err(|e| NcaeError::Checkpoint(e.to_string()))?;
        if self.center.dim() != self.model.latent_dim() {
            return Err(NcaeError::Checkpoint(format!(
                "center dim {} does not match latent dim {}",
                self.center.dim(),
                self.model.latent_dim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let model = NcaeModel::new(
            ModelConfig::default(),
            0.1,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let center = LatentCenter {
            mu: (0..32).map(|i| i as f64 * 0.1).collect(),
            gamma: 0.01,
            step: 7,
        };
        Checkpoint::new(model, center, 7)
    }

    #[test]
    fn save_load_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_and_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, b"{\"format\": \"ncae-checkpoint\", \"vers").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(NcaeError::Checkpoint(_))
        ));

        let mut ck = sample();
        ck.center.mu.pop();
        ck.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(NcaeError::Checkpoint(_))
        ));

        let mut ck = sample();
        ck.model.config.latent_dim = 16;
        ck.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(NcaeError::Checkpoint(_))
        ));
    }
}
