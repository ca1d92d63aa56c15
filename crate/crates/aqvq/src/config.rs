//! Run configuration files and dataset sources.

use std::path::{Path, PathBuf};

use aqvq_core::data::{gaussian_mixture, patterns, Dataset, GaussianMixture, PatternSet};
use aqvq_core::model::{EncoderArch, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};
use crate::idx::load_idx;

pub const SEED_ENV: &str = "AQVQ_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataKind {
    GaussianMixture(GaussianMixture),
    Patterns(PatternSet),
    IdxImages {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        /// Keep only the first `limit` samples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSource {
    pub generator: DataKind,
    pub validation_fraction: f64,
    /// Seed of the generator and of the train/validation split.
    pub seed: u64,
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource {
            generator: DataKind::GaussianMixture(GaussianMixture {
                clusters: 4,
                dims: 16,
                samples: 2048,
                sigma: 0.5,
                center_scale: 1.0,
            }),
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DatasetSource {
    pub fn load(&self) -> AppResult<Dataset> {
        let data = match &self.generator {
            DataKind::GaussianMixture(p) => gaussian_mixture(p, self.seed)?,
            DataKind::Patterns(p) => patterns(p, self.seed)?,
            DataKind::IdxImages { images, labels, limit } => {
                let d = load_idx(images, labels.as_deref())?;
                match limit {
                    Some(n) if *n < d.len() => d.subset(&(0..*n).collect::<Vec<_>>())?,
                    _ => d,
                }
            }
        };
        Ok(data)
    }

    /// Loads and splits into `(train, validation)`.
    pub fn load_split(&self) -> AppResult<(Dataset, Dataset)> {
        Ok(self.load()?.split(self.validation_fraction, self.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Measure the gradient gap every this many steps; 0 disables it.
    pub gap_every: u64,
    /// Perturb adaptive selection logits with Gumbel noise while training.
    pub gumbel_noise: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { steps: 2000, batch_size: 64, eval_batch_size: 256, gap_every: 100, gumbel_noise: true }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Seed for initialization, batch order and Gumbel noise. Copied into
    /// `model.seed` on resolution.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DatasetSource,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, context: &str) -> AppResult<Self> {
        serde_json::from_str(text)
            .map_err(|e| AppError::Config(format!("{context}: line {}, column {}: {e}", e.line(), e.column())))
    }

    /// Reads a config file; a missing file is a configuration error naming
    /// the path.
    pub fn read(path: &Path) -> AppResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| AppError::MissingInput { path: path.into(), source })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Applies the `AQVQ_SEED` override if set.
    pub fn with_env_seed(mut self) -> AppResult<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| AppError::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(self)
    }

    /// Copies the run seed into the model, fits the model input to the
    /// data (flattening images for the dense encoder) and validates.
    /// Returns the resolved config with `(train, validation)` splits.
    pub fn resolve(mut self) -> AppResult<(RunConfig, Dataset, Dataset)> {
        self.model.seed = self.seed;
        let (mut train, mut val) = self.data.load_split()?;
        match self.model.encoder_arch {
            EncoderArch::Dense => {
                let m = train.sample_len();
                train = train.reshaped(&[m])?;
                val = val.reshaped(&[m])?;
                self.model.input_shape = vec![m];
            }
            EncoderArch::SmallConv => {
                if train.sample_shape().len() != 3 {
                    return Err(AppError::Config(format!(
                        "conv encoder needs [C, H, W] samples, data has {:?}",
                        train.sample_shape()
                    )));
                }
                self.model.input_shape = train.sample_shape().to_vec();
            }
        }
        if self.training.steps == 0 || self.training.batch_size == 0 || self.training.eval_batch_size == 0 {
            return Err(AppError::Config("steps and batch sizes must be at least 1".into()));
        }
        self.model.validate()?;
        Ok((self, train, val))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn write(&self, path: &Path) -> AppResult<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| AppError::io(path, e))
    }
}
