//! TOML files read by the commands. Relative paths resolve against the
//! directory of the file that names them.

use std::path::{Path, PathBuf};

use adaensemble::features::{FeatureSchema, FieldSpec};
use adaensemble::model::ModelConfig;
use adaensemble::training::{BiLevelConfig, SyntheticSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn default_delimiter() -> char {
    '\t'
}

pub(crate) fn default_bins() -> usize {
    64
}

fn default_min_frequency() -> u64 {
    20
}

/// Field list and preprocessing knobs for `fit-pipeline` and for `train`
/// runs without a prefitted pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    pub embedding_dim: usize,
    /// Equal-frequency bins per continuous field.
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Levels seen fewer times than this share the out-of-vocabulary row.
    #[serde(default = "default_min_frequency")]
    pub min_frequency: u64,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub fields: Vec<FieldSpec>,
}

impl FeaturesConfig {
    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            fields: self.fields.clone(),
            embedding_dim: self.embedding_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Prefitted pipeline; when absent `[features]` is fitted on `train`.
    #[serde(default)]
    pub pipeline: Option<PathBuf>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_inner_steps() -> usize {
    BiLevelConfig::new(0, 0).inner_steps
}
fn default_lr() -> f64 {
    BiLevelConfig::new(0, 0).lr_weights
}
fn default_batch() -> usize {
    BiLevelConfig::new(0, 0).batch_size
}
fn default_patience() -> usize {
    BiLevelConfig::new(0, 0).patience
}
fn default_eval_every() -> usize {
    BiLevelConfig::new(0, 0).eval_every
}

/// Bi-level optimizer settings; the seed comes from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_lr")]
    pub lr_weights: f64,
    #[serde(default = "default_lr")]
    pub lr_arch: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub max_steps: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl TrainingConfig {
    pub fn bilevel(&self, seed: u64) -> BiLevelConfig {
        BiLevelConfig {
            inner_steps: self.inner_steps,
            lr_weights: self.lr_weights,
            lr_arch: self.lr_arch,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            patience: self.patience,
            eval_every: self.eval_every,
            seed,
        }
    }
}

/// Everything `train` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub features: Option<FeaturesConfig>,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    /// Reads `path` and makes every path in it absolute.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.train = resolve(base, &cfg.data.train);
        cfg.data.val = resolve(base, &cfg.data.val);
        cfg.data.test = cfg.data.test.map(|p| resolve(base, &p));
        cfg.data.pipeline = cfg.data.pipeline.map(|p| resolve(base, &p));
        cfg.out_dir = cfg.out_dir.map(|p| resolve(base, &p));
        if cfg.data.pipeline.is_none() && cfg.features.is_none() {
            return Err(CliError::Config {
                path: path.to_path_buf(),
                message: "either data.pipeline or a [features] section is required".into(),
            });
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }
}

fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

/// Synthetic dataset recipe for `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    /// Train, validation and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Written into the emitted `features.toml`.
    pub embedding_dim: usize,
    pub synthetic: SyntheticSpec,
}

impl GenerateConfig {
    /// Row counts of the three splits; the test split takes the remainder.
    pub fn split_sizes(&self) -> CliResult<[usize; 3]> {
        let s = self.split;
        if s.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Usage(format!("split fractions {s:?} must be in [0, 1] and sum to 1")));
        }
        let n = self.synthetic.examples;
        let train = (n as f64 * s[0]).round() as usize;
        let val = ((n as f64 * s[1]).round() as usize).min(n - train);
        Ok([train, val, n - train - val])
    }
}
