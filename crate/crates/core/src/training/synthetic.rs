//! Categorical data with planted feature interactions and a known
//! ground-truth logit.
//!
//! Every level of every field owns a latent vector drawn from `N(0, 1)`.
//! A multiplicative term over fields `S` contributes
//! `c/√m · Σ_d Π_{f∈S} v_f[d]` and an additive term contributes
//! `c/√(m·|S|) · Σ_{f∈S} Σ_d v_f[d]`, so each has variance `c²` at
//! `m` latent dimensions. Labels are `Bernoulli(σ(bias + Σ terms + noise·ε))`
//! with `ε ~ N(0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSchema, FieldSpec, RawRecord};
use crate::numerics::{sigmoid, Rng};

use super::metrics::auc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    Multiplicative,
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedInteraction {
    pub fields: Vec<usize>,
    pub kind: InteractionKind,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of levels of each field; its length is the field count.
    pub levels: Vec<usize>,
    pub latent_dim: usize,
    pub interactions: Vec<PlantedInteraction>,
    #[serde(default)]
    pub bias: f64,
    /// Standard deviation of Gaussian noise added to the logit.
    #[serde(default)]
    pub label_noise: f64,
    pub examples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn num_fields(&self) -> usize {
        self.levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(Error::Config("every synthetic field needs at least one level".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) || !self.bias.is_finite() {
            return Err(Error::Config("bias and label_noise must be finite, label_noise ≥ 0".into()));
        }
        for (i, term) in self.interactions.iter().enumerate() {
            if term.fields.is_empty() || term.fields.iter().any(|&f| f >= self.levels.len()) {
                return Err(Error::Config(format!(
                    "interaction {i} references fields {:?} outside 0..{}",
                    term.fields,
                    self.levels.len()
                )));
            }
            if !term.coefficient.is_finite() {
                return Err(Error::Config(format!("interaction {i} has a non-finite coefficient")));
            }
        }
        Ok(())
    }

    /// Field names `f1..fF`.
    pub fn field_names(&self) -> Vec<String> {
        (1..=self.num_fields()).map(|i| format!("f{i}")).collect()
    }

    /// All-categorical schema matching [`SyntheticData::records`].
    pub fn schema(&self, embedding_dim: usize) -> FeatureSchema {
        FeatureSchema {
            fields: self.field_names().into_iter().map(FieldSpec::categorical).collect(),
            embedding_dim,
        }
    }
}

/// Level indices, labels and the noise-free logits that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub num_fields: usize,
    /// Row-major `examples × F` level indices.
    pub levels: Vec<usize>,
    pub labels: Vec<f64>,
    pub logits: Vec<f64>,
}

impl SyntheticData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> SyntheticData {
        let f = self.num_fields;
        SyntheticData {
            num_fields: f,
            levels: self.levels[start * f..end * f].to_vec(),
            labels: self.labels[start..end].to_vec(),
            logits: self.logits[start..end].to_vec(),
        }
    }

    /// Text records with level `l` of any field rendered as `"v{l}"`.
    pub fn records(&self) -> Vec<RawRecord> {
        (0..self.len())
            .map(|i| RawRecord {
                label: self.labels[i],
                values: self.levels[i * self.num_fields..(i + 1) * self.num_fields]
                    .iter()
                    .map(|l| format!("v{l}"))
                    .collect(),
            })
            .collect()
    }

    /// AUC of scoring every example by its true logit; the best any model
    /// can do on this sample up to noise.
    pub fn ceiling_auc(&self) -> Result<f64> {
        auc(&self.logits, &self.labels)
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let m = spec.latent_dim;
    let mut latent_rng = Rng::substream(spec.seed, "synthetic.latent");
    let latents: Vec<Vec<f64>> = spec
        .levels
        .iter()
        .map(|&l| (0..l * m).map(|_| latent_rng.normal()).collect())
        .collect();
    let vector = |field: usize, level: usize| &latents[field][level * m..(level + 1) * m];

    let f = spec.num_fields();
    let mut index_rng = Rng::substream(spec.seed, "synthetic.index");
    let mut label_rng = Rng::substream(spec.seed, "synthetic.label");
    let mut levels = Vec::with_capacity(spec.examples * f);
    let mut labels = Vec::with_capacity(spec.examples);
    let mut logits = Vec::with_capacity(spec.examples);
    for _ in 0..spec.examples {
        let row: Vec<usize> = spec.levels.iter().map(|&l| index_rng.index(l)).collect();
        let mut logit = spec.bias;
        for term in &spec.interactions {
            let value = match term.kind {
                InteractionKind::Multiplicative => {
                    (0..m)
                        .map(|d| term.fields.iter().map(|&fi| vector(fi, row[fi])[d]).product::<f64>())
                        .sum::<f64>()
                        / (m as f64).sqrt()
                }
                InteractionKind::Additive => {
                    term.fields
                        .iter()
                        .map(|&fi| vector(fi, row[fi]).iter().sum::<f64>())
                        .sum::<f64>()
                        / ((m * term.fields.len()) as f64).sqrt()
                }
            };
            logit += term.coefficient * value;
        }
        let noisy = logit + spec.label_noise * label_rng.normal();
        labels.push(if label_rng.bernoulli(sigmoid(noisy)) { 1.0 } else { 0.0 });
        logits.push(logit);
        levels.extend(row);
    }
    Ok(SyntheticData {
        num_fields: f,
        levels,
        labels,
        logits,
    })
}
