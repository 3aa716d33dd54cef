//! Logistic regression on one-dimensional field embeddings: a learned
//! scalar per level, summed with a bias. It sees every field but no
//! interaction between fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Batch, EmbeddingTable, EncodedDataset};
use crate::numerics::{ParamId, ParamStore, Partition, Rng, Tape, Tensor, Var};

use super::adam::{Adam, AdamConfig};
use super::metrics::logloss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 10,
            batch_size: 256,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LogisticBaseline {
    pub store: ParamStore,
    weights: EmbeddingTable,
    bias: ParamId,
    num_fields: usize,
}

impl LogisticBaseline {
    pub fn new(table_rows: &[usize], rng: &mut Rng) -> Result<Self> {
        let names: Vec<String> = (0..table_rows.len()).map(|i| format!("lr{i}")).collect();
        let mut store = ParamStore::new();
        let weights = EmbeddingTable::new(&mut store, &names, table_rows, 1, rng)?;
        let bias = store.add("lr.bias", Tensor::zeros(&[1]), Partition::Weights);
        Ok(LogisticBaseline {
            store,
            weights,
            bias,
            num_fields: table_rows.len(),
        })
    }

    fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        if batch.num_fields != self.num_fields {
            return Err(Error::Input(format!(
                "batch has {} fields, baseline expects {}",
                batch.num_fields, self.num_fields
            )));
        }
        let w = self.weights.lookup(tape, &self.store, &batch.indices)?;
        let ones = tape.constant(Tensor::ones(&[self.num_fields, 1]));
        let logit = tape.matmul(w, ones)?;
        let b = tape.param(&self.store, self.bias);
        let logit = tape.add_broadcast(logit, b)?;
        let logit = tape.reshape(logit, &[batch.len()])?;
        Ok(tape.sigmoid(logit))
    }

    pub fn predict(&self, data: &EncodedDataset) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(data.len());
        let rows: Vec<usize> = (0..data.len()).collect();
        for part in rows.chunks(4096) {
            let mut tape = Tape::new();
            let p = self.forward(&mut tape, &data.batch(part))?;
            out.extend_from_slice(tape.data(p));
        }
        Ok(out)
    }

    /// Shuffled mini-batch Adam; with `val`, keeps the epoch with the lowest
    /// validation logloss.
    pub fn fit(&mut self, train: &EncodedDataset, val: Option<&EncodedDataset>, cfg: &BaselineConfig) -> Result<()> {
        if train.is_empty() || cfg.batch_size == 0 {
            return Err(Error::Input("baseline needs training data and a positive batch size".into()));
        }
        let mut rng = Rng::substream(cfg.seed, "baseline.order");
        let ids: Vec<ParamId> = self.store.ids().collect();
        let mut adam = Adam::new(&self.store, ids, AdamConfig::with_lr(cfg.lr))?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best: Option<(f64, ParamStore)> = None;
        for _ in 0..cfg.epochs {
            rng.shuffle(&mut order);
            for part in order.chunks(cfg.batch_size) {
                let batch = train.batch(part);
                let mut tape = Tape::new();
                let p = self.forward(&mut tape, &batch)?;
                let loss = tape.bce(p, &batch.labels)?;
                let grads = tape.backward(loss)?;
                adam.step(&mut self.store, &grads)?;
            }
            if let Some(val) = val {
                let ll = logloss(&self.predict(val)?, &val.labels)?;
                if best.as_ref().is_none_or(|(b, _)| ll < *b) {
                    best = Some((ll, self.store.clone()));
                }
            }
        }
        if let Some((_, store)) = best {
            self.store = store;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::metrics::auc;

    #[test]
    fn learns_an_additive_signal() {
        // label is 1 exactly when field 0 takes level ≥ 2
        let mut rng = Rng::seed(1);
        let n = 2000;
        let mut indices = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let a = rng.index(4);
            indices.extend([a, rng.index(3)]);
            labels.push(if a >= 2 { 1.0 } else { 0.0 });
        }
        let data = EncodedDataset {
            num_fields: 2,
            indices,
            labels,
        };
        let mut lr = LogisticBaseline::new(&[4, 3], &mut Rng::seed(2)).unwrap();
        let cfg = BaselineConfig {
            epochs: 5,
            lr: 0.1,
            ..Default::default()
        };
        lr.fit(&data, Some(&data), &cfg).unwrap();
        let p = lr.predict(&data).unwrap();
        assert!(auc(&p, &data.labels).unwrap() > 0.99);
    }
}
