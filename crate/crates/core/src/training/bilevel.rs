//! First-order bi-level optimization: each outer step updates the gating
//! partition on one validation batch, then the weight partition on
//! `inner_steps` training batches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Batch, EncodedDataset};
use crate::model::{AdaEnsembleModel, InferOptions, TrainOutput};
use crate::numerics::{Partition, Rng, Tape};

use super::adam::{Adam, AdamConfig};
use super::metrics::{auc, logloss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiLevelConfig {
    /// Weight-partition steps per gating-partition step.
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_lr")]
    pub lr_weights: f64,
    #[serde(default = "default_lr")]
    pub lr_arch: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Outer steps; annealing counts these.
    pub max_steps: usize,
    /// Evaluations without a validation-logloss improvement before stopping.
    /// Zero disables early stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Outer steps between validation passes. Zero disables them.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_inner_steps() -> usize {
    4
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    256
}

fn default_patience() -> usize {
    10
}

fn default_eval_every() -> usize {
    50
}

impl BiLevelConfig {
    pub fn new(max_steps: usize, seed: u64) -> Self {
        BiLevelConfig {
            inner_steps: default_inner_steps(),
            lr_weights: default_lr(),
            lr_arch: default_lr(),
            batch_size: default_batch(),
            max_steps,
            patience: default_patience(),
            eval_every: default_eval_every(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        AdamConfig::with_lr(self.lr_weights)
            .validate()
            .map_err(|e| Error::Config(format!("lr_weights: {e}")))?;
        AdamConfig::with_lr(self.lr_arch)
            .validate()
            .map_err(|e| Error::Config(format!("lr_arch: {e}")))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    /// Objective on the validation batch used for the gating update.
    pub arch_loss: f64,
    /// Means over the inner training batches.
    pub total: f64,
    pub logloss: f64,
    pub expert_aux: f64,
    pub depth_aux: f64,
    /// `k` of the first layer.
    pub k: usize,
    /// Largest realized expert count over this step's batches.
    pub max_selected: usize,
    /// Hard depth plan and hard top-`k`, as at inference.
    pub val_logloss: Option<f64>,
    pub val_auc: Option<f64>,
    /// Soft depth mixture without jitter; the gap to `val_logloss` is what
    /// the training surrogate does not see.
    pub val_soft_logloss: Option<f64>,
}

impl HistoryRow {
    pub const HEADER: &'static str =
        "step\tarch_loss\ttotal\tlogloss\texpert_aux\tdepth_aux\tk\tmax_selected\tval_logloss\tval_auc\tval_soft_logloss";

    /// Tab-separated; floats in shortest round-trip form, absent metrics empty.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.arch_loss,
            self.total,
            self.logloss,
            self.expert_aux,
            self.depth_aux,
            self.k,
            self.max_selected,
            opt(self.val_logloss),
            opt(self.val_auc),
            opt(self.val_soft_logloss)
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    /// Outer step whose parameters were kept, if any validation pass ran.
    pub best_step: Option<usize>,
    pub best_val_logloss: Option<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn history_tsv(&self) -> String {
        let mut s = String::from(HistoryRow::HEADER);
        s.push('\n');
        for row in &self.history {
            s.push_str(&row.to_tsv());
            s.push('\n');
        }
        s
    }
}

/// Infinite reshuffled pass over a dataset.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: Rng,
}

impl Cycler {
    fn new(len: usize, rng: Rng) -> Self {
        Cycler {
            order: (0..len).collect(),
            pos: len,
            epoch: 0,
            rng,
        }
    }

    /// Next `size` rows (fewer at an epoch boundary) and a batch id
    /// `epoch:offset`.
    fn next(&mut self, size: usize) -> (Vec<usize>, String) {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + size).min(self.order.len());
        let rows = self.order[self.pos..end].to_vec();
        let id = format!("epoch {} offset {}", self.epoch, self.pos);
        self.pos = end;
        (rows, id)
    }
}

fn check_finite(out: &TrainOutput, tape: &Tape, split: &str, batch_id: &str, batch: &Batch) -> Result<()> {
    let v = tape.data(out.total)[0];
    if v.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "{split} loss {v} at {split} batch {batch_id} ({} examples, logloss {}, expert aux {})",
        batch.len(),
        tape.data(out.logloss)[0],
        tape.data(out.expert_aux)[0]
    )))
}

fn scalar(tape: &Tape, v: crate::numerics::Var) -> f64 {
    tape.data(v)[0]
}

/// Trains `model` in place and restores the parameters of the best
/// validation pass when one ran.
pub fn bilevel_train(model: &mut AdaEnsembleModel, train: &EncodedDataset, val: &EncodedDataset, cfg: &BiLevelConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("bi-level training needs nonempty train and validation splits".into()));
    }
    let mut arch = Adam::new(&model.store, model.params_in(Partition::Architecture), AdamConfig::with_lr(cfg.lr_arch))?;
    let mut weights = Adam::new(&model.store, model.params_in(Partition::Weights), AdamConfig::with_lr(cfg.lr_weights))?;
    let mut jitter = Rng::substream(cfg.seed, "train.jitter");
    let mut train_order = Cycler::new(train.len(), Rng::substream(cfg.seed, "train.order"));
    let mut val_order = Cycler::new(val.len(), Rng::substream(cfg.seed, "val.order"));

    let mut report = TrainReport::default();
    let mut best_store = None;
    let mut since_best = 0;
    for step in 0..cfg.max_steps {
        let (rows, id) = val_order.next(cfg.batch_size);
        let batch = val.batch(&rows);
        let mut tape = Tape::new();
        let out = model.forward_train(&mut tape, &batch, step, &mut jitter)?;
        check_finite(&out, &tape, "validation", &id, &batch)?;
        let arch_loss = scalar(&tape, out.total);
        let mut max_selected = out.max_selected;
        let k = out.ks[0];
        let grads = tape.backward(out.total)?;
        arch.step(&mut model.store, &grads)?;

        let mut sums = [0.0; 4];
        for _ in 0..cfg.inner_steps {
            let (rows, id) = train_order.next(cfg.batch_size);
            let batch = train.batch(&rows);
            let mut tape = Tape::new();
            let out = model.forward_train(&mut tape, &batch, step, &mut jitter)?;
            check_finite(&out, &tape, "training", &id, &batch)?;
            sums[0] += scalar(&tape, out.total);
            sums[1] += scalar(&tape, out.logloss);
            sums[2] += scalar(&tape, out.expert_aux);
            sums[3] += out.depth_aux.map_or(0.0, |d| scalar(&tape, d));
            max_selected = max_selected.max(out.max_selected);
            let grads = tape.backward(out.total)?;
            weights.step(&mut model.store, &grads)?;
        }
        let t = cfg.inner_steps as f64;
        let mut row = HistoryRow {
            step,
            arch_loss,
            total: sums[0] / t,
            logloss: sums[1] / t,
            expert_aux: sums[2] / t,
            depth_aux: sums[3] / t,
            k,
            max_selected,
            val_logloss: None,
            val_auc: None,
            val_soft_logloss: None,
        };

        let last = step + 1 == cfg.max_steps;
        if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || last) {
            let inf = model.predict(val, InferOptions::default(), 4096)?;
            let ll = logloss(&inf.probs, &val.labels)?;
            row.val_logloss = Some(ll);
            row.val_auc = auc(&inf.probs, &val.labels).ok();
            row.val_soft_logloss = Some(logloss(&model.soft_predict(val, 4096)?, &val.labels)?);
            if report.best_val_logloss.is_none_or(|b| ll < b) {
                report.best_val_logloss = Some(ll);
                report.best_step = Some(step);
                best_store = Some(model.store.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        report.history.push(row);
        if cfg.patience > 0 && since_best >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(store) = best_store {
        model.copy_values_from(&store)?;
    }
    Ok(report)
}
