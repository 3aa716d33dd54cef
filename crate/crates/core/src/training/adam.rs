//! Adam with bias correction over a fixed subset of a parameter store.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "adam needs lr ≥ 0, betas in [0, 1) and eps > 0, got {self:?}"
            )))
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam restricted to `ids`; every other parameter is never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    ids: Vec<ParamId>,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let states = ids.iter().map(|&id| AdamState::new(store.get(id).len())).collect();
        Ok(Adam { config, ids, states })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update from tape gradients. Parameters absent from the
    /// graph see a zero gradient. With `lr = 0` nothing is written.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.config.lr == 0.0 {
            return Ok(());
        }
        let by_id: HashMap<ParamId, &[f64]> = grads.params().collect();
        for (id, state) in self.ids.iter().zip(&mut self.states) {
            let tensor = store.get_mut(*id);
            let zeros;
            let g = match by_id.get(id) {
                Some(g) => *g,
                None => {
                    zeros = vec![0.0; tensor.len()];
                    &zeros
                }
            };
            adam_step(tensor.data_mut(), g, state, &self.config)?;
        }
        Ok(())
    }
}
