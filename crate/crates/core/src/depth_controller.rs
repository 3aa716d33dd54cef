//! Per-depth exit estimators and per-example depth selection.
//!
//! Each depth `l` owns an estimator `σ(w_l · flat(X_l) + b_l)`. A gating
//! network over `x0` assigns every example an exit depth. At inference the
//! batch is propagated recursively: after each layer the examples assigned
//! to the current depth leave through that depth's estimator and only the
//! survivors run the next layer. Training uses the soft mixture
//! `Σ_l p_l(x) · estimator_l(X_l)` instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Partition, Rng, Tape, Tensor, Var};
use crate::sparse_moe::argmax;

/// Affine-plus-sigmoid head on a flattened feature map.
#[derive(Clone, Debug)]
pub struct Estimator {
    input: usize,
    /// `[F·D, 1]`.
    pub weight: ParamId,
    /// `[1]`.
    pub bias: ParamId,
}

impl Estimator {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, rng: &mut Rng) -> Result<Self> {
        if input == 0 {
            return Err(Error::Config("estimator input must be nonempty".into()));
        }
        Ok(Estimator {
            input,
            weight: store.add(format!("{prefix}.w"), Tensor::glorot(&[input, 1], input, 1, rng), Partition::Weights),
            bias: store.add(format!("{prefix}.b"), Tensor::zeros(&[1]), Partition::Weights),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// Multiply-adds per example.
    pub fn flops(&self) -> u64 {
        self.input as u64
    }

    /// Logits `[B]` for `x` of shape `[B, F·D]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (rows, cols) = tape.value(x).as_matrix_dims();
        if cols != self.input {
            return Err(Error::shape("estimator", tape.shape(x), &[self.input]));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul(x, w)?;
        let z = tape.add_broadcast(z, b)?;
        tape.reshape(z, &[rows])
    }

    /// Click probabilities `[B]`.
    pub fn estimate(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let z = self.logits(tape, store, x)?;
        Ok(tape.sigmoid(z))
    }
}

/// Per-example exit depths, 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthPlan {
    pub depths: Vec<usize>,
}

impl DepthPlan {
    pub fn uniform(batch: usize, depth: usize) -> Self {
        DepthPlan {
            depths: vec![depth; batch],
        }
    }

    /// Top-1 depth of each probability row `[B, L]`; ties to the shallower.
    pub fn from_probs(probs: &[f64], layers: usize) -> Result<Self> {
        if layers == 0 || !probs.len().is_multiple_of(layers) {
            return Err(Error::Plan(format!("{} probabilities for {layers} depths", probs.len())));
        }
        Ok(DepthPlan {
            depths: probs.chunks_exact(layers).map(|row| argmax(row) + 1).collect(),
        })
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        match self.depths.iter().find(|&&d| d == 0 || d > layers) {
            Some(d) => Err(Error::Plan(format!("exit depth {d} outside 1..={layers}"))),
            None => Ok(()),
        }
    }
}

/// A stack of layers with one estimator per depth, as seen by the
/// propagation routines.
pub trait DepthStack {
    fn num_layers(&self) -> usize;

    /// Runs layer `depth` (1-based) on `x`; `rows` are the original batch
    /// positions of the rows of `x`.
    fn layer(&mut self, tape: &mut Tape, depth: usize, x: Var, x0: Var, rows: &[usize]) -> Result<Var>;

    /// Exit probabilities `[n]` of depth `depth` for the rows of `x`.
    fn estimate(&mut self, tape: &mut Tape, depth: usize, x: Var) -> Result<Var>;
}

/// Hard early-exit propagation. Returns the probabilities `[B]` in original
/// batch order.
pub fn dynamic_propagation<S: DepthStack>(tape: &mut Tape, stack: &mut S, x0: Var, plan: &DepthPlan) -> Result<Var> {
    let layers = stack.num_layers();
    if layers == 0 {
        return Err(Error::Config("stack has no layers".into()));
    }
    plan.validate(layers)?;
    let (batch, _) = tape.value(x0).as_matrix_dims();
    if plan.depths.len() != batch {
        return Err(Error::Plan(format!("{} plan entries for a batch of {batch}", plan.depths.len())));
    }
    let rows: Vec<usize> = (0..batch).collect();
    let mut exits: Vec<(Var, Vec<usize>)> = Vec::new();
    propagate(tape, stack, x0, x0, rows, 1, plan, &mut exits)?;

    let mut total: Option<Var> = None;
    for (p, rows) in exits {
        let col = tape.reshape(p, &[rows.len(), 1])?;
        let placed = tape.scatter_rows(col, &rows, batch)?;
        total = Some(match total {
            Some(t) => tape.add(t, placed)?,
            None => placed,
        });
    }
    let total = total.ok_or_else(|| Error::Internal("no example exited the stack".into()))?;
    tape.reshape(total, &[batch])
}

#[allow(clippy::too_many_arguments)]
fn propagate<S: DepthStack>(
    tape: &mut Tape,
    stack: &mut S,
    x: Var,
    x0: Var,
    rows: Vec<usize>,
    depth: usize,
    plan: &DepthPlan,
    exits: &mut Vec<(Var, Vec<usize>)>,
) -> Result<()> {
    let out = stack.layer(tape, depth, x, x0, &rows)?;
    if depth == stack.num_layers() {
        let p = stack.estimate(tape, depth, out)?;
        exits.push((p, rows));
        return Ok(());
    }
    let (mut exit_local, mut keep_local) = (Vec::new(), Vec::new());
    for (local, &r) in rows.iter().enumerate() {
        if plan.depths[r] == depth {
            exit_local.push(local);
        } else {
            keep_local.push(local);
        }
    }
    if keep_local.is_empty() {
        let p = stack.estimate(tape, depth, out)?;
        exits.push((p, rows));
        return Ok(());
    }
    if !exit_local.is_empty() {
        let xe = tape.gather_rows(out, &exit_local)?;
        let p = stack.estimate(tape, depth, xe)?;
        exits.push((p, exit_local.iter().map(|&l| rows[l]).collect()));
    }
    let (xk, x0k) = if exit_local.is_empty() {
        (out, x0)
    } else {
        (tape.gather_rows(out, &keep_local)?, tape.gather_rows(x0, &keep_local)?)
    };
    let keep_rows = keep_local.iter().map(|&l| rows[l]).collect();
    propagate(tape, stack, xk, x0k, keep_rows, depth + 1, plan, exits)
}

/// `Σ_l p_l · estimator_l(X_l)` with every layer run on the whole batch;
/// `probs` is `[B, L]`.
pub fn soft_depth_forward<S: DepthStack>(tape: &mut Tape, stack: &mut S, x0: Var, probs: Var) -> Result<Var> {
    let layers = stack.num_layers();
    let (batch, _) = tape.value(x0).as_matrix_dims();
    if tape.shape(probs) != [batch, layers] {
        return Err(Error::shape("soft depth", tape.shape(probs), &[batch, layers]));
    }
    let rows: Vec<usize> = (0..batch).collect();
    let mut x = x0;
    let mut total: Option<Var> = None;
    for depth in 1..=layers {
        x = stack.layer(tape, depth, x, x0, &rows)?;
        let est = stack.estimate(tape, depth, x)?;
        let p = tape.slice_cols(probs, depth - 1, 1)?;
        let p = tape.reshape(p, &[batch])?;
        let term = tape.hadamard(p, est)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("stack has no layers".into()))
}

/// Fraction of examples exiting at each depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthHistogram {
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

pub fn depth_histogram(depths: &[usize], layers: usize) -> Result<DepthHistogram> {
    if depths.is_empty() {
        return Err(Error::Stats("depth histogram of an empty dataset".into()));
    }
    DepthPlan {
        depths: depths.to_vec(),
    }
    .validate(layers)?;
    let mut counts = vec![0usize; layers];
    for &d in depths {
        counts[d - 1] += 1;
    }
    let n = depths.len() as f64;
    let fractions = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(DepthHistogram { counts, fractions })
}

impl DepthHistogram {
    /// Two-row table: depth indices, then the percentage exiting at each.
    pub fn render(&self) -> String {
        let mut head = String::from("Depth   ");
        let mut row = String::from("Fraction");
        for (i, f) in self.fractions.iter().enumerate() {
            head.push_str(&format!("\t{:>7}", i + 1));
            row.push_str(&format!("\t{:>6.2}%", 100.0 * f));
        }
        format!("{head}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_param_gradients;
    use crate::sparse_moe::{GatingConfig, GatingNetwork};

    /// Toy stack with row-independent layers `relu(x·A_l + x0)`.
    struct Toy {
        mats: Vec<ParamId>,
        estimators: Vec<Estimator>,
        store: ParamStore,
        calls: Vec<usize>,
    }

    impl Toy {
        fn new(layers: usize, width: usize, rng: &mut Rng) -> Self {
            let mut store = ParamStore::new();
            let mats = (0..layers)
                .map(|l| store.add(format!("a{l}"), Tensor::glorot(&[width, width], width, width, rng), Partition::Weights))
                .collect();
            let estimators = (0..layers)
                .map(|l| Estimator::new(&mut store, &format!("e{l}"), width, rng).unwrap())
                .collect();
            Toy {
                mats,
                estimators,
                store,
                calls: vec![0; layers],
            }
        }
    }

    impl DepthStack for Toy {
        fn num_layers(&self) -> usize {
            self.mats.len()
        }

        fn layer(&mut self, tape: &mut Tape, depth: usize, x: Var, x0: Var, rows: &[usize]) -> Result<Var> {
            self.calls[depth - 1] += rows.len();
            let a = tape.param(&self.store, self.mats[depth - 1]);
            let y = tape.matmul(x, a)?;
            let y = tape.add(y, x0)?;
            Ok(tape.relu(y))
        }

        fn estimate(&mut self, tape: &mut Tape, depth: usize, x: Var) -> Result<Var> {
            self.estimators[depth - 1].estimate(tape, &self.store, x)
        }
    }

    fn naive(toy: &mut Toy, x0: &[f64], width: usize, depth: usize) -> f64 {
        let mut tape = Tape::new();
        let x0v = tape.constant(Tensor::matrix(1, width, x0.to_vec()).unwrap());
        let mut x = x0v;
        for d in 1..=depth {
            x = toy.layer(&mut tape, d, x, x0v, &[0]).unwrap();
        }
        let p = toy.estimate(&mut tape, depth, x).unwrap();
        tape.data(p)[0]
    }

    #[test]
    fn estimator_examples() {
        let mut store = ParamStore::new();
        let e = Estimator::new(&mut store, "e", 3, &mut Rng::seed(0)).unwrap();
        store.set(e.weight, &[0.0; 3]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        let p = e.estimate(&mut tape, &store, x).unwrap();
        assert_eq!(tape.data(p), &[0.5]);

        store.set(e.weight, &[0.5, 0.25, -0.1]).unwrap();
        store.set(e.bias, &[0.2]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        let p = e.estimate(&mut tape, &store, x).unwrap();
        let z: f64 = 0.5 - 0.5 - 0.3 + 0.2;
        assert!((tape.data(p)[0] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);

        let mut last = 0.0;
        for b in [0.0, 5.0, 20.0, 35.0] {
            store.set(e.bias, &[b]).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
            let p = e.estimate(&mut tape, &store, x).unwrap();
            let p = tape.data(p)[0];
            assert!(p > last && p <= 1.0);
            last = p;
        }
        assert!(last > 1.0 - 1e-12);
    }

    #[test]
    fn hard_propagation_matches_per_example_loop() {
        let mut rng = Rng::seed(1);
        for trial in 0..30 {
            let layers = 1 + rng.index(4);
            let batch = 1 + rng.index(12);
            let width = 3;
            let mut toy = Toy::new(layers, width, &mut rng);
            let x0: Vec<f64> = (0..batch * width).map(|_| rng.normal()).collect();
            let plan = DepthPlan {
                depths: (0..batch).map(|_| 1 + rng.index(layers)).collect(),
            };
            let mut tape = Tape::new();
            let x0v = tape.constant(Tensor::matrix(batch, width, x0.clone()).unwrap());
            let p = dynamic_propagation(&mut tape, &mut toy, x0v, &plan).unwrap();
            let got = tape.data(p).to_vec();
            // layer d runs exactly on the examples planned for depth ≥ d
            for d in 1..=layers {
                let expect = plan.depths.iter().filter(|&&pd| pd >= d).count();
                assert_eq!(toy.calls[d - 1], expect, "trial {trial}");
            }
            for i in 0..batch {
                let want = naive(&mut toy, &x0[i * width..(i + 1) * width], width, plan.depths[i]);
                assert!((got[i] - want).abs() < 1e-12, "trial {trial} example {i}");
            }
        }
    }

    #[test]
    fn uniform_plans() {
        let mut rng = Rng::seed(2);
        let (layers, batch, width) = (3, 5, 4);
        let mut toy = Toy::new(layers, width, &mut rng);
        let x0 = Tensor::matrix(batch, width, (0..batch * width).map(|_| rng.normal()).collect()).unwrap();
        for depth in [1, layers] {
            let mut tape = Tape::new();
            let x0v = tape.constant(x0.clone());
            let p = dynamic_propagation(&mut tape, &mut toy, x0v, &DepthPlan::uniform(batch, depth)).unwrap();
            let got = tape.data(p).to_vec();
            let mut tape = Tape::new();
            let x0v = tape.constant(x0.clone());
            let mut x = x0v;
            for d in 1..=depth {
                x = toy.layer(&mut tape, d, x, x0v, &[0, 1, 2, 3, 4]).unwrap();
            }
            let want = toy.estimate(&mut tape, depth, x).unwrap();
            assert_eq!(got, tape.data(want));
        }
        let mut tape = Tape::new();
        let x0v = tape.constant(x0.clone());
        let bad = DepthPlan::uniform(batch, layers + 1);
        assert!(matches!(dynamic_propagation(&mut tape, &mut toy, x0v, &bad), Err(Error::Plan(_))));
    }

    #[test]
    fn soft_forward_reduces_to_hard() {
        let mut rng = Rng::seed(3);
        let (layers, batch, width) = (3, 6, 3);
        let mut toy = Toy::new(layers, width, &mut rng);
        let x0 = Tensor::matrix(batch, width, (0..batch * width).map(|_| rng.normal()).collect()).unwrap();
        let plan = DepthPlan {
            depths: vec![1, 3, 2, 2, 1, 3],
        };
        let mut onehot = vec![0.0; batch * layers];
        for (i, &d) in plan.depths.iter().enumerate() {
            onehot[i * layers + d - 1] = 1.0;
        }
        let mut tape = Tape::new();
        let x0v = tape.constant(x0.clone());
        let hard = dynamic_propagation(&mut tape, &mut toy, x0v, &plan).unwrap();
        let hard = tape.data(hard).to_vec();
        let mut tape = Tape::new();
        let x0v = tape.constant(x0.clone());
        let probs = tape.constant(Tensor::matrix(batch, layers, onehot).unwrap());
        let soft = soft_depth_forward(&mut tape, &mut toy, x0v, probs).unwrap();
        assert_eq!(tape.data(soft), hard.as_slice());

        // uniform over two depths → midpoint of the two predictions
        let mut toy = Toy::new(2, width, &mut rng);
        let mut preds = Vec::new();
        for d in 1..=2 {
            let mut tape = Tape::new();
            let x0v = tape.constant(x0.clone());
            let p = dynamic_propagation(&mut tape, &mut toy, x0v, &DepthPlan::uniform(batch, d)).unwrap();
            preds.push(tape.data(p).to_vec());
        }
        let mut tape = Tape::new();
        let x0v = tape.constant(x0.clone());
        let probs = tape.constant(Tensor::full(&[batch, 2], 0.5));
        let soft = soft_depth_forward(&mut tape, &mut toy, x0v, probs).unwrap();
        for i in 0..batch {
            assert!((tape.data(soft)[i] - 0.5 * (preds[0][i] + preds[1][i])).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_forward_gate_gradients() {
        let mut rng = Rng::seed(4);
        let (layers, batch, width) = (3, 4, 4);
        let mut toy = Toy::new(layers, width, &mut rng);
        let cfg = GatingConfig {
            reduction_ratio: 1,
            hidden_dim: 3,
            jitter: 0.0,
        };
        let mut gate_store = toy.store.clone();
        let gate = GatingNetwork::new(&mut gate_store, "depth", width, layers, &cfg, &mut rng).unwrap();
        toy.store = gate_store.clone();
        let x0 = Tensor::matrix(batch, width, (0..batch * width).map(|_| rng.normal()).collect()).unwrap();
        let toy = std::cell::RefCell::new(toy);
        let err = check_param_gradients(&gate_store, |tape, s| {
            let mut t = toy.borrow_mut();
            t.store = s.clone();
            let x0v = tape.constant(x0.clone());
            let scores = gate.scores(tape, s, x0v, None)?;
            let probs = tape.softmax_rows(scores, None)?;
            soft_depth_forward(tape, &mut *t, x0v, probs)
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn depth_gate_plans() {
        assert_eq!(DepthPlan::from_probs(&[1.0, 1.0], 1).unwrap().depths, vec![1, 1]);
        let p = DepthPlan::from_probs(&[0.25, 0.25, 0.25, 0.25, 0.1, 0.7, 0.1, 0.1], 4).unwrap();
        assert_eq!(p.depths, vec![1, 2]);
    }

    #[test]
    fn histogram() {
        let h = depth_histogram(&[2, 2, 2], 4).unwrap();
        assert_eq!(h.fractions, vec![0.0, 1.0, 0.0, 0.0]);
        let mut rng = Rng::seed(5);
        let depths: Vec<usize> = (0..1000).map(|_| 1 + rng.index(4)).collect();
        let h = depth_histogram(&depths, 4).unwrap();
        for d in 1..=4 {
            let c = depths.iter().filter(|&&x| x == d).count();
            assert_eq!(h.counts[d - 1], c);
            assert_eq!(h.fractions[d - 1], c as f64 / 1000.0);
        }
        assert!((h.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let table = h.render();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("Depth"));
        assert!(lines[1].starts_with("Fraction"));
        assert_eq!(lines[1].matches('%').count(), 4);
        assert!(depth_histogram(&[], 2).is_err());
    }
}
