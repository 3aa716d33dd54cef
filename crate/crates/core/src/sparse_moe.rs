//! Sparsely gated mixture-of-experts layer.
//!
//! A gating network scores the `N` experts of a layer from the raw embedded
//! input `x0` by cosine similarity against learned expert embeddings, scaled
//! by a learned temperature. Only the top-`k` scores survive a masked
//! softmax; each example is dispatched to the experts with a nonzero weight
//! and the weighted expert outputs are recombined, added to the layer input
//! and layer-normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{build_expert, ExpertKind, ExpertSettings, FieldGeometry, InteractionExpert};
use crate::numerics::{self, ParamId, ParamStore, Partition, Rng, Tape, Tensor, Unary, Var};

/// Lower bound of the gate temperature.
pub const TAU_MIN: f64 = 0.05;
/// Temperature at initialization.
pub const TAU_INIT: f64 = 1.0;
const NORM_EPS: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingConfig {
    /// Width of the reduction layer is `max(1, F·D / reduction_ratio)`.
    pub reduction_ratio: usize,
    pub hidden_dim: usize,
    /// Half-width of the multiplicative input jitter applied in training.
    pub jitter: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        GatingConfig {
            reduction_ratio: 8,
            hidden_dim: 32,
            jitter: 0.01,
        }
    }
}

impl GatingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("gating reduction_ratio and hidden_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("gating jitter {} must lie in [0, 1)", self.jitter)));
        }
        Ok(())
    }

    pub fn reduced_width(&self, input: usize) -> usize {
        (input / self.reduction_ratio).max(1)
    }
}

/// Noisy cosine router over `outputs` choices.
#[derive(Clone, Debug)]
pub struct GatingNetwork {
    config: GatingConfig,
    input: usize,
    outputs: usize,
    pub reduce_weight: ParamId,
    pub reduce_bias: ParamId,
    pub project_weight: ParamId,
    pub project_bias: ParamId,
    /// `[outputs, hidden_dim]`.
    pub embeddings: ParamId,
    /// `τ = TAU_MIN + softplus(raw_tau)`.
    pub raw_tau: ParamId,
}

impl GatingNetwork {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, outputs: usize, config: &GatingConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if input == 0 || outputs == 0 {
            return Err(Error::Config("gate needs a nonempty input and at least one output".into()));
        }
        let r = config.reduced_width(input);
        let d = config.hidden_dim;
        let arch = Partition::Architecture;
        let raw = ((TAU_INIT - TAU_MIN).exp() - 1.0).ln();
        Ok(GatingNetwork {
            config: config.clone(),
            input,
            outputs,
            reduce_weight: store.add(format!("{prefix}.reduce.w"), Tensor::glorot(&[input, r], input, r, rng), arch),
            reduce_bias: store.add(format!("{prefix}.reduce.b"), Tensor::zeros(&[r]), arch),
            project_weight: store.add(format!("{prefix}.project.w"), Tensor::glorot(&[r, d], r, d, rng), arch),
            // nonzero so a row whose reduction is entirely dead still has a
            // direction to normalize
            project_bias: store.add(format!("{prefix}.project.b"), Tensor::glorot(&[d], r, d, rng), arch),
            embeddings: store.add(format!("{prefix}.embeddings"), Tensor::glorot(&[outputs, d], outputs, d, rng), arch),
            raw_tau: store.add(format!("{prefix}.raw_tau"), Tensor::vector(vec![raw]), arch),
        })
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn config(&self) -> &GatingConfig {
        &self.config
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        TAU_MIN + numerics::softplus(store.get(self.raw_tau).data()[0])
    }

    /// Multiply-adds per example: reduction, projection and the cosine
    /// products `FD·R + R·d + N·d`.
    pub fn flops(&self) -> u64 {
        let r = self.config.reduced_width(self.input) as u64;
        let d = self.config.hidden_dim as u64;
        self.input as u64 * r + r * d + self.outputs as u64 * d
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.reduce_weight,
            self.reduce_bias,
            self.project_weight,
            self.project_bias,
            self.embeddings,
            self.raw_tau,
        ]
    }

    /// Temperature-scaled cosine scores `[B, outputs]`, each in `[-1/τ, 1/τ]`.
    /// With `jitter`, the input is first multiplied elementwise by
    /// `U(1 - eps, 1 + eps)` draws.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, x0: Var, jitter: Option<&mut Rng>) -> Result<Var> {
        let (rows, cols) = tape.value(x0).as_matrix_dims();
        if cols != self.input {
            return Err(Error::shape("gate input", tape.shape(x0), &[self.input]));
        }
        let mut input = x0;
        if let Some(rng) = jitter {
            let eps = self.config.jitter;
            let noise: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(1.0 - eps, 1.0 + eps)).collect();
            let noise = tape.constant(Tensor::matrix(rows, cols, noise)?);
            input = tape.hadamard(input, noise)?;
        }
        let w = tape.param(store, self.reduce_weight);
        let b = tape.param(store, self.reduce_bias);
        let h = tape.matmul(input, w)?;
        let h = tape.add_broadcast(h, b)?;
        let h = tape.relu(h);
        let w = tape.param(store, self.project_weight);
        let b = tape.param(store, self.project_bias);
        let h = tape.matmul(h, w)?;
        let h = tape.add_broadcast(h, b)?;
        let h = tape.l2_normalize_rows(h, NORM_EPS);
        let e = tape.param(store, self.embeddings);
        let e = tape.l2_normalize_rows(e, NORM_EPS);
        let e = tape.transpose(e)?;
        let cos = tape.matmul(h, e)?;
        let raw = tape.param(store, self.raw_tau);
        let tau = tape.softplus(raw);
        let tau = tape.add_const(tau, TAU_MIN);
        let inv = tape.unary(Unary::Recip, tau)?;
        tape.mul_scalar(cos, inv)
    }

    /// Scores for a single flattened input.
    pub fn gate_scores(&self, store: &ParamStore, x0_flat: &[f64], jitter: Option<&mut Rng>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, x0_flat.len(), x0_flat.to_vec())?);
        let s = self.scores(&mut tape, store, x, jitter)?;
        Ok(tape.data(s).to_vec())
    }
}

/// Routing of one example: the experts with nonzero weight and the weights
/// over all `N` experts.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

impl GateDecision {
    pub fn from_weights(weights: &[f64]) -> Self {
        GateDecision {
            selected: weights.iter().enumerate().filter(|(_, &w)| w > 0.0).map(|(j, _)| j).collect(),
            weights: weights.to_vec(),
        }
    }
}

/// Membership mask of the `k` largest scores; ties go to the lower index.
pub fn top_k_mask(scores: &[f64], k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("k = {k} outside 1..={}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &j in &order[..k] {
        mask[j] = true;
    }
    Ok(mask)
}

/// Softmax over the top-`k` scores; every other weight is exactly 0.
pub fn top_k_gate(scores: &[f64], k: usize) -> Result<GateDecision> {
    let mask = top_k_mask(scores, k)?;
    let weights = numerics::softmax(scores, Some(&mask))?;
    Ok(GateDecision::from_weights(&weights))
}

/// Index of the largest entry, ties to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// Staircase from `N` experts down to `k_final`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub num_experts: usize,
    pub k_final: usize,
    pub anneal_steps: usize,
}

impl AnnealSchedule {
    pub fn new(num_experts: usize, k_final: usize, anneal_steps: usize) -> Result<Self> {
        if num_experts == 0 || k_final == 0 || k_final > num_experts {
            return Err(Error::Config(format!(
                "k_final = {k_final} must lie in 1..={num_experts}"
            )));
        }
        Ok(AnnealSchedule {
            num_experts,
            k_final,
            anneal_steps,
        })
    }

    /// `N - floor((N - k_final)·step / anneal_steps)`, then `k_final`.
    pub fn k_at(&self, step: usize) -> usize {
        anneal_k(step, self)
    }
}

pub fn anneal_k(step: usize, schedule: &AnnealSchedule) -> usize {
    let AnnealSchedule {
        num_experts,
        k_final,
        anneal_steps,
    } = *schedule;
    if step >= anneal_steps {
        return k_final;
    }
    num_experts - (num_experts - k_final) * step / anneal_steps
}

/// Which examples each expert receives. Groups hold batch positions in
/// ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DispatchPlan {
    pub batch: usize,
    pub groups: Vec<Vec<usize>>,
}

impl DispatchPlan {
    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Rows of `x` (`batch × cols`) belonging to each group.
    pub fn gather(&self, x: &[f64], cols: usize) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.batch * cols {
            return Err(Error::shape("dispatch", &[x.len()], &[self.batch, cols]));
        }
        Ok(self
            .groups
            .iter()
            .map(|g| g.iter().flat_map(|&i| x[i * cols..(i + 1) * cols].iter().copied()).collect())
            .collect())
    }
}

/// Expert `j` receives exactly the examples whose weight `j` is positive.
pub fn dispatch(decisions: &[GateDecision], num_experts: usize) -> Result<DispatchPlan> {
    let mut groups = vec![Vec::new(); num_experts];
    for (i, d) in decisions.iter().enumerate() {
        if d.weights.len() != num_experts {
            return Err(Error::Internal(format!(
                "decision {i} has {} weights for {num_experts} experts",
                d.weights.len()
            )));
        }
        for (j, &w) in d.weights.iter().enumerate() {
            if w > 0.0 {
                groups[j].push(i);
            }
        }
    }
    Ok(DispatchPlan {
        batch: decisions.len(),
        groups,
    })
}

/// `y_i = Σ_j weight_ij · out_j(i)` from per-group expert outputs.
pub fn combine(outputs: &[Vec<f64>], plan: &DispatchPlan, decisions: &[GateDecision], cols: usize) -> Result<Vec<f64>> {
    if outputs.len() != plan.groups.len() || decisions.len() != plan.batch {
        return Err(Error::Internal("expert outputs do not match the dispatch plan".into()));
    }
    let mut y = vec![0.0; plan.batch * cols];
    for (j, (out, group)) in outputs.iter().zip(&plan.groups).enumerate() {
        if out.len() != group.len() * cols {
            return Err(Error::Internal(format!(
                "expert {j} returned {} values for {} examples",
                out.len(),
                group.len()
            )));
        }
        for (r, &i) in group.iter().enumerate() {
            let w = decisions[i].weights[j];
            for c in 0..cols {
                y[i * cols + c] += w * out[r * cols + c];
            }
        }
    }
    Ok(y)
}

/// Per-batch routing statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub examples: usize,
    /// Fraction of examples whose router argmax is expert `j`.
    pub fraction: Vec<f64>,
    /// Mean router probability of expert `j`.
    pub mean_prob: Vec<f64>,
}

impl LoadStats {
    /// From row-major router probabilities `[examples, N]`.
    pub fn from_probs(probs: &[f64], num_experts: usize) -> Result<Self> {
        if num_experts == 0 || probs.is_empty() || !probs.len().is_multiple_of(num_experts) {
            return Err(Error::Stats("load statistics need at least one example".into()));
        }
        let examples = probs.len() / num_experts;
        let mut fraction = vec![0.0; num_experts];
        let mut mean_prob = vec![0.0; num_experts];
        for row in probs.chunks_exact(num_experts) {
            fraction[argmax(row)] += 1.0;
            for (m, &p) in mean_prob.iter_mut().zip(row) {
                *m += p;
            }
        }
        let n = examples as f64;
        fraction.iter_mut().for_each(|v| *v /= n);
        mean_prob.iter_mut().for_each(|v| *v /= n);
        Ok(LoadStats {
            examples,
            fraction,
            mean_prob,
        })
    }
}

fn check_stats(stats: &LoadStats) -> Result<()> {
    if stats.examples == 0 || stats.fraction.is_empty() || stats.fraction.len() != stats.mean_prob.len() {
        return Err(Error::Stats("load statistics are empty or inconsistent".into()));
    }
    Ok(())
}

/// Positive target loads summing to 1.
pub fn validate_targets(targets: &[f64], num_experts: usize) -> Result<()> {
    if targets.len() != num_experts {
        return Err(Error::Config(format!(
            "{} target loads for {num_experts} experts",
            targets.len()
        )));
    }
    if targets.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
        return Err(Error::Config("target loads must be positive".into()));
    }
    let sum: f64 = targets.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("target loads sum to {sum}, expected 1")));
    }
    Ok(())
}

/// `λ · N · Σ_j f_j · P_j`.
pub fn load_balance_loss(stats: &LoadStats, lambda: f64) -> Result<f64> {
    check_stats(stats)?;
    let n = stats.fraction.len() as f64;
    Ok(lambda * n * stats.fraction.iter().zip(&stats.mean_prob).map(|(f, p)| f * p).sum::<f64>())
}

/// `λ · Σ_j f_j · P_j / w_j`.
pub fn load_distribution_loss(stats: &LoadStats, targets: &[f64], lambda: f64) -> Result<f64> {
    check_stats(stats)?;
    validate_targets(targets, stats.fraction.len())?;
    Ok(lambda
        * stats
            .fraction
            .iter()
            .zip(&stats.mean_prob)
            .zip(targets)
            .map(|((f, p), w)| f * p / w)
            .sum::<f64>())
}

/// Differentiable form of [`load_distribution_loss`]: the counts `f_j` are
/// constants and the gradient reaches the router through `P_j` only.
pub fn load_distribution_loss_tape(tape: &mut Tape, probs: Var, targets: &[f64], lambda: f64) -> Result<Var> {
    let (rows, n) = tape.value(probs).as_matrix_dims();
    let stats = LoadStats::from_probs(tape.data(probs), n)?;
    validate_targets(targets, n)?;
    debug_assert_eq!(stats.examples, rows);
    let mean = tape.mean_rows(probs);
    let coeff: Vec<f64> = stats.fraction.iter().zip(targets).map(|(f, w)| lambda * f / w).collect();
    let coeff = tape.constant(Tensor::vector(coeff));
    let weighted = tape.hadamard(mean, coeff)?;
    Ok(tape.sum(weighted))
}

/// Configuration of one mixture-of-experts layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeLayerConfig {
    pub experts: Vec<ExpertKind>,
    pub k_final: usize,
    #[serde(default)]
    pub anneal_steps: usize,
    #[serde(default)]
    pub gating: GatingConfig,
    /// Target loads `w_j`; uniform when absent.
    #[serde(default)]
    pub target_loads: Option<Vec<f64>>,
    /// Evaluate every expert on every example and weight by the plain
    /// softmax, with no top-k masking.
    #[serde(default)]
    pub dense_moe: bool,
    #[serde(default)]
    pub expert_settings: ExpertSettings,
}

impl MoeLayerConfig {
    pub fn new(experts: Vec<ExpertKind>, k_final: usize) -> Self {
        MoeLayerConfig {
            experts,
            k_final,
            anneal_steps: 0,
            gating: GatingConfig::default(),
            target_loads: None,
            dense_moe: false,
            expert_settings: ExpertSettings::default(),
        }
    }

    pub fn validate(&self, geom: FieldGeometry) -> Result<()> {
        let n = self.experts.len();
        if n == 0 {
            return Err(Error::Config("a layer needs at least one expert".into()));
        }
        let mut kinds = self.experts.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != n {
            return Err(Error::Config("each expert kind may appear at most once per layer".into()));
        }
        AnnealSchedule::new(n, self.k_final, self.anneal_steps)?;
        self.gating.validate()?;
        for &kind in &self.experts {
            self.expert_settings.validate(kind, geom)?;
        }
        validate_targets(&self.targets(), n)
    }

    pub fn targets(&self) -> Vec<f64> {
        let n = self.experts.len();
        self.target_loads.clone().unwrap_or_else(|| vec![1.0 / n as f64; n])
    }
}

/// Result of one layer forward pass.
#[derive(Debug)]
pub struct MoeOutput {
    /// `[B, F·D]`.
    pub output: Var,
    /// Unmasked router probabilities `[B, N]`.
    pub probs: Var,
    /// Combination weights `[B, N]`, zero off the top-k support.
    pub weights: Var,
    pub decisions: Vec<GateDecision>,
    /// Number of examples each expert was evaluated on.
    pub calls: Vec<usize>,
}

#[derive(Debug)]
pub struct MoeLayer {
    config: MoeLayerConfig,
    geom: FieldGeometry,
    schedule: AnnealSchedule,
    targets: Vec<f64>,
    experts: Vec<Box<dyn InteractionExpert>>,
    gate: GatingNetwork,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl MoeLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, geom: FieldGeometry, config: &MoeLayerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate(geom)?;
        let n = config.experts.len();
        let experts = config
            .experts
            .iter()
            .map(|&kind| build_expert(kind, store, prefix, geom, &config.expert_settings, rng))
            .collect::<Result<Vec<_>>>()?;
        let gate = GatingNetwork::new(store, &format!("{prefix}.gate"), geom.flat(), n, &config.gating, rng)?;
        Ok(MoeLayer {
            config: config.clone(),
            geom,
            schedule: AnnealSchedule::new(n, config.k_final, config.anneal_steps)?,
            targets: config.targets(),
            experts,
            gate,
            norm_gain: store.add(format!("{prefix}.norm.gain"), Tensor::ones(&[geom.flat()]), Partition::Weights),
            norm_bias: store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[geom.flat()]), Partition::Weights),
        })
    }

    pub fn config(&self) -> &MoeLayerConfig {
        &self.config
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn experts(&self) -> &[Box<dyn InteractionExpert>] {
        &self.experts
    }

    pub fn kinds(&self) -> Vec<ExpertKind> {
        self.config.experts.clone()
    }

    pub fn gate(&self) -> &GatingNetwork {
        &self.gate
    }

    pub fn schedule(&self) -> &AnnealSchedule {
        &self.schedule
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn is_dense(&self) -> bool {
        self.config.dense_moe
    }

    /// Per-example multiply-adds of routing plus the experts in `selected`.
    pub fn flops(&self, selected: &[usize]) -> u64 {
        self.gate.flops() + selected.iter().map(|&j| self.experts[j].flops()).sum::<u64>()
    }

    /// `layer_norm(x + Σ_j w_j E_j(x, x0))`, evaluating each expert only on
    /// the examples routed to it.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, x0: Var, k: usize, jitter: Option<&mut Rng>) -> Result<MoeOutput> {
        let n = self.num_experts();
        let (batch, cols) = tape.value(x).as_matrix_dims();
        if cols != self.geom.flat() || tape.shape(x0) != tape.shape(x) {
            return Err(Error::shape("moe layer", tape.shape(x), tape.shape(x0)));
        }
        let scores = self.gate.scores(tape, store, x0, jitter)?;
        let probs = tape.softmax_rows(scores, None)?;
        let weights = if self.config.dense_moe {
            probs
        } else {
            let s = tape.data(scores);
            let mut mask = Vec::with_capacity(batch * n);
            for row in s.chunks_exact(n) {
                mask.extend(top_k_mask(row, k)?);
            }
            tape.softmax_rows(scores, Some(&mask))?
        };
        let mut decisions: Vec<GateDecision> = tape.data(weights).chunks_exact(n).map(GateDecision::from_weights).collect();
        if self.config.dense_moe {
            decisions.iter_mut().for_each(|d| d.selected = (0..n).collect());
        }
        let plan = if self.config.dense_moe {
            DispatchPlan {
                batch,
                groups: vec![(0..batch).collect(); n],
            }
        } else {
            dispatch(&decisions, n)?
        };

        let mut calls = vec![0; n];
        let mut mixture: Option<Var> = None;
        for (j, group) in plan.groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            calls[j] += group.len();
            let xj = tape.gather_rows(x, group)?;
            let x0j = tape.gather_rows(x0, group)?;
            let yj = self.experts[j].forward(tape, store, xj, x0j)?;
            let wj = tape.slice_cols(weights, j, 1)?;
            let wj = tape.gather_rows(wj, group)?;
            let wj = tape.reshape(wj, &[group.len()])?;
            let yj = tape.scale_rows(yj, wj)?;
            let yj = tape.scatter_rows(yj, group, batch)?;
            mixture = Some(match mixture {
                Some(m) => tape.add(m, yj)?,
                None => yj,
            });
        }
        let mixture = mixture.ok_or_else(|| Error::Internal("no expert received any example".into()))?;
        let residual = tape.add(x, mixture)?;
        let gain = tape.param(store, self.norm_gain);
        let bias = tape.param(store, self.norm_bias);
        let output = tape.layer_norm_rows(residual, gain, bias, LAYER_NORM_EPS)?;
        Ok(MoeOutput {
            output,
            probs,
            weights,
            decisions,
            calls,
        })
    }

    pub fn load_stats(&self, tape: &Tape, out: &MoeOutput) -> Result<LoadStats> {
        LoadStats::from_probs(tape.data(out.probs), self.num_experts())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_param_gradients;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn top_k_examples() {
        let d = top_k_gate(&[0.5, 0.2, -0.1], 2).unwrap();
        let e = 0.3f64.exp();
        assert!(close(&d.weights, &[e / (1.0 + e), 1.0 / (1.0 + e), 0.0], 1e-12));
        assert!(close(&d.weights, &[0.5744, 0.4256, 0.0], 1e-3));
        assert_eq!(d.selected, vec![0, 1]);

        let full = top_k_gate(&[0.5, 0.2, -0.1], 3).unwrap();
        assert!(close(&full.weights, &numerics::softmax(&[0.5, 0.2, -0.1], None).unwrap(), 0.0));

        let one = top_k_gate(&[0.1, 0.9, 0.3], 1).unwrap();
        assert_eq!(one.weights, vec![0.0, 1.0, 0.0]);

        // ties resolve toward the lower index
        let tie = top_k_gate(&[0.4, 0.4, 0.4], 1).unwrap();
        assert_eq!(tie.selected, vec![0]);
        assert_eq!(top_k_mask(&[0.0, 1.0, 1.0, 0.0], 2).unwrap(), vec![false, true, true, false]);
        assert_eq!(top_k_mask(&[1.0, 0.0, 0.0], 2).unwrap(), vec![true, true, false]);

        assert!(matches!(top_k_gate(&[0.1], 0), Err(Error::Config(_))));
        assert!(matches!(top_k_gate(&[0.1], 2), Err(Error::Config(_))));
    }

    #[test]
    fn anneal_examples() {
        let s = AnnealSchedule::new(5, 2, 3).unwrap();
        let ks: Vec<usize> = (0..6).map(|t| s.k_at(t)).collect();
        assert_eq!(ks, vec![5, 4, 3, 2, 2, 2]);
        let s = AnnealSchedule::new(4, 1, 10).unwrap();
        assert_eq!(s.k_at(0), 4);
        assert_eq!(s.k_at(10), 1);
        assert_eq!(s.k_at(1000), 1);
        let s = AnnealSchedule::new(3, 2, 0).unwrap();
        assert_eq!(s.k_at(0), 2);
        assert!(AnnealSchedule::new(3, 4, 1).is_err());
    }

    fn geom() -> FieldGeometry {
        FieldGeometry::new(3, 4).unwrap()
    }

    fn random_batch(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn cosine_scores_are_bounded_and_aligned() {
        let mut rng = Rng::seed(1);
        let mut store = ParamStore::new();
        let cfg = GatingConfig {
            reduction_ratio: 2,
            ..GatingConfig::default()
        };
        let gate = GatingNetwork::new(&mut store, "g", 12, 3, &cfg, &mut rng).unwrap();
        assert!((gate.tau(&store) - TAU_INIT).abs() < 1e-12);
        let x: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let a = gate.gate_scores(&store, &x, None).unwrap();
        let b = gate.gate_scores(&store, &x, None).unwrap();
        assert_eq!(a, b);
        let tau = gate.tau(&store);
        assert!(a.iter().all(|s| s.abs() <= 1.0 / tau + 1e-12));
        let jittered = gate.gate_scores(&store, &x, Some(&mut rng)).unwrap();
        assert_ne!(a, jittered);

        // embedding 1 set parallel to the hidden state → score exactly 1/τ
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, 12, x.clone()).unwrap());
        let w = tape.param(&store, gate.reduce_weight);
        let bias = tape.param(&store, gate.reduce_bias);
        let h = tape.matmul(xv, w).unwrap();
        let h = tape.add_broadcast(h, bias).unwrap();
        let h = tape.relu(h);
        let w = tape.param(&store, gate.project_weight);
        let bias = tape.param(&store, gate.project_bias);
        let h = tape.matmul(h, w).unwrap();
        let h = tape.add_broadcast(h, bias).unwrap();
        let hidden = tape.data(h).to_vec();
        let mut emb = store.get(gate.embeddings).data().to_vec();
        let d = hidden.len();
        for (t, v) in hidden.iter().enumerate() {
            emb[d + t] = 2.5 * v;
        }
        store.set(gate.embeddings, &emb).unwrap();
        let s = gate.gate_scores(&store, &x, None).unwrap();
        assert!((s[1] - 1.0 / tau).abs() < 1e-12);
    }

    #[test]
    fn gate_gradients() {
        let mut rng = Rng::seed(2);
        let mut store = ParamStore::new();
        let cfg = GatingConfig {
            reduction_ratio: 2,
            hidden_dim: 3,
            jitter: 0.0,
        };
        let gate = GatingNetwork::new(&mut store, "g", 6, 3, &cfg, &mut rng).unwrap();
        let x = random_batch(&mut rng, 4, 6);
        let err = check_param_gradients(&store, |tape, s| {
            let xv = tape.constant(x.clone());
            let scores = gate.scores(tape, s, xv, None)?;
            tape.softmax_rows(scores, None)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn dispatch_combine_round_trip() {
        let mut rng = Rng::seed(3);
        let (batch, n, cols) = (9, 4, 5);
        let x: Vec<f64> = (0..batch * cols).map(|_| rng.normal()).collect();
        let decisions: Vec<GateDecision> = (0..batch)
            .map(|_| {
                let g: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
                top_k_gate(&g, 1 + rng.index(n)).unwrap()
            })
            .collect();
        let plan = dispatch(&decisions, n).unwrap();
        let total: usize = plan.group_sizes().iter().sum();
        assert_eq!(total, decisions.iter().map(|d| d.selected.len()).sum::<usize>());
        let groups = plan.gather(&x, cols).unwrap();
        let y = combine(&groups, &plan, &decisions, cols).unwrap();
        assert!(close(&y, &x, 1e-12));

        let one_hot: Vec<GateDecision> = (0..batch).map(|_| GateDecision::from_weights(&[1.0, 0.0, 0.0, 0.0])).collect();
        let plan = dispatch(&one_hot, n).unwrap();
        assert_eq!(plan.group_sizes(), vec![batch, 0, 0, 0]);
        let y = combine(&plan.gather(&x, cols).unwrap(), &plan, &one_hot, cols).unwrap();
        assert_eq!(y, x);

        let half = vec![GateDecision::from_weights(&[0.5, 0.5])];
        let plan = dispatch(&half, 2).unwrap();
        let y = combine(&[vec![1.0, 3.0], vec![3.0, 5.0]], &plan, &half, 2).unwrap();
        assert_eq!(y, vec![2.0, 4.0]);
        assert!(matches!(combine(&[vec![1.0]], &plan, &half, 2), Err(Error::Internal(_))));
    }

    #[test]
    fn load_losses() {
        let n = 4;
        let uniform = LoadStats {
            examples: 8,
            fraction: vec![0.25; n],
            mean_prob: vec![0.25; n],
        };
        assert!((load_balance_loss(&uniform, 0.3).unwrap() - 0.3).abs() < 1e-12);
        let collapsed = LoadStats {
            examples: 8,
            fraction: vec![1.0, 0.0, 0.0, 0.0],
            mean_prob: vec![1.0, 0.0, 0.0, 0.0],
        };
        assert!((load_balance_loss(&collapsed, 0.3).unwrap() - 0.3 * 4.0).abs() < 1e-12);

        let w = vec![0.1, 0.2, 0.3, 0.4];
        let matched = LoadStats {
            examples: 10,
            fraction: w.clone(),
            mean_prob: w.clone(),
        };
        assert!((load_distribution_loss(&matched, &w, 0.7).unwrap() - 0.7).abs() < 1e-12);
        let u = vec![0.25; n];
        assert!(
            (load_distribution_loss(&collapsed, &u, 0.3).unwrap() - load_balance_loss(&collapsed, 0.3).unwrap()).abs()
                < 1e-12
        );
        assert!(matches!(
            load_distribution_loss(&matched, &[0.5, 0.5, 0.0, 0.0], 1.0),
            Err(Error::Config(_))
        ));
        let empty = LoadStats {
            examples: 0,
            fraction: vec![],
            mean_prob: vec![],
        };
        assert!(matches!(load_balance_loss(&empty, 1.0), Err(Error::Stats(_))));

        // moving router mass toward any single expert raises the loss
        for j in 0..n {
            let mut p = w.clone();
            for (i, v) in p.iter_mut().enumerate() {
                *v = if i == j { *v + 0.05 * (1.0 - *v) } else { *v * 0.95 };
            }
            let moved = LoadStats {
                examples: 10,
                fraction: p.clone(),
                mean_prob: p,
            };
            assert!(load_distribution_loss(&moved, &w, 1.0).unwrap() > 1.0);
        }
    }

    #[test]
    fn load_stats_count_argmax() {
        let probs = [0.6, 0.3, 0.1, 0.2, 0.2, 0.6, 0.5, 0.5, 0.0];
        let s = LoadStats::from_probs(&probs, 3).unwrap();
        assert_eq!(s.examples, 3);
        assert!(close(&s.fraction, &[2.0 / 3.0, 0.0, 1.0 / 3.0], 1e-15));
        assert!(close(&s.mean_prob, &[1.3 / 3.0, 1.0 / 3.0, 0.7 / 3.0], 1e-15));

        let mut tape = Tape::new();
        let p = tape.var(Tensor::matrix(3, 3, probs.to_vec()).unwrap().with_grad(true));
        let w = [0.2, 0.3, 0.5];
        let l = load_distribution_loss_tape(&mut tape, p, &w, 0.5).unwrap();
        assert!((tape.data(l)[0] - load_distribution_loss(&s, &w, 0.5).unwrap()).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        let gp = g.wrt(p).unwrap();
        // d/dP_j = λ f_j / w_j, spread evenly over the rows
        let expect = [0.5 * (2.0 / 3.0) / 0.2 / 3.0, 0.0, 0.5 * (1.0 / 3.0) / 0.5 / 3.0];
        for row in gp.chunks_exact(3) {
            assert!(close(row, &expect, 1e-15));
        }
    }

    fn layer(store: &mut ParamStore, kinds: &[ExpertKind], k_final: usize, rng: &mut Rng) -> MoeLayer {
        let mut cfg = MoeLayerConfig::new(kinds.to_vec(), k_final);
        cfg.gating.reduction_ratio = 2;
        cfg.gating.hidden_dim = 4;
        cfg.expert_settings.dense_hidden = Some(6);
        MoeLayer::new(store, "moe", geom(), &cfg, rng).unwrap()
    }

    #[test]
    fn layer_matches_dense_loop() {
        let mut rng = Rng::seed(4);
        let mut store = ParamStore::new();
        let l = layer(&mut store, &ExpertKind::ALL, 5, &mut rng);
        let (b, fd) = (6, 12);
        let x = random_batch(&mut rng, b, fd);
        let x0 = random_batch(&mut rng, b, fd);
        let mut tape = Tape::new();
        let (xv, x0v) = (tape.constant(x.clone()), tape.constant(x0.clone()));
        let out = l.forward(&mut tape, &store, xv, x0v, 5, None).unwrap();
        assert_eq!(out.calls, vec![b; 5]);
        let got = tape.data(out.output).to_vec();
        let w = tape.data(out.weights).to_vec();

        let expert_out: Vec<Vec<f64>> = l
            .experts()
            .iter()
            .map(|e| {
                let mut t = Tape::new();
                let (a, c) = (t.constant(x.clone()), t.constant(x0.clone()));
                let y = e.forward(&mut t, &store, a, c).unwrap();
                t.data(y).to_vec()
            })
            .collect();
        for i in 0..b {
            let mut row: Vec<f64> = x.data()[i * fd..(i + 1) * fd].to_vec();
            for (j, out) in expert_out.iter().enumerate() {
                for c in 0..fd {
                    row[c] += w[i * 5 + j] * out[i * fd + c];
                }
            }
            let mean = row.iter().sum::<f64>() / fd as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fd as f64;
            let norm: Vec<f64> = row.iter().map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt()).collect();
            assert!(close(&got[i * fd..(i + 1) * fd], &norm, 1e-9));
        }
    }

    #[test]
    fn zero_experts_pass_input_through_norm() {
        let mut rng = Rng::seed(5);
        let mut store = ParamStore::new();
        let l = layer(&mut store, &[ExpertKind::PolynomialInteraction, ExpertKind::Dense], 1, &mut rng);
        for e in l.experts() {
            for id in e.params() {
                let n = store.get(id).len();
                store.set(id, &vec![0.0; n]).unwrap();
            }
        }
        let x = random_batch(&mut rng, 3, 12);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = l.forward(&mut tape, &store, xv, xv, 1, None).unwrap();
        let g = tape.constant(Tensor::ones(&[12]));
        let z = tape.constant(Tensor::zeros(&[12]));
        let expect = tape.layer_norm_rows(xv, g, z, LAYER_NORM_EPS).unwrap();
        assert_eq!(tape.data(out.output), tape.data(expect));
    }

    #[test]
    fn sparse_routing_evaluates_only_selected_experts() {
        let mut rng = Rng::seed(6);
        let mut store = ParamStore::new();
        let l = layer(&mut store, &ExpertKind::ALL, 2, &mut rng);
        let x = random_batch(&mut rng, 10, 12);
        for k in 1..=5 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = l.forward(&mut tape, &store, xv, xv, k, Some(&mut rng)).unwrap();
            let mut expected = vec![0; 5];
            for d in &out.decisions {
                assert!(d.selected.len() <= k);
                assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for &j in &d.selected {
                    expected[j] += 1;
                }
            }
            assert_eq!(out.calls, expected);
        }
    }

    #[test]
    fn layer_gradients() {
        let mut rng = Rng::seed(7);
        let mut store = ParamStore::new();
        let l = layer(&mut store, &[ExpertKind::Cross, ExpertKind::PolynomialInteraction, ExpertKind::Dense], 2, &mut rng);
        let x = random_batch(&mut rng, 3, 12);
        let x0 = random_batch(&mut rng, 3, 12);
        let err = check_param_gradients(&store, |tape, s| {
            let (a, b) = (tape.constant(x.clone()), tape.constant(x0.clone()));
            Ok(l.forward(tape, s, a, b, 2, None)?.output)
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn dense_flag_matches_full_k() {
        let mut rng = Rng::seed(8);
        let mut store = ParamStore::new();
        let kinds = [ExpertKind::Cross, ExpertKind::PolynomialInteraction, ExpertKind::Dense];
        let sparse = layer(&mut store, &kinds, 3, &mut rng);
        let mut cfg = sparse.config().clone();
        cfg.dense_moe = true;
        let mut store2 = ParamStore::new();
        let dense = MoeLayer::new(&mut store2, "moe", geom(), &cfg, &mut Rng::seed(8)).unwrap();
        for (id, p) in store.iter() {
            let other = store2.find(&p.name).unwrap();
            store2.set(other, store.get(id).data()).unwrap();
        }
        let x = random_batch(&mut rng, 5, 12);
        let run = |l: &MoeLayer, s: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = l.forward(&mut tape, s, xv, xv, 3, None).unwrap();
            tape.data(out.output).to_vec()
        };
        assert!(close(&run(&sparse, &store), &run(&dense, &store2), 1e-12));
    }

    #[test]
    fn config_validation() {
        let g = geom();
        let mut cfg = MoeLayerConfig::new(vec![ExpertKind::Dense, ExpertKind::Dense], 1);
        assert!(matches!(cfg.validate(g), Err(Error::Config(_))));
        cfg.experts = vec![ExpertKind::Dense, ExpertKind::Cross];
        cfg.k_final = 3;
        assert!(cfg.validate(g).is_err());
        cfg.k_final = 2;
        cfg.target_loads = Some(vec![0.3, 0.3]);
        assert!(cfg.validate(g).is_err());
        cfg.target_loads = Some(vec![0.3, 0.7]);
        assert!(cfg.validate(g).is_ok());
    }
}
