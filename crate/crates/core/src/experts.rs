//! Feature-interaction experts.
//!
//! Every expert maps a batch of flattened feature maps `[B, F·D]` to the same
//! shape. The second input `x0` is the raw embedded map, used by the
//! polynomial and cross experts. Parameters live in a [`ParamStore`]; an
//! expert only holds their ids, so it is cheap to share and trivially
//! read-only during a forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Partition, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Dense,
    Conv,
    #[serde(rename = "attention")]
    MultiHeadSelfAttention,
    #[serde(rename = "pin")]
    PolynomialInteraction,
    Cross,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 5] = [
        ExpertKind::Dense,
        ExpertKind::Conv,
        ExpertKind::MultiHeadSelfAttention,
        ExpertKind::PolynomialInteraction,
        ExpertKind::Cross,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ExpertKind::Dense => "dense",
            ExpertKind::Conv => "conv",
            ExpertKind::MultiHeadSelfAttention => "attention",
            ExpertKind::PolynomialInteraction => "pin",
            ExpertKind::Cross => "cross",
        }
    }
}

impl std::fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Number of fields and embedding width of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldGeometry {
    pub fields: usize,
    pub dim: usize,
}

impl FieldGeometry {
    pub fn new(fields: usize, dim: usize) -> Result<Self> {
        if fields == 0 || dim == 0 {
            return Err(Error::Config(format!("feature map {fields}×{dim} must be non-empty")));
        }
        Ok(FieldGeometry { fields, dim })
    }

    pub fn flat(self) -> usize {
        self.fields * self.dim
    }
}

/// Size knobs shared by all experts of a layer. `None` picks the default
/// derived from the geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSettings {
    pub dense_hidden: Option<usize>,
    pub conv_kernel: usize,
    pub conv_channels: Option<usize>,
    pub attention_heads: usize,
}

impl Default for ExpertSettings {
    fn default() -> Self {
        ExpertSettings {
            dense_hidden: None,
            conv_kernel: 3,
            conv_channels: None,
            attention_heads: 2,
        }
    }
}

impl ExpertSettings {
    pub fn dense_hidden(&self, geom: FieldGeometry) -> usize {
        self.dense_hidden.unwrap_or(4 * geom.flat())
    }

    pub fn conv_channels(&self, geom: FieldGeometry) -> usize {
        self.conv_channels.unwrap_or(geom.dim)
    }

    /// Rejects settings that cannot be built for `kind` at `geom`.
    pub fn validate(&self, kind: ExpertKind, geom: FieldGeometry) -> Result<()> {
        match kind {
            ExpertKind::Dense if self.dense_hidden(geom) == 0 => {
                Err(Error::Config("dense hidden width must be positive".into()))
            }
            ExpertKind::Conv => {
                if self.conv_kernel == 0 || self.conv_channels(geom) == 0 {
                    Err(Error::Config("conv kernel width and channels must be positive".into()))
                } else if geom.fields < self.conv_kernel {
                    Err(Error::Config(format!(
                        "conv kernel width {} exceeds field count {}",
                        self.conv_kernel, geom.fields
                    )))
                } else {
                    Ok(())
                }
            }
            ExpertKind::MultiHeadSelfAttention => {
                if self.attention_heads == 0 || !geom.dim.is_multiple_of(self.attention_heads) {
                    Err(Error::Config(format!(
                        "embedding dim {} not divisible by {} heads",
                        geom.dim, self.attention_heads
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Per-example multiply-adds of one expert forward pass. Activations, pooling
/// and softmax are not counted.
///
/// | kind      | count                                   |
/// |-----------|-----------------------------------------|
/// | dense     | `FD·H + H·FD`                           |
/// | conv      | `F·(w·D)·C + ceil(F/2)·C·FD`            |
/// | attention | `3·F·D² + 2·F²·D + F·D² + (FD)²`        |
/// | pin       | `F·F·D + F·D`                           |
/// | cross     | `F·F·D + F·D`                           |
pub fn expert_flops(kind: ExpertKind, geom: FieldGeometry, settings: &ExpertSettings) -> u64 {
    let (f, d, fd) = (geom.fields as u64, geom.dim as u64, geom.flat() as u64);
    match kind {
        ExpertKind::Dense => 2 * fd * settings.dense_hidden(geom) as u64,
        ExpertKind::Conv => {
            let (w, c) = (settings.conv_kernel as u64, settings.conv_channels(geom) as u64);
            f * w * d * c + f.div_ceil(2) * c * fd
        }
        ExpertKind::MultiHeadSelfAttention => 3 * f * d * d + 2 * f * f * d + f * d * d + fd * fd,
        ExpertKind::PolynomialInteraction | ExpertKind::Cross => f * f * d + f * d,
    }
}

/// One feature-interaction expert.
pub trait InteractionExpert: std::fmt::Debug + Send + Sync {
    fn kind(&self) -> ExpertKind;

    /// `x`, `x0`: `[B, F·D]`; returns `[B, F·D]`.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, x0: Var) -> Result<Var>;

    fn flops(&self) -> u64;

    fn params(&self) -> Vec<ParamId>;
}

fn check_input(tape: &Tape, geom: FieldGeometry, x: Var, x0: Var) -> Result<usize> {
    let (rows, cols) = tape.value(x).as_matrix_dims();
    if cols != geom.flat() || tape.shape(x0) != tape.shape(x) {
        return Err(Error::shape("expert input", tape.shape(x), tape.shape(x0)));
    }
    Ok(rows)
}

fn weight(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
    store.add(name, Tensor::glorot(&[rows, cols], rows, cols, rng), Partition::Weights)
}

/// Flatten, hidden layer with relu, project back.
#[derive(Clone, Debug)]
pub struct DenseExpert {
    geom: FieldGeometry,
    settings: ExpertSettings,
    pub hidden_weight: ParamId,
    pub output_weight: ParamId,
}

impl DenseExpert {
    pub fn new(store: &mut ParamStore, prefix: &str, geom: FieldGeometry, settings: &ExpertSettings, rng: &mut Rng) -> Result<Self> {
        settings.validate(ExpertKind::Dense, geom)?;
        let h = settings.dense_hidden(geom);
        Ok(DenseExpert {
            geom,
            settings: settings.clone(),
            hidden_weight: weight(store, format!("{prefix}.w1"), geom.flat(), h, rng),
            output_weight: weight(store, format!("{prefix}.w2"), h, geom.flat(), rng),
        })
    }
}

impl InteractionExpert for DenseExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Dense
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, x0: Var) -> Result<Var> {
        check_input(tape, self.geom, x, x0)?;
        let w1 = tape.param(store, self.hidden_weight);
        let w2 = tape.param(store, self.output_weight);
        let h = tape.matmul(x, w1)?;
        let h = tape.relu(h);
        tape.matmul(h, w2)
    }

    fn flops(&self) -> u64 {
        expert_flops(ExpertKind::Dense, self.geom, &self.settings)
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.hidden_weight, self.output_weight]
    }
}

/// Fields as a sequence, embedding as channels: same-padded 1-D convolution,
/// relu, max-pool (2, 2), dense projection back to `F·D`.
#[derive(Clone, Debug)]
pub struct ConvExpert {
    geom: FieldGeometry,
    settings: ExpertSettings,
    /// `[w·D, C]`, row `o·D + c` is tap `o`, input channel `c`.
    pub kernel: ParamId,
    /// `[ceil(F/2)·C, F·D]`.
    pub projection: ParamId,
}

impl ConvExpert {
    pub fn new(store: &mut ParamStore, prefix: &str, geom: FieldGeometry, settings: &ExpertSettings, rng: &mut Rng) -> Result<Self> {
        settings.validate(ExpertKind::Conv, geom)?;
        let (w, c) = (settings.conv_kernel, settings.conv_channels(geom));
        let pooled = geom.fields.div_ceil(2) * c;
        Ok(ConvExpert {
            geom,
            settings: settings.clone(),
            kernel: weight(store, format!("{prefix}.kernel"), w * geom.dim, c, rng),
            projection: weight(store, format!("{prefix}.projection"), pooled, geom.flat(), rng),
        })
    }
}

impl InteractionExpert for ConvExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Conv
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, x0: Var) -> Result<Var> {
        let batch = check_input(tape, self.geom, x, x0)?;
        let FieldGeometry { fields, dim } = self.geom;
        let c = self.settings.conv_channels(self.geom);
        let seq = tape.reshape(x, &[batch * fields, dim])?;
        let patches = tape.conv_patches(seq, batch, fields, self.settings.conv_kernel)?;
        let kernel = tape.param(store, self.kernel);
        let conv = tape.matmul(patches, kernel)?;
        let conv = tape.relu(conv);
        let pooled = tape.max_pool_seq(conv, batch, fields)?;
        let flat = tape.reshape(pooled, &[batch, fields.div_ceil(2) * c])?;
        let proj = tape.param(store, self.projection);
        tape.matmul(flat, proj)
    }

    fn flops(&self) -> u64 {
        expert_flops(ExpertKind::Conv, self.geom, &self.settings)
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.kernel, self.projection]
    }
}

/// Multi-head scaled dot-product self-attention over the `F` field tokens,
/// followed by a dense projection of the flattened result.
#[derive(Clone, Debug)]
pub struct AttentionExpert {
    geom: FieldGeometry,
    settings: ExpertSettings,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// Per-token `[D, D]` mixing of the concatenated heads.
    pub head_output: ParamId,
    /// `[F·D, F·D]`.
    pub projection: ParamId,
}

/// Forward result with the per-head attention matrices, each `[B·F, F]`.
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl AttentionExpert {
    pub fn new(store: &mut ParamStore, prefix: &str, geom: FieldGeometry, settings: &ExpertSettings, rng: &mut Rng) -> Result<Self> {
        settings.validate(ExpertKind::MultiHeadSelfAttention, geom)?;
        let d = geom.dim;
        Ok(AttentionExpert {
            geom,
            settings: settings.clone(),
            query: weight(store, format!("{prefix}.query"), d, d, rng),
            key: weight(store, format!("{prefix}.key"), d, d, rng),
            value: weight(store, format!("{prefix}.value"), d, d, rng),
            head_output: weight(store, format!("{prefix}.head_output"), d, d, rng),
            projection: weight(store, format!("{prefix}.projection"), geom.flat(), geom.flat(), rng),
        })
    }

    pub fn heads(&self) -> usize {
        self.settings.attention_heads
    }

    pub fn forward_traced(&self, tape: &mut Tape, store: &ParamStore, x: Var, x0: Var) -> Result<AttentionTrace> {
        let batch = check_input(tape, self.geom, x, x0)?;
        let FieldGeometry { fields, dim } = self.geom;
        let heads = self.heads();
        let head_dim = dim / heads;
        let tokens = tape.reshape(x, &[batch * fields, dim])?;
        let project = |tape: &mut Tape, id: ParamId| -> Result<Var> {
            let w = tape.param(store, id);
            tape.matmul(tokens, w)
        };
        let q = project(tape, self.query)?;
        let k = project(tape, self.key)?;
        let v = project(tape, self.value)?;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut weights = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let split = |tape: &mut Tape, m: Var| -> Result<Var> {
                let s = tape.slice_cols(m, h * head_dim, head_dim)?;
                tape.reshape(s, &[batch, fields, head_dim])
            };
            let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let scores = tape.bmm(qh, kh, true)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.reshape(scores, &[batch * fields, fields])?;
            let attn = tape.softmax_rows(scores, None)?;
            weights.push(attn);
            let attn = tape.reshape(attn, &[batch, fields, fields])?;
            let ctx = tape.bmm(attn, vh, false)?;
            outs.push(tape.reshape(ctx, &[batch * fields, head_dim])?);
        }
        let heads_cat = tape.concat_cols(&outs)?;
        let wo = tape.param(store, self.head_output);
        let mixed = tape.matmul(heads_cat, wo)?;
        let flat = tape.reshape(mixed, &[batch, fields * dim])?;
        let proj = tape.param(store, self.projection);
        let output = tape.matmul(flat, proj)?;
        Ok(AttentionTrace { output, weights })
    }
}

impl InteractionExpert for AttentionExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::MultiHeadSelfAttention
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, x0: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, store, x, x0)?.output)
    }

    fn flops(&self) -> u64 {
        expert_flops(ExpertKind::MultiHeadSelfAttention, self.geom, &self.settings)
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.query, self.key, self.value, self.head_output, self.projection]
    }
}

/// `x ∘ (W · x0)` with `W` of shape `[F, F]`; no internal residual.
#[derive(Clone, Debug)]
pub struct PolynomialExpert {
    geom: FieldGeometry,
    settings: ExpertSettings,
    pub field_weight: ParamId,
}

impl PolynomialExpert {
    pub fn new(store: &mut ParamStore, prefix: &str, geom: FieldGeometry, settings: &ExpertSettings, rng: &mut Rng) -> Result<Self> {
        let f = geom.fields;
        Ok(PolynomialExpert {
            geom,
            settings: settings.clone(),
            field_weight: weight(store, format!("{prefix}.w"), f, f, rng),
        })
    }
}

impl InteractionExpert for PolynomialExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::PolynomialInteraction
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, x0: Var) -> Result<Var> {
        check_input(tape, self.geom, x, x0)?;
        let w = tape.param(store, self.field_weight);
        let mixed = tape.shared_left_matmul(w, x0, self.geom.dim)?;
        tape.hadamard(x, mixed)
    }

    fn flops(&self) -> u64 {
        expert_flops(ExpertKind::PolynomialInteraction, self.geom, &self.settings)
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.field_weight]
    }
}

/// `x0 ∘ (W · x) + b` with `W` of shape `[F, F]` and a full `F×D` bias.
#[derive(Clone, Debug)]
pub struct CrossExpert {
    geom: FieldGeometry,
    settings: ExpertSettings,
    pub field_weight: ParamId,
    pub bias: ParamId,
}

impl CrossExpert {
    pub fn new(store: &mut ParamStore, prefix: &str, geom: FieldGeometry, settings: &ExpertSettings, rng: &mut Rng) -> Result<Self> {
        let f = geom.fields;
        Ok(CrossExpert {
            geom,
            settings: settings.clone(),
            field_weight: weight(store, format!("{prefix}.w"), f, f, rng),
            bias: store.add(format!("{prefix}.b"), Tensor::zeros(&[geom.flat()]), Partition::Weights),
        })
    }
}

impl InteractionExpert for CrossExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Cross
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, x0: Var) -> Result<Var> {
        check_input(tape, self.geom, x, x0)?;
        let w = tape.param(store, self.field_weight);
        let mixed = tape.shared_left_matmul(w, x, self.geom.dim)?;
        let prod = tape.hadamard(x0, mixed)?;
        let b = tape.param(store, self.bias);
        tape.add_broadcast(prod, b)
    }

    fn flops(&self) -> u64 {
        expert_flops(ExpertKind::Cross, self.geom, &self.settings)
    }

    fn params(&self) -> Vec<ParamId> {
        vec![self.field_weight, self.bias]
    }
}

/// Builds one expert of `kind`, registering its parameters under `prefix`.
pub fn build_expert(
    kind: ExpertKind,
    store: &mut ParamStore,
    prefix: &str,
    geom: FieldGeometry,
    settings: &ExpertSettings,
    rng: &mut Rng,
) -> Result<Box<dyn InteractionExpert>> {
    let prefix = format!("{prefix}.{}", kind.short_name());
    Ok(match kind {
        ExpertKind::Dense => Box::new(DenseExpert::new(store, &prefix, geom, settings, rng)?),
        ExpertKind::Conv => Box::new(ConvExpert::new(store, &prefix, geom, settings, rng)?),
        ExpertKind::MultiHeadSelfAttention => Box::new(AttentionExpert::new(store, &prefix, geom, settings, rng)?),
        ExpertKind::PolynomialInteraction => Box::new(PolynomialExpert::new(store, &prefix, geom, settings, rng)?),
        ExpertKind::Cross => Box::new(CrossExpert::new(store, &prefix, geom, settings, rng)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, check_param_gradients};

    fn geom(f: usize, d: usize) -> FieldGeometry {
        FieldGeometry::new(f, d).unwrap()
    }

    fn random(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    fn run(expert: &dyn InteractionExpert, store: &ParamStore, x: &[f64], x0: &[f64], batch: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let cols = x.len() / batch;
        let xv = tape.constant(Tensor::matrix(batch, cols, x.to_vec()).unwrap());
        let x0v = tape.constant(Tensor::matrix(batch, cols, x0.to_vec()).unwrap());
        let y = expert.forward(&mut tape, store, xv, x0v).unwrap();
        assert_eq!(tape.shape(y), &[batch, cols]);
        tape.data(y).to_vec()
    }

    fn zero_all(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            let n = store.get(id).len();
            store.set(id, &vec![0.0; n]).unwrap();
        }
    }

    /// Row-major `[rows, cols]` times `[cols, out]`.
    fn mm(a: &[f64], b: &[f64], rows: usize, cols: usize, out: usize) -> Vec<f64> {
        let mut r = vec![0.0; rows * out];
        for i in 0..rows {
            for j in 0..out {
                r[i * out + j] = (0..cols).map(|p| a[i * cols + p] * b[p * out + j]).sum();
            }
        }
        r
    }

    #[test]
    fn all_kinds_zero_weights_give_zero_and_preserve_shape() {
        let g = geom(4, 4);
        let settings = ExpertSettings::default();
        let mut rng = Rng::seed(3);
        let x = random(&mut rng, 3 * 16);
        let x0 = random(&mut rng, 3 * 16);
        for kind in ExpertKind::ALL {
            let mut store = ParamStore::new();
            let e = build_expert(kind, &mut store, "t", g, &settings, &mut rng).unwrap();
            assert_eq!(e.kind(), kind);
            let y = run(e.as_ref(), &store, &x, &x0, 3);
            assert!(y.iter().all(|v| v.is_finite()));
            zero_all(&mut store, &e.params());
            let y = run(e.as_ref(), &store, &x, &x0, 3);
            assert!(y.iter().all(|&v| v == 0.0), "{kind}");
        }
    }

    #[test]
    fn dense_hand_example() {
        let g = geom(2, 2);
        let settings = ExpertSettings {
            dense_hidden: Some(2),
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let e = DenseExpert::new(&mut store, "d", g, &settings, &mut Rng::seed(0)).unwrap();
        // W1 columns [1, 1, 0, 0] and [0, 0, -1, 2]: x = [1, 2, -1, 0.5] gives h = [3, 2]
        store.set(e.hidden_weight, &[1., 0., 1., 0., 0., -1., 0., 2.]).unwrap();
        // W2 rows: h1 -> [1, 0, 0, 1], h2 -> [0, 1, -1, 0]
        store.set(e.output_weight, &[1., 0., 0., 1., 0., 1., -1., 0.]).unwrap();
        let y = run(&e, &store, &[1., 2., -1., 0.5], &[0.0; 4], 1);
        assert_eq!(y, vec![3., 2., -2., 3.]);

        // a negative pre-activation is cut by relu
        let y = run(&e, &store, &[-1., 0., 0., 0.], &[0.0; 4], 1);
        assert_eq!(y, vec![0.0; 4]);
    }

    #[test]
    fn dense_matches_matrix_oracle() {
        let g = geom(3, 2);
        let settings = ExpertSettings {
            dense_hidden: Some(5),
            ..Default::default()
        };
        let mut rng = Rng::seed(11);
        let mut store = ParamStore::new();
        let e = DenseExpert::new(&mut store, "d", g, &settings, &mut rng).unwrap();
        let x = random(&mut rng, 2 * 6);
        let y = run(&e, &store, &x, &x, 2);
        let h: Vec<f64> = mm(&x, store.get(e.hidden_weight).data(), 2, 6, 5).into_iter().map(|v| v.max(0.0)).collect();
        let expect = mm(&h, store.get(e.output_weight).data(), 2, 5, 6);
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Sliding-window convolution, pooling and projection written out
    /// directly on `[F][D]` arrays.
    fn conv_oracle(x: &[f64], f: usize, d: usize, w: usize, c: usize, kernel: &[f64], proj: &[f64]) -> Vec<f64> {
        let pad = (w - 1) / 2;
        let mut conv = vec![vec![0.0; c]; f];
        for (t, row) in conv.iter_mut().enumerate() {
            for (oc, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for o in 0..w {
                    let src = t as isize + o as isize - pad as isize;
                    if src < 0 || src >= f as isize {
                        continue;
                    }
                    for ic in 0..d {
                        acc += x[src as usize * d + ic] * kernel[(o * d + ic) * c + oc];
                    }
                }
                *out = acc.max(0.0);
            }
        }
        let mut pooled = Vec::new();
        for p in 0..f.div_ceil(2) {
            for oc in 0..c {
                let a = conv[2 * p][oc];
                let b = if 2 * p + 1 < f { conv[2 * p + 1][oc] } else { f64::NEG_INFINITY };
                pooled.push(a.max(b));
            }
        }
        mm(&pooled, proj, 1, pooled.len(), f * d)
    }

    #[test]
    fn conv_matches_direct_convolution() {
        for &(f, d, w, c) in &[(4, 2, 2, 2), (5, 3, 3, 2), (4, 2, 1, 3)] {
            let g = geom(f, d);
            let settings = ExpertSettings {
                conv_kernel: w,
                conv_channels: Some(c),
                ..Default::default()
            };
            let mut rng = Rng::seed(f as u64 * 31 + w as u64);
            let mut store = ParamStore::new();
            let e = ConvExpert::new(&mut store, "c", g, &settings, &mut rng).unwrap();
            let x = random(&mut rng, f * d);
            let y = run(&e, &store, &x, &x, 1);
            let expect = conv_oracle(&x, f, d, w, c, store.get(e.kernel).data(), store.get(e.projection).data());
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{f} {d} {w} {c}: {y:?} vs {expect:?}");
            }
        }
    }

    #[test]
    fn conv_single_field() {
        let g = geom(1, 2);
        let settings = ExpertSettings {
            conv_kernel: 1,
            conv_channels: Some(2),
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let e = ConvExpert::new(&mut store, "c", g, &settings, &mut Rng::seed(0)).unwrap();
        store.set(e.kernel, &[1., 0., 0., 1.]).unwrap();
        store.set(e.projection, &[1., 0., 0., 1.]).unwrap();
        assert_eq!(run(&e, &store, &[0.7, 0.2], &[0.0; 2], 1), vec![0.7, 0.2]);
    }

    #[test]
    fn conv_rejects_wide_kernel() {
        let settings = ExpertSettings {
            conv_kernel: 5,
            ..Default::default()
        };
        let err = ConvExpert::new(&mut ParamStore::new(), "c", geom(4, 2), &settings, &mut Rng::seed(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    /// Brute-force per-head softmax(QKᵀ/√d)V on one example.
    fn attention_oracle(x: &[f64], f: usize, d: usize, heads: usize, store: &ParamStore, e: &AttentionExpert) -> Vec<f64> {
        let q = mm(x, store.get(e.query).data(), f, d, d);
        let k = mm(x, store.get(e.key).data(), f, d, d);
        let v = mm(x, store.get(e.value).data(), f, d, d);
        let dh = d / heads;
        let mut cat = vec![0.0; f * d];
        for h in 0..heads {
            for i in 0..f {
                let scores: Vec<f64> = (0..f)
                    .map(|j| (0..dh).map(|t| q[i * d + h * dh + t] * k[j * d + h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for t in 0..dh {
                    cat[i * d + h * dh + t] = (0..f).map(|j| (scores[j] - m).exp() / z * v[j * d + h * dh + t]).sum();
                }
            }
        }
        let mixed = mm(&cat, store.get(e.head_output).data(), f, d, d);
        mm(&mixed, store.get(e.projection).data(), 1, f * d, f * d)
    }

    #[test]
    fn attention_matches_brute_force() {
        let (f, d, heads) = (3, 4, 2);
        let mut rng = Rng::seed(21);
        let mut store = ParamStore::new();
        let e = AttentionExpert::new(&mut store, "a", geom(f, d), &ExpertSettings::default(), &mut rng).unwrap();
        let x = random(&mut rng, 2 * f * d);
        let y = run(&e, &store, &x, &x, 2);
        for b in 0..2 {
            let expect = attention_oracle(&x[b * f * d..(b + 1) * f * d], f, d, heads, &store, &e);
            for (a, o) in y[b * f * d..(b + 1) * f * d].iter().zip(&expect) {
                assert!((a - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_degenerate_weights() {
        let mut rng = Rng::seed(4);
        let mut store = ParamStore::new();
        let e = AttentionExpert::new(&mut store, "a", geom(1, 4), &ExpertSettings::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 4, random(&mut rng, 4)).unwrap());
        let trace = e.forward_traced(&mut tape, &store, x, x).unwrap();
        for w in &trace.weights {
            assert_eq!(tape.data(*w), &[1.0]);
        }

        let f = 5;
        let mut store = ParamStore::new();
        let e = AttentionExpert::new(&mut store, "a", geom(f, 4), &ExpertSettings::default(), &mut rng).unwrap();
        let token = random(&mut rng, 4);
        let same: Vec<f64> = (0..f).flat_map(|_| token.clone()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, f * 4, same).unwrap());
        let trace = e.forward_traced(&mut tape, &store, x, x).unwrap();
        for w in &trace.weights {
            assert!(tape.data(*w).iter().all(|&a| (a - 1.0 / f as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let settings = ExpertSettings {
            attention_heads: 3,
            ..Default::default()
        };
        let err = AttentionExpert::new(&mut ParamStore::new(), "a", geom(3, 4), &settings, &mut Rng::seed(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    fn identity(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn pin_and_cross_kernels() {
        let (f, d) = (3, 2);
        let g = geom(f, d);
        let mut rng = Rng::seed(8);
        let x = random(&mut rng, f * d);
        let x0 = random(&mut rng, f * d);
        let prod: Vec<f64> = x.iter().zip(&x0).map(|(a, b)| a * b).collect();

        let mut store = ParamStore::new();
        let pin = PolynomialExpert::new(&mut store, "p", g, &ExpertSettings::default(), &mut rng).unwrap();
        let cross = CrossExpert::new(&mut store, "x", g, &ExpertSettings::default(), &mut rng).unwrap();

        // random kernel against matmul-then-hadamard
        let wp = store.get(pin.field_weight).data().to_vec();
        let expect: Vec<f64> = mm(&wp, &x0, f, f, d).iter().zip(&x).map(|(m, a)| m * a).collect();
        let got = run(&pin, &store, &x, &x0, 1);
        assert!(got.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));

        let wc = store.get(cross.field_weight).data().to_vec();
        let bias = random(&mut rng, f * d);
        store.set(cross.bias, &bias).unwrap();
        let expect: Vec<f64> = mm(&wc, &x, f, f, d)
            .iter()
            .zip(&x0)
            .zip(&bias)
            .map(|((m, a), b)| m * a + b)
            .collect();
        let got = run(&cross, &store, &x, &x0, 1);
        assert!(got.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));

        // zero kernel: PIN vanishes, cross leaves the bias
        store.set(pin.field_weight, &vec![0.0; f * f]).unwrap();
        store.set(cross.field_weight, &vec![0.0; f * f]).unwrap();
        assert_eq!(run(&pin, &store, &x, &x0, 1), vec![0.0; f * d]);
        assert_eq!(run(&cross, &store, &x, &x0, 1), bias);

        // identity kernel with zero bias: both give x ∘ x0
        store.set(pin.field_weight, &identity(f)).unwrap();
        store.set(cross.field_weight, &identity(f)).unwrap();
        store.set(cross.bias, &vec![0.0; f * d]).unwrap();
        assert_eq!(run(&pin, &store, &x, &x0, 1), prod);
        assert_eq!(run(&cross, &store, &x, &x0, 1), prod);
    }

    #[test]
    fn expert_gradients_match_finite_differences() {
        let g = geom(3, 2);
        let settings = ExpertSettings {
            dense_hidden: Some(4),
            conv_kernel: 2,
            attention_heads: 2,
            ..Default::default()
        };
        let mut rng = Rng::seed(13);
        let x = Tensor::matrix(2, 6, random(&mut rng, 12)).unwrap();
        let x0 = Tensor::matrix(2, 6, random(&mut rng, 12)).unwrap();
        for kind in ExpertKind::ALL {
            let mut store = ParamStore::new();
            let e = build_expert(kind, &mut store, "g", g, &settings, &mut rng).unwrap();
            if kind == ExpertKind::Cross {
                store.set(e.params()[1], &random(&mut rng, 6)).unwrap();
            }
            let wrt_params = check_param_gradients(&store, |tape, s| {
                let xv = tape.constant(x.clone());
                let x0v = tape.constant(x0.clone());
                e.forward(tape, s, xv, x0v)
            })
            .unwrap();
            assert!(wrt_params < 1e-3, "{kind} params: {wrt_params}");
            let wrt_inputs =
                check_gradients(&[x.clone(), x0.clone()], |tape, v| e.forward(tape, &store, v[0], v[1])).unwrap();
            assert!(wrt_inputs < 1e-3, "{kind} inputs: {wrt_inputs}");
        }
    }

    #[test]
    fn flops_formulas() {
        let settings = ExpertSettings {
            dense_hidden: Some(2),
            ..Default::default()
        };
        // FD·H + H·FD with FD = 4, H = 2
        assert_eq!(expert_flops(ExpertKind::Dense, geom(2, 2), &settings), 4 * 2 + 2 * 4);
        for (f, d) in [(3, 2), (6, 4), (1, 1)] {
            let s = ExpertSettings::default();
            let pin = expert_flops(ExpertKind::PolynomialInteraction, geom(f, d), &s);
            assert_eq!(pin, (f * f * d + f * d) as u64);
            assert_eq!(expert_flops(ExpertKind::PolynomialInteraction, geom(f, 2 * d), &s), 2 * pin);
            assert_eq!(expert_flops(ExpertKind::Cross, geom(f, d), &s), pin);
        }
        // conv F=4, D=2, w=3, C=2: 4·6·2 + 2·2·8
        let s = ExpertSettings {
            conv_kernel: 3,
            conv_channels: Some(2),
            ..Default::default()
        };
        assert_eq!(expert_flops(ExpertKind::Conv, geom(4, 2), &s), 48 + 32);
        // attention F=3, D=4: QKV 3·3·16, scores+context 2·9·4, head mix 3·16, projection 144
        assert_eq!(
            expert_flops(ExpertKind::MultiHeadSelfAttention, geom(3, 4), &ExpertSettings::default()),
            144 + 72 + 48 + 144
        );
    }
}
