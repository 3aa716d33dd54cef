//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and enough saved state to run the backward rule. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] walks it once in reverse.
//!
//! Matrices are row-major. Ops that work "per row" (softmax, normalization,
//! gather/scatter) treat the last axis as the column axis.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Recip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    SharedLeft {
        w: usize,
        x: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Hadamard {
        a: usize,
        b: usize,
    },
    AddBroadcast {
        x: usize,
        b: usize,
    },
    ScaleRows {
        x: usize,
        s: usize,
        cols: usize,
    },
    MulScalar {
        x: usize,
        s: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Identity {
        x: usize,
    },
    Unary {
        x: usize,
        f: Unary,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    L2Normalize {
        x: usize,
        cols: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: usize,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    ScatterRows {
        x: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    ConvPatches {
        x: usize,
        batch: usize,
        len: usize,
        ch: usize,
        width: usize,
        pad: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    SumAll {
        x: usize,
    },
    MeanRows {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Bce {
        p: usize,
        labels: Vec<f64>,
        active: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound parameter reached by the backward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

pub const LOGLOSS_CLAMP: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad()`.
    pub fn var(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    /// Binds a stored parameter as a gradient-tracked leaf, once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id).clone().with_grad(true);
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn cols_of(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.as_matrix_dims()
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        self.bmm_raw(a, b, 1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]])
    }

    /// Batched product over a leading axis: `a[B,m,k] · b[B,k,n]`, or
    /// `a[B,m,k] · b[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let n = if trans_b { sb[1] } else { sb[2] };
        self.bmm_raw(a, b, sa[0], sa[1], sa[2], n, trans_b, vec![sa[0], sa[1], n])
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_raw(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let ab = &ad[t * m * k..(t + 1) * m * k];
            let bb = &bd[t * k * n..(t + 1) * k * n];
            let ob = &mut out[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                let orow = &mut ob[i * n..(i + 1) * n];
                if trans_b {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o = dot(&ab[i * k..(i + 1) * k], &bb[j * k..(j + 1) * k]);
                    }
                } else {
                    for p in 0..k {
                        let av = ab[i * k + p];
                        if av != 0.0 {
                            axpy(av, &bb[p * n..(p + 1) * n], orow);
                        }
                    }
                }
            }
        }
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Bmm {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            needs,
        ))
    }

    /// Left-multiplies every example matrix by one shared matrix:
    /// `x` is `[B, k·n]` (row-major `k×n` per row), `w` is `[m, k]`,
    /// result is `[B, m·n]`.
    pub fn shared_left_matmul(&mut self, w: Var, x: Var, n: usize) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let (batch, width) = self.cols_of(x);
        if sw.len() != 2 || n == 0 || width != sw[1] * n {
            return Err(Error::shape("shared_left_matmul", &sw, self.shape(x)));
        }
        let (m, k) = (sw[0], sw[1]);
        let wd = self.data(w);
        let xd = self.data(x);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let xb = &xd[t * k * n..(t + 1) * k * n];
            let ob = &mut out[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    axpy(wd[i * k + p], &xb[p * n..(p + 1) * n], &mut ob[i * n..(i + 1) * n]);
                }
            }
        }
        let needs = self.needs(&[w.0, x.0]);
        Ok(self.push(
            Tensor::new(&[batch, m * n], out)?,
            Op::SharedLeft {
                w: w.0,
                x: x.0,
                batch,
                m,
                k,
                n,
            },
            needs,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Rank(format!("transpose expects a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xd[i * cols + j];
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::new(&[cols, rows], out)?, Op::Transpose { x: x.0, rows, cols }, needs))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add { a: a.0, b: b.0 }, needs))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Hadamard { a: a.0, b: b.0 }, needs))
    }

    /// `x + b` with `b` tiled over `x` (`b.len()` must divide `x.len()`).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (lx, lb) = (self.value(x).len(), self.value(b).len());
        if lx % lb != 0 {
            return Err(Error::shape("add_broadcast", self.shape(x), self.shape(b)));
        }
        let bd = self.data(b);
        let out: Vec<f64> = self.data(x).iter().enumerate().map(|(i, v)| v + bd[i % lb]).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0, b.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBroadcast { x: x.0, b: b.0 }, needs))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.cols_of(x);
        if self.value(s).len() != rows {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let sd = self.data(s);
        let out: Vec<f64> = self.data(x).iter().enumerate().map(|(i, v)| v * sd[i / cols]).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0, s.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ScaleRows { x: x.0, s: s.0, cols }, needs))
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0, s.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MulScalar { x: x.0, s: s.0 }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        let needs = self.needs(&[x.0]);
        self.push(t, Op::Scale { x: x.0, c }, needs)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        let needs = self.needs(&[x.0]);
        self.push(t, Op::Identity { x: x.0 }, needs)
    }

    pub fn unary(&mut self, f: Unary, x: Var) -> Result<Var> {
        let xd = self.data(x);
        if f == Unary::Log {
            if let Some(v) = xd.iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("non-positive input {v}"),
                });
            }
        }
        let out: Vec<f64> = xd.iter().map(|&v| apply_unary(f, v)).collect();
        let t = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::Unary { x: x.0, f }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x).expect("softplus is total")
    }

    // ---- row-wise -------------------------------------------------------

    /// Softmax over the last axis. Masked (`false`) entries output exactly 0.
    /// `mask`, when given, has one flag per element of `x`.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (rows, cols) = self.cols_of(x);
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::shape("softmax", self.shape(x), &[m.len()]));
            }
        }
        let xd = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let row = &xd[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptySupport { op: "softmax" });
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for j in 0..cols {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::Softmax { x: x.0, cols }, needs))
    }

    /// Divides each row by its Euclidean norm, or by `eps` when the norm is
    /// at most `eps`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let (rows, cols) = self.cols_of(x);
        let xd = self.data(x);
        let mut out = vec![0.0; rows * cols];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let norm = dot(row, row).sqrt();
            let denom = if norm > eps { norm } else { eps };
            for j in 0..cols {
                out[r * cols + j] = row[j] / denom;
            }
            norms.push(norm);
        }
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        let needs = self.needs(&[x.0]);
        self.push(t, Op::L2Normalize { x: x.0, cols, eps, norms }, needs)
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column affine `gain`, `bias` (each of length `cols`).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.cols_of(x);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gain), self.data(bias));
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gd[j] + bd[j];
            }
            inv_std.push(is);
        }
        let t = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                cols,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(t, Op::Identity { x: x.0 }, needs))
    }

    /// Columns `start..start+len` of a matrix view.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.cols_of(x);
        if len == 0 || start + len > cols {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(&[rows, len], out)?,
            Op::SliceCols {
                x: x.0,
                cols,
                start,
                len,
            },
            needs,
        ))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Rank("concat of nothing".into()))?;
        let rows = self.cols_of(*first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.cols_of(*p);
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), self.shape(*p)));
            }
            widths.push((p.0, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(node, c) in &widths {
                out.extend_from_slice(&self.nodes[node].value.data()[r * c..(r + 1) * c]);
            }
        }
        let ids: Vec<usize> = widths.iter().map(|w| w.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols { parts: widths, rows }, needs))
    }

    /// Rows of `x` at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.cols_of(x);
        if idx.is_empty() {
            return Err(Error::Rank("gather of zero rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", self.shape(x), &[bad]));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(&[idx.len(), cols], out)?,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
                cols,
            },
            needs,
        ))
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero `[total, cols]` matrix,
    /// summing collisions.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], total: usize) -> Result<Var> {
        let (rows, cols) = self.cols_of(x);
        if idx.len() != rows || idx.iter().any(|&i| i >= total) {
            return Err(Error::shape("scatter_rows", self.shape(x), &[idx.len(), total]));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; total * cols];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..cols {
                out[i * cols + j] += xd[r * cols + j];
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(&[total, cols], out)?,
            Op::ScatterRows {
                x: x.0,
                idx: idx.to_vec(),
                cols,
            },
            needs,
        ))
    }

    /// Sliding-window patches for a same-padded 1-D convolution.
    ///
    /// `x` is `[batch·len, ch]` (sequence-major per example). Row `(b, t)` of
    /// the result concatenates input rows `t - pad .. t - pad + width` of
    /// example `b`, zero outside the sequence; width `width·ch`.
    pub fn conv_patches(&mut self, x: Var, batch: usize, len: usize, width: usize) -> Result<Var> {
        let (rows, ch) = self.cols_of(x);
        if rows != batch * len || width == 0 {
            return Err(Error::shape("conv_patches", self.shape(x), &[batch, len, width]));
        }
        let pad = (width - 1) / 2;
        let xd = self.data(x);
        let mut out = vec![0.0; rows * width * ch];
        for b in 0..batch {
            for t in 0..len {
                let orow = (b * len + t) * width * ch;
                for o in 0..width {
                    let src = t as isize + o as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let irow = (b * len + src as usize) * ch;
                    out[orow + o * ch..orow + (o + 1) * ch].copy_from_slice(&xd[irow..irow + ch]);
                }
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(
            Tensor::new(&[rows, width * ch], out)?,
            Op::ConvPatches {
                x: x.0,
                batch,
                len,
                ch,
                width,
                pad,
            },
            needs,
        ))
    }

    /// Max-pool of width 2, stride 2 along the sequence axis of a
    /// `[batch·len, ch]` input; a trailing odd element pools alone.
    /// Output `[batch·ceil(len/2), ch]`.
    pub fn max_pool_seq(&mut self, x: Var, batch: usize, len: usize) -> Result<Var> {
        let (rows, ch) = self.cols_of(x);
        if rows != batch * len {
            return Err(Error::shape("max_pool_seq", self.shape(x), &[batch, len]));
        }
        let plen = len.div_ceil(2);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(batch * plen * ch);
        let mut argmax = Vec::with_capacity(batch * plen * ch);
        for b in 0..batch {
            for p in 0..plen {
                for c in 0..ch {
                    let i0 = (b * len + 2 * p) * ch + c;
                    let mut best = i0;
                    if 2 * p + 1 < len {
                        let i1 = i0 + ch;
                        if xd[i1] > xd[i0] {
                            best = i1;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::new(&[batch * plen, ch], out)?, Op::MaxPool { x: x.0, argmax }, needs))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 }, needs)
    }

    /// Column means of a matrix view: `[rows, cols] -> [cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.cols_of(x);
        let xd = self.data(x);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for j in 0..cols {
                out[j] += xd[r * cols + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let needs = self.needs(&[x.0]);
        self.push(Tensor::vector(out), Op::MeanRows { x: x.0, rows, cols }, needs)
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`, with
    /// `p` clamped to `[LOGLOSS_CLAMP, 1 - LOGLOSS_CLAMP]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pd = self.data(p);
        if pd.len() != labels.len() || labels.is_empty() {
            return Err(Error::Input(format!(
                "{} predictions for {} labels",
                pd.len(),
                labels.len()
            )));
        }
        let n = labels.len() as f64;
        let mut loss = 0.0;
        let mut active = Vec::with_capacity(pd.len());
        for (&pv, &y) in pd.iter().zip(labels) {
            let c = pv.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
            active.push(c == pv);
            loss -= y * c.ln() + (1.0 - y) * (1.0 - c).ln();
        }
        let needs = self.needs(&[p.0]);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::Bce {
                p: p.0,
                labels: labels.to_vec(),
                active,
            },
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, v)| (id, v.0)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[j].needs_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; self.nodes[j].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |da| {
                    for t in 0..batch {
                        let (gb, bb) = (&g[t * m * n..], &bd[t * k * n..]);
                        let dab = &mut da[t * m * k..(t + 1) * m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    let bv = if trans_b { bb[j * k + p] } else { bb[p * n + j] };
                                    s += gb[i * n + j] * bv;
                                }
                                dab[i * k + p] += s;
                            }
                        }
                    }
                });
                acc(b, &mut |db| {
                    for t in 0..batch {
                        let (gb, ab) = (&g[t * m * n..], &ad[t * m * k..]);
                        let dbb = &mut db[t * k * n..(t + 1) * k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = ab[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    let idx = if trans_b { j * k + p } else { p * n + j };
                                    dbb[idx] += av * gb[i * n + j];
                                }
                            }
                        }
                    }
                });
            }
            &Op::SharedLeft {
                w,
                x,
                batch,
                m,
                k,
                n,
            } => {
                let (wd, xd) = (val(w), val(x));
                acc(w, &mut |dw| {
                    for t in 0..batch {
                        let (gb, xb) = (&g[t * m * n..], &xd[t * k * n..]);
                        for i in 0..m {
                            for p in 0..k {
                                dw[i * k + p] += dot(&gb[i * n..(i + 1) * n], &xb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
                acc(x, &mut |dx| {
                    for t in 0..batch {
                        let gb = &g[t * m * n..(t + 1) * m * n];
                        let dxb = &mut dx[t * k * n..(t + 1) * k * n];
                        for i in 0..m {
                            for p in 0..k {
                                axpy(wd[i * k + p], &gb[i * n..(i + 1) * n], &mut dxb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            &Op::Transpose { x, rows, cols } => acc(x, &mut |dx| {
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Add { a, b } => {
                acc(a, &mut |d| axpy(1.0, g, d));
                acc(b, &mut |d| axpy(1.0, g, d));
            }
            &Op::Hadamard { a, b } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |d| d.iter_mut().enumerate().for_each(|(j, v)| *v += g[j] * bd[j]));
                acc(b, &mut |d| d.iter_mut().enumerate().for_each(|(j, v)| *v += g[j] * ad[j]));
            }
            &Op::AddBroadcast { x, b } => {
                acc(x, &mut |d| axpy(1.0, g, d));
                acc(b, &mut |d| {
                    let lb = d.len();
                    g.iter().enumerate().for_each(|(j, v)| d[j % lb] += v);
                });
            }
            &Op::ScaleRows { x, s, cols } => {
                let (xd, sd) = (val(x), val(s));
                acc(x, &mut |d| d.iter_mut().enumerate().for_each(|(j, v)| *v += g[j] * sd[j / cols]));
                acc(s, &mut |d| {
                    for (r, dv) in d.iter_mut().enumerate() {
                        *dv += dot(&g[r * cols..(r + 1) * cols], &xd[r * cols..(r + 1) * cols]);
                    }
                });
            }
            &Op::MulScalar { x, s } => {
                let (xd, sv) = (val(x), val(s)[0]);
                acc(x, &mut |d| axpy(sv, g, d));
                acc(s, &mut |d| d[0] += dot(g, xd));
            }
            &Op::Scale { x, c } => acc(x, &mut |d| axpy(c, g, d)),
            &Op::Identity { x } => acc(x, &mut |d| axpy(1.0, g, d)),
            &Op::Unary { x, f } => {
                let (xd, yd) = (val(x), node.value.data());
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * unary_derivative(f, xd[j], yd[j]);
                    }
                });
            }
            &Op::Softmax { x, cols } => {
                let y = node.value.data();
                acc(x, &mut |d| {
                    for r in 0..y.len() / cols {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let s = dot(yr, gr);
                        for j in 0..cols {
                            d[r * cols + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::L2Normalize { x, cols, eps, norms } => {
                let y = node.value.data();
                let cols = *cols;
                acc(*x, &mut |d| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        if norm > *eps {
                            let s = dot(yr, gr);
                            for j in 0..cols {
                                d[r * cols + j] += (gr[j] - yr[j] * s) / norm;
                            }
                        } else {
                            for j in 0..cols {
                                d[r * cols + j] += gr[j] / eps;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                inv_std,
            } => {
                let cols = *cols;
                let gd = val(*gain);
                acc(*x, &mut |d| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (hr, gr) = (&xhat[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dh: Vec<f64> = (0..cols).map(|j| gr[j] * gd[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h = dot(&dh, hr) / cols as f64;
                        for j in 0..cols {
                            d[r * cols + j] += is * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j % cols] += gv * xhat[j];
                    }
                });
                acc(*bias, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j % cols] += gv;
                    }
                });
            }
            &Op::SliceCols { x, cols, start, len } => acc(x, &mut |d| {
                for r in 0..g.len() / len {
                    axpy(1.0, &g[r * len..(r + 1) * len], &mut d[r * cols + start..r * cols + start + len]);
                }
            }),
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(node_id, c) in parts {
                    acc(node_id, &mut |d| {
                        for r in 0..*rows {
                            axpy(
                                1.0,
                                &g[r * total + offset..r * total + offset + c],
                                &mut d[r * c..(r + 1) * c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::GatherRows { x, idx, cols } => {
                let cols = *cols;
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[r * cols..(r + 1) * cols], &mut d[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::ScatterRows { x, idx, cols } => {
                let cols = *cols;
                acc(*x, &mut |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[i * cols..(i + 1) * cols], &mut d[r * cols..(r + 1) * cols]);
                    }
                });
            }
            &Op::ConvPatches {
                x,
                batch,
                len,
                ch,
                width,
                pad,
            } => acc(x, &mut |d| {
                for b in 0..batch {
                    for t in 0..len {
                        let grow = (b * len + t) * width * ch;
                        for o in 0..width {
                            let src = t as isize + o as isize - pad as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let irow = (b * len + src as usize) * ch;
                            axpy(1.0, &g[grow + o * ch..grow + (o + 1) * ch], &mut d[irow..irow + ch]);
                        }
                    }
                }
            }),
            Op::MaxPool { x, argmax } => acc(*x, &mut |d| {
                for (j, &src) in argmax.iter().enumerate() {
                    d[src] += g[j];
                }
            }),
            &Op::SumAll { x } => acc(x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            &Op::MeanRows { x, rows, cols } => acc(x, &mut |d| {
                for r in 0..rows {
                    for j in 0..cols {
                        d[r * cols + j] += g[j] / rows as f64;
                    }
                }
            }),
            Op::Bce { p, labels, active } => {
                let pd = val(*p);
                let n = labels.len() as f64;
                acc(*p, &mut |d| {
                    for j in 0..d.len() {
                        if active[j] {
                            let (pv, y) = (pd[j], labels[j]);
                            d[j] += -g[0] * (y / pv - (1.0 - y) / (1.0 - pv)) / n;
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn apply_unary(f: Unary, x: f64) -> f64 {
    match f {
        Unary::Relu => x.max(0.0),
        Unary::Sigmoid => sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Softplus => softplus(x),
        Unary::Recip => 1.0 / x,
    }
}

fn unary_derivative(f: Unary, x: f64, y: f64) -> f64 {
    match f {
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Softplus => sigmoid(x),
        Unary::Recip => -y * y,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yv, xv)| *yv += alpha * xv);
}
