//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! every backward rule it checks. Non-scalar outputs are reduced with a
//! fixed pseudo-random projection before differencing.

use crate::error::Result;
use crate::numerics::{Rng, Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or the absolute difference norm when both
/// are below `1e-12`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn projected_loss(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = Rng::seed(0x9e37);
    let w = Tensor::new(tape.shape(out), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let w = tape.constant(w);
    let prod = tape.hadamard(out, w)?;
    Ok(tape.sum(prod))
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = projected_loss(&mut tape, out)?;
    Ok(tape.data(loss)[0])
}

/// Largest per-input relative error between tape gradients and central
/// differences of `f` with respect to every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone().with_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    let loss = projected_loss(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = numeric_gradient(inputs, i, &f)?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Central differences of `f` with respect to input `which`.
pub fn numeric_gradient<F>(inputs: &[Tensor], which: usize, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs[which].len());
    for j in 0..inputs[which].len() {
        let orig = inputs[which].data()[j];
        work[which].data_mut()[j] = orig + STEP;
        let up = evaluate(&work, f)?;
        work[which].data_mut()[j] = orig - STEP;
        let down = evaluate(&work, f)?;
        work[which].data_mut()[j] = orig;
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

/// Central differences of an arbitrary scalar function of a flat vector.
pub fn numeric_gradient_fn(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        work[j] = x[j] + STEP;
        let up = f(&work)?;
        work[j] = x[j] - STEP;
        let down = f(&work)?;
        work[j] = x[j];
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

/// Worst relative error between tape gradients and central differences for
/// every stored parameter reached by `f`. Parameters not reached must have a
/// numerically zero gradient too.
pub fn check_param_gradients<F>(store: &crate::numerics::ParamStore, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &crate::numerics::ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let loss = projected_loss(&mut tape, out)?;
    let grads = tape.backward(loss)?;
    let analytic: std::collections::HashMap<_, Vec<f64>> =
        grads.params().map(|(id, g)| (id, g.to_vec())).collect();

    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for id in store.ids() {
        let base = store.get(id).data().to_vec();
        let numeric = numeric_gradient_fn(&base, |vals| {
            work.set(id, vals)?;
            let mut tape = Tape::new();
            let out = f(&mut tape, &work)?;
            let loss = projected_loss(&mut tape, out)?;
            Ok(tape.data(loss)[0])
        })?;
        work.set(id, &base)?;
        let a = analytic.get(&id).cloned().unwrap_or_else(|| vec![0.0; base.len()]);
        worst = worst.max(relative_error(&a, &numeric));
    }
    Ok(worst)
}
