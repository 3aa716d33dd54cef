//! Dense tensors, a reverse-mode tape, seeded randomness, parameter storage
//! and the checkpoint container. Everything else computes on this.

mod checkpoint;
pub mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use checkpoint::{Container, CONTAINER_VERSION, MAGIC};
pub use params::{Param, ParamId, ParamStore, Partition};
pub use rng::Rng;
pub use tape::{sigmoid, softplus, Gradients, Tape, Unary, Var, LOGLOSS_CLAMP};
pub use tensor::Tensor;

/// Row-wise softmax of one vector with an optional keep-mask, outside any tape.
pub fn softmax(x: &[f64], mask: Option<&[bool]>) -> crate::Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(x.to_vec()));
    let y = tape.softmax_rows(v, mask)?;
    Ok(tape.data(y).to_vec())
}

/// `x / max(‖x‖, eps)`, outside any tape.
pub fn l2_normalize(x: &[f64], eps: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(x.to_vec()));
    let y = tape.l2_normalize_rows(v, eps);
    tape.data(y).to_vec()
}
