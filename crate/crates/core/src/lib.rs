//! AdaEnsemble: a stack of sparsely gated mixture-of-experts layers over
//! heterogeneous feature-interaction experts, with a learned controller that
//! picks a per-example exit depth.

pub mod depth_controller;
pub mod error;
pub mod experts;
pub mod features;
pub mod model;
pub mod numerics;
pub mod sparse_moe;
pub mod training;

pub use error::{Error, Result};
