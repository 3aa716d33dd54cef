//! Command implementations for the `adaensemble` binary.
//!
//! A training run directory holds:
//!
//! | file               | contents                                        |
//! |--------------------|-------------------------------------------------|
//! | `config.toml`      | resolved run configuration                      |
//! | `pipeline.json`    | fitted bucketizers and vocabularies             |
//! | `model.ckpt`       | parameters plus config and pipeline             |
//! | `history.tsv`      | one row per outer training step                 |
//! | `manifest.json`    | seed, input hashes, artifact paths, timings     |
//! | `failure.txt`      | only after a numeric abort: the offending batch |
//!
//! `evaluate` and `inspect-routing` add `eval_<data>.txt`, `eval_<data>.kv`
//! and `routing_<data>.txt`.

pub mod commands;
pub mod config;
pub mod error;

pub use error::{exit_code, CliError, CliResult};
