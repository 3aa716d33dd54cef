//! Metrics, optimization, bi-level training, synthetic data and reports.

pub mod adam;
pub mod baseline;
pub mod bilevel;
pub mod evaluate;
pub mod metrics;
pub mod synthetic;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use baseline::{BaselineConfig, LogisticBaseline};
pub use bilevel::{bilevel_train, BiLevelConfig, HistoryRow, TrainReport};
pub use evaluate::{evaluate, evaluate_with_inference, inspect_routing, render_comparison, EvalReport, LayerLoad, RoutingReport};
pub use metrics::{auc, constant_predictor_logloss, logloss, total_loss};
pub use synthetic::{generate_synthetic, InteractionKind, PlantedInteraction, SyntheticData, SyntheticSpec};
