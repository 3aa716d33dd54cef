//! One inference pass over a dataset summarized as metrics, cost, exit
//! depths and expert usage.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::depth_controller::{depth_histogram, DepthHistogram};
use crate::error::{Error, Result};
use crate::experts::ExpertKind;
use crate::features::EncodedDataset;
use crate::model::{AdaEnsembleModel, InferOptions, Inference};
use crate::sparse_moe::argmax;

use super::metrics::{auc, logloss};

const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLoad {
    pub layer: usize,
    /// Examples that executed this layer.
    pub reached: usize,
    pub experts: Vec<ExpertKind>,
    /// Fraction of those examples whose largest gate weight is expert `j`.
    pub argmax_fraction: Vec<f64>,
    /// Fraction of those examples routed to expert `j` at all.
    pub selection_frequency: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub auc: f64,
    pub logloss: f64,
    pub mean_flops: f64,
    pub depth_histogram: DepthHistogram,
    pub layers: Vec<LayerLoad>,
}

fn layer_loads(model: &AdaEnsembleModel, inf: &Inference) -> Vec<LayerLoad> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let n = layer.num_experts();
            let mut top = vec![0usize; n];
            let mut chosen = vec![0usize; n];
            let mut reached = 0;
            for route in &inf.routes {
                if let Some(d) = route.get(l) {
                    reached += 1;
                    top[argmax(&d.weights)] += 1;
                    for &j in &d.selected {
                        chosen[j] += 1;
                    }
                }
            }
            let frac = |c: &[usize]| -> Vec<f64> {
                c.iter()
                    .map(|&v| if reached == 0 { 0.0 } else { v as f64 / reached as f64 })
                    .collect()
            };
            LayerLoad {
                layer: l + 1,
                reached,
                experts: layer.kinds(),
                argmax_fraction: frac(&top),
                selection_frequency: frac(&chosen),
            }
        })
        .collect()
}

impl EvalReport {
    pub fn from_inference(model: &AdaEnsembleModel, inf: &Inference, labels: &[f64]) -> Result<Self> {
        Ok(EvalReport {
            examples: labels.len(),
            auc: auc(&inf.probs, labels)?,
            logloss: logloss(&inf.probs, labels)?,
            mean_flops: inf.mean_flops(),
            depth_histogram: depth_histogram(&inf.depths, model.num_layers())?,
            layers: layer_loads(model, inf),
        })
    }

    /// Human-readable summary.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples  {}", self.examples);
        let _ = writeln!(s, "AUC       {:.6}", self.auc);
        let _ = writeln!(s, "LogLoss   {:.6}", self.logloss);
        let _ = writeln!(s, "FLOPs     {:.1}", self.mean_flops);
        s.push('\n');
        s.push_str(&self.depth_histogram.render());
        for layer in &self.layers {
            let _ = writeln!(s, "\nlayer {} (reached by {})", layer.layer, layer.reached);
            let _ = writeln!(s, "{:<12}{:>10}{:>10}", "expert", "argmax", "selected");
            for (j, kind) in layer.experts.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{:<12}{:>9.2}%{:>9.2}%",
                    kind.short_name(),
                    100.0 * layer.argmax_fraction[j],
                    100.0 * layer.selection_frequency[j]
                );
            }
        }
        s
    }

    /// `key = value` lines in a fixed order.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples = {}", self.examples);
        let _ = writeln!(s, "auc = {}", self.auc);
        let _ = writeln!(s, "logloss = {}", self.logloss);
        let _ = writeln!(s, "mean_flops = {}", self.mean_flops);
        for (d, f) in self.depth_histogram.fractions.iter().enumerate() {
            let _ = writeln!(s, "depth.{}.fraction = {}", d + 1, f);
        }
        for layer in &self.layers {
            let _ = writeln!(s, "layer.{}.reached = {}", layer.layer, layer.reached);
            for (j, kind) in layer.experts.iter().enumerate() {
                let name = kind.short_name();
                let _ = writeln!(s, "layer.{}.{name}.argmax_fraction = {}", layer.layer, layer.argmax_fraction[j]);
                let _ = writeln!(s, "layer.{}.{name}.selection_frequency = {}", layer.layer, layer.selection_frequency[j]);
            }
        }
        s
    }
}

/// Side-by-side AUC, LogLoss and mean FLOPs of several runs.
pub fn render_comparison(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{:<width$}{:>10}{:>10}{:>14}\n", "", "AUC", "LogLoss", "FLOPs");
    for (name, r) in rows {
        let _ = writeln!(s, "{name:<width$}{:>10.4}{:>10.4}{:>14.1}", r.auc, r.logloss, r.mean_flops);
    }
    s
}

fn check_schema(model: &AdaEnsembleModel, data: &EncodedDataset) -> Result<()> {
    if data.num_fields != model.geometry().fields {
        return Err(Error::Input(format!(
            "dataset has {} fields, model expects {}",
            data.num_fields,
            model.geometry().fields
        )));
    }
    Ok(())
}

/// Inference on `data` and its report, from one pass.
pub fn evaluate_with_inference(model: &AdaEnsembleModel, data: &EncodedDataset, opts: InferOptions) -> Result<(EvalReport, Inference)> {
    check_schema(model, data)?;
    let inf = model.predict(data, opts, EVAL_CHUNK)?;
    let report = EvalReport::from_inference(model, &inf, &data.labels)?;
    Ok((report, inf))
}

pub fn evaluate(model: &AdaEnsembleModel, data: &EncodedDataset, opts: InferOptions) -> Result<EvalReport> {
    evaluate_with_inference(model, data, opts).map(|(r, _)| r)
}

/// Expert usage per layer, the most common cross-layer routes and exit
/// depths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub examples: usize,
    pub layers: Vec<LayerLoad>,
    /// Route strings with their example counts, most common first.
    pub paths: Vec<(String, usize)>,
    pub depth_histogram: DepthHistogram,
}

/// `"pin+cross > dense"`: selected experts per executed layer.
fn route_label(model: &AdaEnsembleModel, route: &[crate::sparse_moe::GateDecision]) -> String {
    route
        .iter()
        .enumerate()
        .map(|(l, d)| {
            let kinds = model.layers()[l].kinds();
            d.selected.iter().map(|&j| kinds[j].short_name()).collect::<Vec<_>>().join("+")
        })
        .collect::<Vec<_>>()
        .join(" > ")
}

pub fn inspect_routing(model: &AdaEnsembleModel, data: &EncodedDataset, opts: InferOptions) -> Result<RoutingReport> {
    check_schema(model, data)?;
    let inf = model.predict(data, opts, EVAL_CHUNK)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for route in &inf.routes {
        *counts.entry(route_label(model, route)).or_default() += 1;
    }
    let mut paths: Vec<(String, usize)> = counts.into_iter().collect();
    paths.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RoutingReport {
        examples: data.len(),
        layers: layer_loads(model, &inf),
        paths,
        depth_histogram: depth_histogram(&inf.depths, model.num_layers())?,
    })
}

impl RoutingReport {
    /// Tables of per-layer selection frequency, the `top` most common paths
    /// and the depth histogram.
    pub fn render(&self, top: usize) -> String {
        let mut s = String::new();
        for layer in &self.layers {
            let _ = writeln!(s, "layer {} (reached by {})", layer.layer, layer.reached);
            for (j, kind) in layer.experts.iter().enumerate() {
                let _ = writeln!(s, "  {:<12}{:>8.2}%", kind.short_name(), 100.0 * layer.selection_frequency[j]);
            }
        }
        let _ = writeln!(s, "\n{:<48}{:>10}{:>10}", "path", "count", "share");
        for (path, count) in self.paths.iter().take(top) {
            let _ = writeln!(
                s,
                "{path:<48}{count:>10}{:>9.2}%",
                100.0 * *count as f64 / self.examples as f64
            );
        }
        if self.paths.len() > top {
            let rest: usize = self.paths[top..].iter().map(|(_, c)| c).sum();
            let _ = writeln!(s, "{:<48}{rest:>10}", format!("({} other paths)", self.paths.len() - top));
        }
        s.push('\n');
        s.push_str(&self.depth_histogram.render());
        s
    }
}
