//! Embedding, stacked mixture-of-experts layers, per-depth estimators and the
//! depth controller assembled into one trainable model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depth_controller::{dynamic_propagation, soft_depth_forward, DepthPlan, DepthStack, Estimator};
use crate::error::{Error, Result};
use crate::experts::FieldGeometry;
use crate::features::{Batch, EmbeddingTable, EncodedDataset, FeaturePipeline};
use crate::numerics::{Container, ParamId, ParamStore, Partition, Rng, Tape, Tensor, Var};
use crate::sparse_moe::{load_distribution_loss_tape, validate_targets, GateDecision, GatingConfig, GatingNetwork, MoeLayer, MoeLayerConfig};

const MODEL_FORMAT: &str = "adaensemble-model";
const MODEL_FORMAT_VERSION: u32 = 1;

fn default_true() -> bool {
    true
}

fn default_lambda() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// One entry per depth.
    pub layers: Vec<MoeLayerConfig>,
    #[serde(default = "default_true")]
    pub use_controller: bool,
    #[serde(default)]
    pub depth_gate: GatingConfig,
    /// Target exit distribution over depths; uniform when absent.
    #[serde(default)]
    pub depth_targets: Option<Vec<f64>>,
    /// Weight of the summed per-layer expert load losses.
    #[serde(default = "default_lambda")]
    pub lambda_expert: f64,
    /// Weight of the depth load loss.
    #[serde(default = "default_lambda")]
    pub lambda_depth: f64,
}

impl ModelConfig {
    /// `layers` copies of `layer`.
    pub fn uniform(layers: usize, layer: MoeLayerConfig) -> Self {
        ModelConfig {
            layers: vec![layer; layers],
            use_controller: true,
            depth_gate: GatingConfig::default(),
            depth_targets: None,
            lambda_expert: default_lambda(),
            lambda_depth: default_lambda(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn depth_targets(&self) -> Vec<f64> {
        let l = self.layers.len().max(1);
        self.depth_targets.clone().unwrap_or_else(|| vec![1.0 / l as f64; l])
    }

    pub fn validate(&self, geom: FieldGeometry) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer
                .validate(geom)
                .map_err(|e| Error::Config(format!("layer {}: {e}", l + 1)))?;
        }
        for (name, v) in [("lambda_expert", self.lambda_expert), ("lambda_depth", self.lambda_depth)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a finite nonnegative number")));
            }
        }
        self.depth_gate
            .validate()
            .map_err(|e| Error::Config(format!("depth gate: {e}")))?;
        validate_targets(&self.depth_targets(), self.layers.len())
            .map_err(|e| Error::Config(format!("depth_targets: {e}")))
    }
}

/// Inference switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InferOptions {
    /// Overrides every layer's `k_final`.
    pub k: Option<usize>,
    /// Sends every example through all layers.
    pub force_full_depth: bool,
}

/// Routing of one layer over the examples that reached it.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub depth: usize,
    /// Original batch positions of the rows processed.
    pub rows: Vec<usize>,
    pub decisions: Vec<GateDecision>,
    pub calls: Vec<usize>,
    /// Unmasked router probabilities `[rows, N]`.
    pub probs: Var,
}

/// Tape handles and routing facts from a training forward pass.
#[derive(Debug)]
pub struct TrainOutput {
    pub probs: Var,
    pub logloss: Var,
    pub expert_aux: Var,
    pub depth_aux: Option<Var>,
    pub total: Var,
    /// `k` used at each layer.
    pub ks: Vec<usize>,
    /// Largest number of experts any example was routed to.
    pub max_selected: usize,
}

/// Result of a hard, deterministic inference pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inference {
    pub probs: Vec<f64>,
    pub depths: Vec<usize>,
    pub flops: Vec<u64>,
    /// Per example, one gate decision per executed layer.
    pub routes: Vec<Vec<GateDecision>>,
}

impl Inference {
    pub fn mean_flops(&self) -> f64 {
        if self.flops.is_empty() {
            return 0.0;
        }
        self.flops.iter().map(|&f| f as f64).sum::<f64>() / self.flops.len() as f64
    }

    fn extend(&mut self, other: Inference) {
        self.probs.extend(other.probs);
        self.depths.extend(other.depths);
        self.flops.extend(other.flops);
        self.routes.extend(other.routes);
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    version: u32,
    config: ModelConfig,
    field_names: Vec<String>,
    table_rows: Vec<usize>,
    embedding_dim: usize,
    pipeline: Option<FeaturePipeline>,
}

#[derive(Debug)]
pub struct AdaEnsembleModel {
    config: ModelConfig,
    geom: FieldGeometry,
    field_names: Vec<String>,
    table_rows: Vec<usize>,
    pub store: ParamStore,
    embeddings: EmbeddingTable,
    layers: Vec<MoeLayer>,
    estimators: Vec<Estimator>,
    depth_gate: Option<GatingNetwork>,
    pipeline: Option<FeaturePipeline>,
}

struct Runner<'m, 'r> {
    model: &'m AdaEnsembleModel,
    ks: Vec<usize>,
    jitter: Option<&'r mut Rng>,
    traces: Vec<LayerTrace>,
}

impl DepthStack for Runner<'_, '_> {
    fn num_layers(&self) -> usize {
        self.model.layers.len()
    }

    fn layer(&mut self, tape: &mut Tape, depth: usize, x: Var, x0: Var, rows: &[usize]) -> Result<Var> {
        let layer = &self.model.layers[depth - 1];
        let out = layer.forward(tape, &self.model.store, x, x0, self.ks[depth - 1], self.jitter.as_deref_mut())?;
        self.traces.push(LayerTrace {
            depth,
            rows: rows.to_vec(),
            decisions: out.decisions,
            calls: out.calls,
            probs: out.probs,
        });
        Ok(out.output)
    }

    fn estimate(&mut self, tape: &mut Tape, depth: usize, x: Var) -> Result<Var> {
        self.model.estimators[depth - 1].estimate(tape, &self.model.store, x)
    }
}

impl AdaEnsembleModel {
    pub fn new(config: ModelConfig, field_names: Vec<String>, table_rows: Vec<usize>, embedding_dim: usize, rng: &mut Rng) -> Result<Self> {
        let geom = FieldGeometry::new(field_names.len(), embedding_dim)?;
        config.validate(geom)?;
        if table_rows.len() != field_names.len() {
            return Err(Error::Config(format!(
                "{} embedding tables for {} fields",
                table_rows.len(),
                field_names.len()
            )));
        }
        let mut store = ParamStore::new();
        let embeddings = EmbeddingTable::new(&mut store, &field_names, &table_rows, embedding_dim, rng)?;
        let mut layers = Vec::with_capacity(config.num_layers());
        let mut estimators = Vec::with_capacity(config.num_layers());
        for (l, layer) in config.layers.iter().enumerate() {
            layers.push(MoeLayer::new(&mut store, &format!("layer{}", l + 1), geom, layer, rng)?);
            estimators.push(Estimator::new(&mut store, &format!("estimator{}", l + 1), geom.flat(), rng)?);
        }
        let depth_gate = if config.use_controller {
            Some(GatingNetwork::new(
                &mut store,
                "depth_gate",
                geom.flat(),
                config.num_layers(),
                &config.depth_gate,
                rng,
            )?)
        } else {
            None
        };
        Ok(AdaEnsembleModel {
            config,
            geom,
            field_names,
            table_rows,
            store,
            embeddings,
            layers,
            estimators,
            depth_gate,
            pipeline: None,
        })
    }

    pub fn from_pipeline(config: ModelConfig, pipeline: FeaturePipeline, rng: &mut Rng) -> Result<Self> {
        let names = pipeline.schema.fields.iter().map(|f| f.name.clone()).collect();
        let mut model = Self::new(config, names, pipeline.table_rows(), pipeline.embedding_dim(), rng)?;
        model.pipeline = Some(pipeline);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> FieldGeometry {
        self.geom
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn table_rows(&self) -> &[usize] {
        &self.table_rows
    }

    pub fn pipeline(&self) -> Option<&FeaturePipeline> {
        self.pipeline.as_ref()
    }

    pub fn layers(&self) -> &[MoeLayer] {
        &self.layers
    }

    pub fn estimators(&self) -> &[Estimator] {
        &self.estimators
    }

    pub fn depth_gate(&self) -> Option<&GatingNetwork> {
        self.depth_gate.as_ref()
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params_in(&self, partition: Partition) -> Vec<ParamId> {
        self.store.ids_in(partition)
    }

    /// `k` of every layer at a training step.
    pub fn scheduled_k(&self, step: usize) -> Vec<usize> {
        self.layers.iter().map(|l| l.schedule().k_at(step)).collect()
    }

    /// `[B, F·D]` raw feature maps for `batch × F` indices.
    pub fn embed(&self, tape: &mut Tape, indices: &[usize]) -> Result<Var> {
        self.embeddings.lookup(tape, &self.store, indices)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.num_fields != self.geom.fields {
            return Err(Error::Input(format!(
                "batch has {} fields, model expects {}",
                batch.num_fields, self.geom.fields
            )));
        }
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        Ok(())
    }

    /// Training pass at `step`: jittered gates, annealed `k`, soft depth
    /// mixture, and the weighted objective
    /// `logloss + λ_expert·Σ_l L_dist(layer l) + λ_depth·L_dist(depth)`.
    pub fn forward_train(&self, tape: &mut Tape, batch: &Batch, step: usize, rng: &mut Rng) -> Result<TrainOutput> {
        self.forward_soft(tape, batch, self.scheduled_k(step), Some(rng))
    }

    /// Soft depth mixture at `k_final` without jitter: the training-time
    /// surrogate evaluated deterministically, to compare against the hard
    /// plan of [`Self::predict`].
    pub fn soft_predict(&self, data: &EncodedDataset, chunk: usize) -> Result<Vec<f64>> {
        let ks = self.layers.iter().map(|l| l.schedule().k_final).collect::<Vec<_>>();
        let mut probs = Vec::with_capacity(data.len());
        for start in (0..data.len()).step_by(chunk.max(1)) {
            let rows: Vec<usize> = (start..(start + chunk.max(1)).min(data.len())).collect();
            let mut tape = Tape::new();
            let out = self.forward_soft(&mut tape, &data.batch(&rows), ks.clone(), None)?;
            probs.extend_from_slice(tape.data(out.probs));
        }
        Ok(probs)
    }

    fn forward_soft(&self, tape: &mut Tape, batch: &Batch, ks: Vec<usize>, mut rng: Option<&mut Rng>) -> Result<TrainOutput> {
        self.check_batch(batch)?;
        let x0 = self.embed(tape, &batch.indices)?;

        let mut depth_aux = None;
        let depth_probs = match &self.depth_gate {
            Some(gate) => {
                let scores = gate.scores(tape, &self.store, x0, rng.as_deref_mut())?;
                let probs = tape.softmax_rows(scores, None)?;
                depth_aux = Some(load_distribution_loss_tape(tape, probs, &self.config.depth_targets(), 1.0)?);
                Some(probs)
            }
            None => None,
        };
        let mut runner = Runner {
            model: self,
            ks: ks.clone(),
            jitter: rng,
            traces: Vec::new(),
        };
        let probs = match depth_probs {
            Some(dp) => soft_depth_forward(tape, &mut runner, x0, dp)?,
            None => {
                let rows: Vec<usize> = (0..batch.len()).collect();
                let mut x = x0;
                for depth in 1..=self.num_layers() {
                    x = runner.layer(tape, depth, x, x0, &rows)?;
                }
                runner.estimate(tape, self.num_layers(), x)?
            }
        };
        let traces = runner.traces;

        let mut expert_aux: Option<Var> = None;
        let mut max_selected = 0;
        for t in &traces {
            let layer = &self.layers[t.depth - 1];
            let l = load_distribution_loss_tape(tape, t.probs, layer.targets(), 1.0)?;
            expert_aux = Some(match expert_aux {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
            max_selected = max_selected.max(t.decisions.iter().map(|d| d.selected.len()).max().unwrap_or(0));
        }
        let expert_aux = expert_aux.ok_or_else(|| Error::Internal("no layer ran".into()))?;
        let logloss = tape.bce(probs, &batch.labels)?;
        let weighted = tape.scale(expert_aux, self.config.lambda_expert);
        let mut total = tape.add(logloss, weighted)?;
        if let Some(d) = depth_aux {
            let weighted = tape.scale(d, self.config.lambda_depth);
            total = tape.add(total, weighted)?;
        }
        Ok(TrainOutput {
            probs,
            logloss,
            expert_aux,
            depth_aux,
            total,
            ks,
            max_selected,
        })
    }

    fn inference_ks(&self, opts: InferOptions) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .map(|l| {
                let k = opts.k.unwrap_or(l.schedule().k_final);
                if k == 0 || k > l.num_experts() {
                    Err(Error::Config(format!("k = {k} outside 1..={}", l.num_experts())))
                } else {
                    Ok(k)
                }
            })
            .collect()
    }

    /// Exit depths chosen by the controller, or all `L` without it.
    pub fn plan_depths(&self, tape: &mut Tape, x0: Var, opts: InferOptions) -> Result<DepthPlan> {
        let (batch, _) = tape.value(x0).as_matrix_dims();
        match (&self.depth_gate, opts.force_full_depth) {
            (Some(gate), false) => {
                let scores = gate.scores(tape, &self.store, x0, None)?;
                DepthPlan::from_probs(tape.data(scores), self.num_layers())
            }
            _ => Ok(DepthPlan::uniform(batch, self.num_layers())),
        }
    }

    /// Deterministic inference: hard top-1 depth, hard top-`k` experts, no
    /// jitter, with per-example multiply-add counts of what actually ran.
    pub fn forward_infer(&self, batch: &Batch, opts: InferOptions) -> Result<Inference> {
        self.check_batch(batch)?;
        let ks = self.inference_ks(opts)?;
        let mut tape = Tape::new();
        let x0 = self.embed(&mut tape, &batch.indices)?;
        let plan = self.plan_depths(&mut tape, x0, opts)?;
        let mut runner = Runner {
            model: self,
            ks,
            jitter: None,
            traces: Vec::new(),
        };
        let probs = dynamic_propagation(&mut tape, &mut runner, x0, &plan)?;

        let n = batch.len();
        let gate_flops = match (&self.depth_gate, opts.force_full_depth) {
            (Some(g), false) => g.flops(),
            _ => 0,
        };
        let mut flops = vec![gate_flops; n];
        let mut routes = vec![Vec::new(); n];
        for t in &runner.traces {
            let layer = &self.layers[t.depth - 1];
            for (&row, d) in t.rows.iter().zip(&t.decisions) {
                flops[row] += layer.flops(&d.selected);
                routes[row].push(d.clone());
            }
        }
        for (f, &d) in flops.iter_mut().zip(&plan.depths) {
            *f += self.estimators[d - 1].flops();
        }
        Ok(Inference {
            probs: tape.data(probs).to_vec(),
            depths: plan.depths,
            flops,
            routes,
        })
    }

    /// [`forward_infer`](Self::forward_infer) over a whole dataset in chunks.
    pub fn predict(&self, data: &EncodedDataset, opts: InferOptions, chunk: usize) -> Result<Inference> {
        if data.is_empty() {
            return Err(Error::Input("cannot predict on an empty dataset".into()));
        }
        let chunk = chunk.max(1);
        let mut all = Inference::default();
        let rows: Vec<usize> = (0..data.len()).collect();
        for part in rows.chunks(chunk) {
            all.extend(self.forward_infer(&data.batch(part), opts)?);
        }
        Ok(all)
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            field_names: self.field_names.clone(),
            table_rows: self.table_rows.clone(),
            embedding_dim: self.geom.dim,
            pipeline: self.pipeline.clone(),
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container {
            meta: serde_json::to_string(&self.meta())?,
            ..Container::default()
        };
        for (_, p) in self.store.iter() {
            c.tensors
                .insert(p.name.clone(), Tensor::new(p.tensor.shape(), p.tensor.data().to_vec())?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: ModelMeta =
            serde_json::from_str(&c.meta).map_err(|e| Error::Checkpoint(format!("bad model metadata: {e}")))?;
        if meta.format != MODEL_FORMAT || meta.version != MODEL_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model format {} v{}",
                meta.format, meta.version
            )));
        }
        let mut model = Self::new(meta.config, meta.field_names, meta.table_rows, meta.embedding_dim, &mut Rng::seed(0))?;
        model.pipeline = meta.pipeline;
        if c.tensors.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                c.tensors.len(),
                model.store.len()
            )));
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.param(id).name.clone();
            let t = c
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != model.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            model.store.set(id, t.data())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Copies every parameter value (not gradients) from `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Internal("parameter stores differ in size".into()));
        }
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            self.store.set(id, other.get(id).data())?;
        }
        Ok(())
    }
}
