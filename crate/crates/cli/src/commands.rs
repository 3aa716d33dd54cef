//! One function per subcommand. Each reads its inputs, never modifies
//! them, and writes only under its output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adaensemble::features::{read_records, write_records, EncodedDataset, FeaturePipeline, FieldSummary};
use adaensemble::model::{AdaEnsembleModel, InferOptions};
use adaensemble::numerics::Rng;
use adaensemble::training::{bilevel_train, evaluate, generate_synthetic, inspect_routing, EvalReport, RoutingReport, TrainReport};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{default_bins, read_toml, FeaturesConfig, GenerateConfig, RunConfig};
use crate::error::{CliError, CliResult};

pub const PIPELINE_FILE: &str = "pipeline.json";
pub const PIPELINE_SUMMARY_FILE: &str = "pipeline_summary.tsv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_FILE: &str = "failure.txt";

/// Paths shown in routing and report tables.
const ROUTING_TOP_PATHS: usize = 20;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_pipeline(path: &Path) -> CliResult<FeaturePipeline> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(FeaturePipeline::from_json(&text)?)
}

fn load_encoded(path: &Path, pipeline: &FeaturePipeline, delimiter: char) -> CliResult<EncodedDataset> {
    let records = read_records(path, delimiter, pipeline.num_fields())?;
    Ok(pipeline.encode_all(&records)?)
}

fn render_summary(summary: &[FieldSummary]) -> String {
    let mut s = String::from("field\tcardinality\toov_rate\tmerged_levels\n");
    for f in summary {
        s.push_str(&format!("{}\t{}\t{}\t{}\n", f.name, f.cardinality, f.oov_rate, f.merged_levels));
    }
    s
}

pub struct FitPipelineOutcome {
    pub pipeline: FeaturePipeline,
    pub summary: Vec<FieldSummary>,
    pub pipeline_path: PathBuf,
}

/// Fits bucketizers and vocabularies on `data` and writes
/// `pipeline.json` plus a per-field summary.
pub fn fit_pipeline(data: &Path, features: &Path, out_dir: &Path) -> CliResult<FitPipelineOutcome> {
    let cfg: FeaturesConfig = read_toml(features)?;
    let schema = cfg.schema();
    schema.validate()?;
    let records = read_records(data, cfg.delimiter, schema.fields.len())?;
    let pipeline = FeaturePipeline::fit(&records, &schema, cfg.bins, cfg.min_frequency)?;
    let summary = pipeline.summarize(&records)?;
    create_dir(out_dir)?;
    let pipeline_path = out_dir.join(PIPELINE_FILE);
    write(&pipeline_path, pipeline.to_json()?)?;
    write(&out_dir.join(PIPELINE_SUMMARY_FILE), render_summary(&summary))?;
    Ok(FitPipelineOutcome {
        pipeline,
        summary,
        pipeline_path,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct InputFingerprint {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a training run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Resolved configuration, identical to `config.toml`.
    pub config: String,
    pub inputs: Vec<InputFingerprint>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub timings_ms: BTreeMap<String, u128>,
    pub history_rows: usize,
    pub best_step: Option<usize>,
    pub stopped_early: bool,
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub report: TrainReport,
    pub model: AdaEnsembleModel,
}

/// Bi-level training run. Writes the checkpoint, history, resolved config,
/// pipeline and manifest into the output directory.
pub fn train(opts: &TrainOptions) -> CliResult<TrainOutcome> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = opts.max_steps {
        cfg.training.max_steps = steps;
    }
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Usage("train needs --out-dir or out_dir in the config".into()))?;
    cfg.out_dir = Some(out_dir.clone());
    let bilevel = cfg.training.bilevel(cfg.seed);
    bilevel.validate()?;

    let mut inputs = vec![
        ("train", cfg.data.train.clone()),
        ("val", cfg.data.val.clone()),
    ];
    let pipeline = match (&cfg.data.pipeline, &cfg.features) {
        (Some(path), _) => {
            inputs.push(("pipeline", path.clone()));
            load_pipeline(path)?
        }
        (None, Some(features)) => {
            let schema = features.schema();
            schema.validate()?;
            let records = read_records(&cfg.data.train, cfg.data.delimiter, schema.fields.len())?;
            FeaturePipeline::fit(&records, &schema, features.bins, features.min_frequency)?
        }
        (None, None) => unreachable!("RunConfig::load requires one of them"),
    };
    let train = load_encoded(&cfg.data.train, &pipeline, cfg.data.delimiter)?;
    let val = load_encoded(&cfg.data.val, &pipeline, cfg.data.delimiter)?;
    let loaded = started.elapsed();

    let mut model = AdaEnsembleModel::from_pipeline(cfg.model.clone(), pipeline, &mut Rng::substream(cfg.seed, "init"))?;
    create_dir(&out_dir)?;
    let report = match bilevel_train(&mut model, &train, &val, &bilevel) {
        Ok(r) => r,
        Err(e) => {
            write(&out_dir.join(FAILURE_FILE), format!("{e}\n"))?;
            return Err(e.into());
        }
    };
    let trained = started.elapsed();

    let config_text = cfg.to_toml()?;
    let mut artifacts = BTreeMap::new();
    for (name, file) in [
        ("checkpoint", CHECKPOINT_FILE),
        ("history", HISTORY_FILE),
        ("config", CONFIG_ECHO_FILE),
        ("pipeline", PIPELINE_FILE),
    ] {
        artifacts.insert(name.to_string(), out_dir.join(file));
    }
    model.save(&artifacts["checkpoint"])?;
    write(&artifacts["history"], report.history_tsv())?;
    write(&artifacts["config"], &config_text)?;
    let pipeline = model.pipeline().expect("model built from a pipeline");
    write(&artifacts["pipeline"], pipeline.to_json()?)?;
    let saved = started.elapsed();

    let inputs = inputs
        .into_iter()
        .map(|(role, path)| {
            Ok(InputFingerprint {
                role: role.to_string(),
                sha256: sha256_file(&path)?,
                path,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let timings_ms = BTreeMap::from([
        ("load".to_string(), loaded.as_millis()),
        ("train".to_string(), (trained - loaded).as_millis()),
        ("save".to_string(), (saved - trained).as_millis()),
        ("total".to_string(), started.elapsed().as_millis()),
    ]);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "train".into(),
        seed: cfg.seed,
        config: config_text,
        inputs,
        artifacts,
        timings_ms,
        history_rows: report.history.len(),
        best_step: report.best_step,
        stopped_early: report.stopped_early,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(adaensemble::Error::from)?;
    write(&out_dir.join(MANIFEST_FILE), json)?;
    Ok(TrainOutcome { out_dir, report, model })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Overrides the pipeline stored in the checkpoint.
    pub pipeline: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub delimiter: char,
    pub infer: InferOptions,
}

fn load_for_eval(opts: &EvalOptions) -> CliResult<(AdaEnsembleModel, EncodedDataset)> {
    let model = AdaEnsembleModel::load(&opts.checkpoint)?;
    let pipeline = match &opts.pipeline {
        Some(p) => load_pipeline(p)?,
        None => model
            .pipeline()
            .cloned()
            .ok_or_else(|| CliError::Usage("checkpoint has no pipeline; pass --pipeline".into()))?,
    };
    let data = load_encoded(&opts.data, &pipeline, opts.delimiter)?;
    Ok((model, data))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
}

/// Metrics, cost and routing summary. Writes `eval_<data stem>.txt` and
/// `eval_<data stem>.kv` when an output directory is given.
pub fn evaluate_cmd(opts: &EvalOptions) -> CliResult<EvalReport> {
    let (model, data) = load_for_eval(opts)?;
    let report = evaluate(&model, &data, opts.infer)?;
    if let Some(dir) = &opts.out_dir {
        create_dir(dir)?;
        let name = stem(&opts.data);
        write(&dir.join(format!("eval_{name}.txt")), report.render_table())?;
        write(&dir.join(format!("eval_{name}.kv")), report.to_key_values())?;
    }
    Ok(report)
}

/// Expert frequencies, cross-layer paths and exit depths. Writes
/// `routing_<data stem>.txt` when an output directory is given.
pub fn inspect_routing_cmd(opts: &EvalOptions) -> CliResult<RoutingReport> {
    let (model, data) = load_for_eval(opts)?;
    let report = inspect_routing(&model, &data, opts.infer)?;
    if let Some(dir) = &opts.out_dir {
        create_dir(dir)?;
        write(&dir.join(format!("routing_{}.txt", stem(&opts.data))), report.render(ROUTING_TOP_PATHS))?;
    }
    Ok(report)
}

pub fn render_routing(report: &RoutingReport) -> String {
    report.render(ROUTING_TOP_PATHS)
}

pub struct GenerateOutcome {
    pub files: Vec<PathBuf>,
    /// True-logit AUC of the train, validation and test splits.
    pub ceilings: [Option<f64>; 3],
}

/// Writes `train.tsv`, `val.tsv`, `test.tsv`, a matching `features.toml`
/// and the true-logit AUC of each split to `ceiling.txt`.
pub fn generate(config: &Path, seed: Option<u64>, out_dir: &Path) -> CliResult<GenerateOutcome> {
    let mut cfg: GenerateConfig = read_toml(config)?;
    if let Some(seed) = seed {
        cfg.synthetic.seed = seed;
    }
    let sizes = cfg.split_sizes()?;
    let data = generate_synthetic(&cfg.synthetic)?;
    create_dir(out_dir)?;
    let mut files = Vec::new();
    let mut ceilings = [None; 3];
    let mut ceiling_text = String::from("split\texamples\tceiling_auc\n");
    let mut start = 0;
    for (i, (name, size)) in ["train", "val", "test"].into_iter().zip(sizes).enumerate() {
        let part = data.slice(start, start + size);
        start += size;
        let path = out_dir.join(format!("{name}.tsv"));
        write_records(&path, &part.records(), '\t')?;
        files.push(path);
        ceilings[i] = part.ceiling_auc().ok();
        let shown = ceilings[i].map_or_else(|| "undefined".to_string(), |c| c.to_string());
        ceiling_text.push_str(&format!("{name}\t{size}\t{shown}\n"));
    }
    let features = FeaturesConfig {
        embedding_dim: cfg.embedding_dim,
        bins: default_bins(),
        min_frequency: 1,
        delimiter: '\t',
        fields: cfg.synthetic.schema(cfg.embedding_dim).fields,
    };
    let features_path = out_dir.join("features.toml");
    let text = toml::to_string(&features).map_err(|e| CliError::Usage(format!("cannot serialize features: {e}")))?;
    write(&features_path, text)?;
    files.push(features_path);
    let ceiling_path = out_dir.join("ceiling.txt");
    write(&ceiling_path, ceiling_text)?;
    files.push(ceiling_path);
    Ok(GenerateOutcome { files, ceilings })
}
