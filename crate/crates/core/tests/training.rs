use adaensemble::experts::ExpertKind;
use adaensemble::features::{EncodedDataset, FeaturePipeline};
use adaensemble::model::{AdaEnsembleModel, InferOptions, ModelConfig};
use adaensemble::numerics::{Partition, Rng};
use adaensemble::sparse_moe::MoeLayerConfig;
use adaensemble::training::{
    bilevel_train, constant_predictor_logloss, generate_synthetic, logloss, BiLevelConfig, InteractionKind, PlantedInteraction, SyntheticSpec,
};
use adaensemble::Error;

fn two_field_task(examples: usize, seed: u64) -> (FeaturePipeline, EncodedDataset, EncodedDataset) {
    let spec = SyntheticSpec {
        levels: vec![6, 6],
        latent_dim: 2,
        interactions: vec![PlantedInteraction {
            fields: vec![0, 1],
            kind: InteractionKind::Multiplicative,
            coefficient: 3.0,
        }],
        bias: 0.0,
        label_noise: 0.0,
        examples,
        seed,
    };
    let data = generate_synthetic(&spec).unwrap();
    let records = data.records();
    let split = examples * 4 / 5;
    let pipeline = FeaturePipeline::fit(&records[..split], &spec.schema(4), 10, 1).unwrap();
    let train = pipeline.encode_all(&records[..split]).unwrap();
    let val = pipeline.encode_all(&records[split..]).unwrap();
    (pipeline, train, val)
}

fn config(layers: usize, k: usize) -> ModelConfig {
    let mut layer = MoeLayerConfig::new(vec![ExpertKind::PolynomialInteraction, ExpertKind::Cross, ExpertKind::Dense], k);
    layer.anneal_steps = 20;
    layer.gating.reduction_ratio = 2;
    layer.expert_settings.dense_hidden = Some(16);
    let mut cfg = ModelConfig::uniform(layers, layer);
    cfg.depth_gate.reduction_ratio = 2;
    cfg
}

fn snapshot(model: &AdaEnsembleModel, partition: Partition) -> Vec<(String, Vec<u64>)> {
    model
        .params_in(partition)
        .into_iter()
        .map(|id| {
            let p = model.store.param(id);
            (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect())
        })
        .collect()
}

fn train_cfg(steps: usize) -> BiLevelConfig {
    let mut cfg = BiLevelConfig::new(steps, 5);
    cfg.batch_size = 64;
    cfg.eval_every = 0;
    cfg.lr_weights = 0.01;
    cfg.lr_arch = 0.01;
    cfg
}

#[test]
fn zero_arch_rate_freezes_gates() {
    let (pipeline, train, val) = two_field_task(1000, 1);
    let mut model = AdaEnsembleModel::from_pipeline(config(2, 2), pipeline, &mut Rng::seed(2)).unwrap();
    let gates = snapshot(&model, Partition::Architecture);
    let weights = snapshot(&model, Partition::Weights);
    let mut cfg = train_cfg(10);
    cfg.lr_arch = 0.0;
    bilevel_train(&mut model, &train, &val, &cfg).unwrap();
    assert_eq!(snapshot(&model, Partition::Architecture), gates);
    assert_ne!(snapshot(&model, Partition::Weights), weights);
}

#[test]
fn zero_weight_rate_freezes_weights() {
    let (pipeline, train, val) = two_field_task(1000, 3);
    let mut model = AdaEnsembleModel::from_pipeline(config(2, 2), pipeline, &mut Rng::seed(4)).unwrap();
    let gates = snapshot(&model, Partition::Architecture);
    let weights = snapshot(&model, Partition::Weights);
    let mut cfg = train_cfg(10);
    cfg.lr_weights = 0.0;
    cfg.inner_steps = 1;
    bilevel_train(&mut model, &train, &val, &cfg).unwrap();
    assert_eq!(snapshot(&model, Partition::Weights), weights);
    assert_ne!(snapshot(&model, Partition::Architecture), gates);
}

#[test]
fn learns_a_pairwise_product() {
    let (pipeline, train, val) = two_field_task(4000, 5);
    let mut model = AdaEnsembleModel::from_pipeline(config(1, 2), pipeline, &mut Rng::seed(6)).unwrap();
    let report = bilevel_train(&mut model, &train, &val, &train_cfg(200)).unwrap();
    assert_eq!(report.history.len(), 200);
    let inf = model.predict(&train, InferOptions::default(), 1024).unwrap();
    let trained = logloss(&inf.probs, &train.labels).unwrap();
    let constant = constant_predictor_logloss(&train.labels).unwrap();
    assert!(trained < constant - 0.05, "trained {trained} vs constant {constant}");
}

#[test]
fn realized_routing_follows_the_anneal_schedule() {
    let (pipeline, train, val) = two_field_task(1000, 7);
    let mut model = AdaEnsembleModel::from_pipeline(config(2, 1), pipeline, &mut Rng::seed(8)).unwrap();
    let report = bilevel_train(&mut model, &train, &val, &train_cfg(30)).unwrap();
    for row in &report.history {
        assert_eq!(row.k, model.layers()[0].schedule().k_at(row.step));
        assert!(row.max_selected <= row.k, "step {}: {} > {}", row.step, row.max_selected, row.k);
    }
    assert_eq!(report.history[0].k, 3);
    assert_eq!(report.history.last().unwrap().k, 1);
}

#[test]
fn same_seed_same_history() {
    let (pipeline, train, val) = two_field_task(800, 9);
    let run = || {
        let mut model = AdaEnsembleModel::from_pipeline(config(2, 2), pipeline.clone(), &mut Rng::seed(10)).unwrap();
        let mut cfg = train_cfg(15);
        cfg.eval_every = 5;
        let report = bilevel_train(&mut model, &train, &val, &cfg).unwrap();
        (report.history_tsv(), snapshot(&model, Partition::Weights))
    };
    assert_eq!(run(), run());
}

#[test]
fn early_stopping_restores_the_best_pass() {
    let (pipeline, train, val) = two_field_task(800, 11);
    let mut model = AdaEnsembleModel::from_pipeline(config(1, 2), pipeline, &mut Rng::seed(12)).unwrap();
    let mut cfg = train_cfg(60);
    // a huge step size makes validation loss worse after the first pass
    cfg.lr_weights = 5.0;
    cfg.eval_every = 1;
    cfg.patience = 3;
    let report = bilevel_train(&mut model, &train, &val, &cfg).unwrap();
    let best = report.best_val_logloss.unwrap();
    let inf = model.predict(&val, InferOptions::default(), 1024).unwrap();
    assert_eq!(logloss(&inf.probs, &val.labels).unwrap(), best);
    if report.stopped_early {
        assert!(report.history.len() < 60);
    }
}

#[test]
fn non_finite_loss_names_the_batch() {
    let (pipeline, train, val) = two_field_task(400, 13);
    let mut model = AdaEnsembleModel::from_pipeline(config(1, 2), pipeline, &mut Rng::seed(14)).unwrap();
    let id = model.embeddings().table_ids()[0];
    let n = model.store.get(id).len();
    model.store.set(id, &vec![f64::NAN; n]).unwrap();
    let err = bilevel_train(&mut model, &train, &val, &train_cfg(3)).unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("batch epoch 1 offset 0"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn empty_split_is_an_input_error() {
    let (pipeline, train, _) = two_field_task(400, 15);
    let mut model = AdaEnsembleModel::from_pipeline(config(1, 2), pipeline, &mut Rng::seed(16)).unwrap();
    let empty = EncodedDataset {
        num_fields: 2,
        indices: vec![],
        labels: vec![],
    };
    assert!(matches!(bilevel_train(&mut model, &train, &empty, &train_cfg(3)), Err(Error::Input(_))));
}
