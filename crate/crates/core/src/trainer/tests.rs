use super::*;
use crate::datagen::{generate, source_batch, Example, ShiftSpec, TargetBatch};
use crate::tensor::Tensor;

fn model_cfg(input_dim: usize, k: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        n_concepts: k,
        emb_dim: 4,
        n_classes: 2,
        backbone_widths: vec![32],
        predictor_widths: vec![16],
        discriminator_widths: vec![16],
        disc_input: DiscInput::Embedding,
    }
}

fn small_data(seed: u64) -> (Dataset, Dataset) {
    generate(&ShiftSpec::benchmark(), 256, 256, seed).unwrap()
}

fn batches(s: &Dataset, t: &Dataset, n: usize) -> (SourceBatch<f64>, TargetBatch<f64>) {
    let idx: Vec<usize> = (0..n).collect();
    (source_batch(s, &idx, 2), TargetBatch { x: t.x_tensor(&idx) })
}

fn snapshot(p: &ModelParams<f64>, group: Group) -> Vec<Vec<f64>> {
    p.blocks().into_iter().filter(|(g, _)| *g == group).map(|(_, t)| t.data().to_vec()).collect()
}

fn cfg() -> TrainConfig {
    TrainConfig { epochs: 2, batch: 32, ..TrainConfig::default() }
}

#[test]
fn substeps_touch_only_their_own_player() {
    let (s, t) = small_data(1);
    for c in [cfg(), TrainConfig { lambda_d: 0.0, ..cfg() }, TrainConfig { mode: Mode::SourceOnly, ..cfg() }] {
        let p = ModelParams::init(&model_cfg(10, 6), 3).unwrap();
        let mut tr = Trainer::new(p, c).unwrap();
        let (sb, tb) = batches(&s, &t, 32);
        for _ in 0..3 {
            let before = tr.params.clone();
            tr.discriminator_step(&sb, &tb).unwrap();
            assert_eq!(snapshot(&before, Group::Encoder), snapshot(&tr.params, Group::Encoder));
            assert_eq!(snapshot(&before, Group::Predictor), snapshot(&tr.params, Group::Predictor));
            assert_ne!(snapshot(&before, Group::Discriminator), snapshot(&tr.params, Group::Discriminator));

            let before = tr.params.clone();
            tr.main_step(&sb, &tb).unwrap();
            assert_eq!(snapshot(&before, Group::Discriminator), snapshot(&tr.params, Group::Discriminator));
            assert_ne!(snapshot(&before, Group::Encoder), snapshot(&tr.params, Group::Encoder));
            assert_ne!(snapshot(&before, Group::Predictor), snapshot(&tr.params, Group::Predictor));
        }
    }
}

#[test]
fn discriminator_separates_frozen_separable_embeddings() {
    let mk = |shift: f64, u: u8, n: usize| -> Dataset {
        let examples = (0..n)
            .map(|i| {
                let x = (0..6).map(|j| shift + ((i * 7 + j * 3) % 11) as f64 / 11.0).collect();
                Example { x, y: i % 2, c: vec![(i % 3 == 0) as u8; 3], u }
            })
            .collect();
        Dataset { examples, spec: None, seed: None, x_dim: 6, n_concepts: 3 }
    };
    let (s, t) = (mk(-3.0, 0, 64), mk(3.0, 1, 64));
    let p = ModelParams::init(&model_cfg(6, 3), 5).unwrap();
    let encoder = snapshot(&p, Group::Encoder);
    let mut tr = Trainer::new(p, TrainConfig { alpha1: 1e-2, ..cfg() }).unwrap();
    let (sb, tb) = batches(&s, &t, 64);
    let mut last = f64::NAN;
    for _ in 0..500 {
        last = tr.discriminator_step(&sb, &tb).unwrap();
    }
    assert!(last < 0.05, "l_d = {last}");
    assert_eq!(encoder, snapshot(&tr.params, Group::Encoder));
}

#[test]
fn capped_domain_loss_leaves_only_supervised_gradient() {
    let (s, t) = small_data(2);
    let (sb, tb) = batches(&s, &t, 32);
    let p = ModelParams::init(&model_cfg(10, 6), 4).unwrap();
    // Chance-level discriminator loss is far above this threshold.
    let capped = Trainer::new(p.clone(), TrainConfig { tau: 1e-3, ..cfg() }).unwrap();
    let (g_capped, bundle) = capped.main_gradients(&sb, &tb).unwrap();
    assert!(bundle.l_d >= 1e-3);
    assert_eq!(bundle.l_d_relaxed, 1e-3);
    let supervised = Trainer::new(p.clone(), TrainConfig { lambda_d: 0.0, ..cfg() }).unwrap();
    let (g_sup, _) = supervised.main_gradients(&sb, &tb).unwrap();
    assert_eq!(g_capped, g_sup);
    // Below the threshold the domain term does move the encoder.
    let open = Trainer::new(p, TrainConfig { tau: 10.0, ..cfg() }).unwrap();
    let (g_open, _) = open.main_gradients(&sb, &tb).unwrap();
    assert_ne!(g_open, g_sup);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let (s, t) = small_data(3);
    let c = TrainConfig { epochs: 0, seed: 17, ..cfg() };
    let (p, log) = train::<f64>(&s, &t, &c, &model_cfg(10, 6)).unwrap();
    assert_eq!(p, ModelParams::init(&model_cfg(10, 6), 17).unwrap());
    assert!(log.records.is_empty());
}

#[test]
fn training_is_deterministic() {
    let (s, t) = small_data(4);
    let (p1, l1) = train::<f64>(&s, &t, &cfg(), &model_cfg(10, 6)).unwrap();
    let (p2, l2) = train::<f64>(&s, &t, &cfg(), &model_cfg(10, 6)).unwrap();
    assert_eq!(p1.to_checkpoint_bytes(), p2.to_checkpoint_bytes());
    assert_eq!(l1.records, l2.records);
    assert_eq!(l1.to_csv_string(), l2.to_csv_string());
    let (p3, _) = train::<f64>(&s, &t, &TrainConfig { seed: 1, ..cfg() }, &model_cfg(10, 6)).unwrap();
    assert_ne!(p1, p3);
}

#[test]
fn uniform_mode_is_cuda_at_ln2() {
    let (s, t) = small_data(5);
    let (pu, lu) = train::<f64>(&s, &t, &TrainConfig { mode: Mode::Uniform, ..cfg() }, &model_cfg(10, 6)).unwrap();
    let (pc, lc) = train::<f64>(&s, &t, &TrainConfig { tau: LN_2, ..cfg() }, &model_cfg(10, 6)).unwrap();
    assert_eq!(pu.to_checkpoint_bytes(), pc.to_checkpoint_bytes());
    assert_eq!(lu.to_csv_string(), lc.to_csv_string());
}

#[test]
fn naive_mode_discriminates_backbone_features() {
    let c = TrainConfig { mode: Mode::NaiveDa, ..cfg() };
    let m = c.adapt_model(&model_cfg(10, 6));
    assert_eq!(m.disc_input, DiscInput::Backbone);
    assert!(c.effective_tau().is_infinite());
    let (s, t) = small_data(6);
    let (p, log) = train::<f64>(&s, &t, &c, &model_cfg(10, 6)).unwrap();
    assert_eq!(p.discriminator.layers[0].w.shape()[0], 32);
    assert_eq!(log.records.len(), 2);
}

#[test]
fn non_finite_loss_aborts_with_the_producing_op() {
    let (s, t) = small_data(7);
    let mut p = ModelParams::init(&model_cfg(10, 6), 1).unwrap();
    // Finite but huge weights: mixed-sign inputs overflow to +inf and -inf
    // inside one product and their sum is NaN.
    p.phi.layers[0].w = Tensor::filled(&[10, 32], 1e308);
    let mut tr = Trainer::new(p, cfg()).unwrap();
    let (sb, tb) = batches(&s, &t, 16);
    match tr.train_step(&sb, &tb) {
        Err(Error::NonFinite { op, epoch, step }) => {
            assert_eq!(op, "matmul");
            assert_eq!((epoch, step), (0, 0));
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn unequal_batches_are_rejected() {
    let (s, t) = small_data(8);
    let p = ModelParams::init(&model_cfg(10, 6), 1).unwrap();
    let mut tr = Trainer::new(p, cfg()).unwrap();
    let sb = source_batch(&s, &[0, 1, 2], 2);
    let tb = TargetBatch { x: t.x_tensor::<f64>(&[0, 1]) };
    assert!(matches!(tr.train_step(&sb, &tb), Err(Error::Contract { .. })));
}

#[test]
fn domain_loss_history_is_non_negative() {
    let (s, t) = small_data(9);
    let (_, log) = train::<f64>(&s, &t, &TrainConfig { epochs: 3, ..cfg() }, &model_cfg(10, 6)).unwrap();
    assert!(log.records.iter().all(|r| r.l_d >= 0.0 && r.l_d_relaxed <= 0.5 + 1e-12));
    assert_eq!(log.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn source_only_without_shift_generalizes_to_target() {
    let mut spec = ShiftSpec::benchmark();
    spec.marginal_gap = vec![0.0; spec.k];
    spec.spurious_corr_target = spec.spurious_corr_source;
    let (s, t) = generate(&spec, 5000, 5000, 11).unwrap();
    let c = TrainConfig { mode: Mode::SourceOnly, epochs: 5, ..TrainConfig::default() };
    let (_, log) = train::<f64>(&s, &t, &c, &model_cfg(10, 6)).unwrap();
    let last = log.records.last().unwrap();
    assert!((last.source.class_acc - last.target.class_acc).abs() < 0.03, "{last:?}");
}

#[test]
fn config_json_requires_every_key() {
    let c = TrainConfig::default();
    let text = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("lambda_c");
    let err = serde_json::from_value::<TrainConfig>(v).unwrap_err().to_string();
    assert!(err.contains("lambda_c"), "{err}");
    assert!(TrainConfig { batch: 0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { tau: 0.0, ..c }.validate().is_err());
}

#[test]
fn single_precision_training_runs() {
    let (s, t) = small_data(12);
    let (p, log) = train::<f32>(&s, &t, &TrainConfig { epochs: 1, ..cfg() }, &model_cfg(10, 6)).unwrap();
    assert!(log.records[0].l_p.is_finite());
    let _: &Tensor<f32> = &p.g_concept.w;
}
