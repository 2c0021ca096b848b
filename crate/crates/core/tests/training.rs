use rollingq::linalg::Matrix;
use rollingq::synth::{self, Sample, SyntheticSpec};
use rollingq::trainer::{self, train_step, Sgd, TrainConfig};
use rollingq::{model, Rng};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        s_a: 1.5,
        s_v: 0.5,
        train_size: 600,
        test_size: 300,
        seed: 4,
        ..SyntheticSpec::default()
    }
}

fn small_config(rollingq_enabled: bool) -> TrainConfig {
    TrainConfig {
        epochs: 12,
        lr: 0.1,
        init_std: 0.3,
        dim: 16,
        hidden: 16,
        rollingq_enabled,
        seed: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn disabled_controller_keeps_identity_rotation() {
    let report = trainer::run(&small_config(false), &small_spec()).unwrap();
    assert_eq!(report.model.fusion.rotation, Matrix::identity(16));
    assert!(report.events.is_empty());
    assert_eq!(report.records.len(), 12);
    for r in &report.records {
        assert!(r.check().is_ok());
        assert!(r.train_loss.unwrap().is_finite());
    }
}

#[test]
fn unreachable_threshold_matches_disabled_run() {
    let spec = small_spec();
    let off = trainer::run(&small_config(false), &spec).unwrap();
    let mut cfg = small_config(true);
    cfg.rollingq.beta = 2.01;
    let on = trainer::run(&cfg, &spec).unwrap();
    assert_eq!(on.controller.rotations_used, 0);
    assert_eq!(on.events.len(), 12);
    assert_eq!(on.model.fusion.rotation, Matrix::identity(16));
    for (a, b) in off.records.iter().zip(&on.records) {
        assert!((a.test_accuracy - b.test_accuracy).abs() <= 1e-12);
        assert!((a.air - b.air).abs() <= 1e-12);
        assert!((a.score_a - b.score_a).abs() <= 1e-12);
    }
    assert_eq!(off.model.checksum(), on.model.checksum());
}

#[test]
fn runs_are_bitwise_reproducible_and_respect_the_budget() {
    let mut cfg = small_config(true);
    cfg.rollingq.beta = 0.05;
    cfg.rollingq.max_rotations = 2;
    let spec = small_spec();
    let a = trainer::run(&cfg, &spec).unwrap();
    let b = trainer::run(&cfg, &spec).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.model.checksum(), b.model.checksum());
    assert_eq!(a.final_scatter, b.final_scatter);
    assert!(a.controller.rotations_used <= 2);
    let mut used = 0;
    for e in &a.events {
        used += usize::from(e.rotation_applied);
        assert!(used <= 2);
    }
    assert_eq!(used, a.controller.rotations_used);
    assert!(a.model.fusion.rotation.orthogonality_error() < 1e-8);
}

#[test]
fn gradient_steps_never_touch_the_rotation() {
    let spec = small_spec();
    let data = synth::generate(&spec).unwrap();
    let cfg = small_config(false);
    let mut params = model::init(&cfg.model_spec(&spec), &Rng::new(1)).unwrap();
    params.fusion.rotation = rollingq::linalg::plane_rotation_from_pair(
        &rollingq::Vector::basis(16, 0),
        &rollingq::Vector::basis(16, 3),
    )
    .unwrap();
    let before = params.fusion.rotation.clone();
    let mut sgd = Sgd::new(0.9);
    let batches = synth::batches(data.train.len(), 32, &mut Rng::new(2)).unwrap();
    for (j, idx) in batches.iter().enumerate() {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
        train_step(&mut params, &batch, 0.1, &mut sgd, (0, j), |_| Ok(())).unwrap();
        assert_eq!(params.fusion.rotation, before);
    }
}

#[test]
fn biased_data_tilts_attention_towards_the_strong_modality() {
    let report = trainer::run(&small_config(false), &small_spec()).unwrap();
    let last = report.last_record();
    assert!(last.air > 0.0, "AIR {}", last.air);
    assert!(last.score_a > 0.5, "score_a {}", last.score_a);
}
