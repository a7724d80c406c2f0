//! Training smoke tests on a frozen 512-sample MNIST subset.

use std::path::PathBuf;

use lenikit::train::{evaluate, load_checkpoint, mean_loss, save_checkpoint, train, Dataset, DatasetFormat, DatasetSpec, Meta, TrainConfig};
use lenikit::{ActivationKind, Model, ModelConfig, Rng};

fn fixture() -> Dataset {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let files = vec![dir.join("mnist512-images-idx3-ubyte"), dir.join("mnist512-labels-idx1-ubyte")];
    DatasetSpec {
        format: DatasetFormat::Idx,
        train_files: files.clone(),
        test_files: files,
        mean: vec![0.1307],
        std: vec![0.3081],
        train_limit: None,
        test_limit: None,
    }
    .load_train()
    .unwrap()
}

fn small(kind: ActivationKind) -> ModelConfig {
    ModelConfig {
        stage_widths: vec![8, 16],
        blocks_per_stage: vec![1, 1],
        ..ModelConfig::vgg_small()
    }
    .with_activation(kind)
}

fn one_epoch() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 32,
        lr_schedule: Some(vec![]),
        ..TrainConfig::default()
    }
}

#[test]
fn fixture_shape_and_scaling() {
    let ds = fixture();
    assert_eq!(ds.len(), 512);
    assert_eq!(ds.images.shape().as_array(), [512, 1, 28, 28]);
    let lo = -0.1307 / 0.3081;
    let hi = (1.0 - 0.1307) / 0.3081;
    assert!(ds.images.data().iter().all(|v| (lo - 1e-12..=hi + 1e-12).contains(v)));
    assert_eq!(ds.max_label(), Some(9));
}

#[test]
fn one_epoch_reduces_loss_for_every_activation() {
    let ds = fixture();
    let mut configs: Vec<(String, ModelConfig)> = ActivationKind::all()
        .into_iter()
        .map(|k| (format!("{k:?}"), small(k)))
        .collect();
    configs.push(("leni".into(), small(ActivationKind::Relu).with_leni_everywhere()));
    for (name, cfg) in configs {
        let tc = one_epoch();
        let mut init = Model::build(&cfg, &Rng::new(tc.seed).fork("init", 0)).unwrap();
        let before = mean_loss(&mut init, &ds).unwrap();
        let mut out = train(&cfg, &tc, &ds, &ds, |_| {}).unwrap();
        let after = mean_loss(&mut out.model, &ds).unwrap();
        assert!(after < before, "{name}: loss {before} -> {after}");
        assert!(out.log.epochs[0].train_loss.is_finite(), "{name}");
    }
}

#[test]
fn same_seed_gives_identical_log_and_weights() {
    let ds = fixture();
    let cfg = small(ActivationKind::rrelu()).with_leni([1]);
    let mut a = train(&cfg, &one_epoch(), &ds, &ds, |_| {}).unwrap();
    let mut b = train(&cfg, &one_epoch(), &ds, &ds, |_| {}).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let wa: Vec<Vec<f64>> = a.model.tensors_mut().into_iter().map(|(_, t, _)| t.data().to_vec()).collect();
    let wb: Vec<Vec<f64>> = b.model.tensors_mut().into_iter().map(|(_, t, _)| t.data().to_vec()).collect();
    assert_eq!(wa, wb);
}

#[test]
fn checkpoint_round_trip_preserves_accuracy() {
    let ds = fixture();
    let cfg = small(ActivationKind::prelu()).with_leni([0]);
    let mut out = train(&cfg, &one_epoch(), &ds, &ds, |_| {}).unwrap();
    let before = evaluate(&mut out.model, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    save_checkpoint(&mut out.model, &Meta::new(), &path).unwrap();
    let (mut loaded, _) = load_checkpoint(&path).unwrap();
    assert_eq!(evaluate(&mut loaded, &ds).unwrap(), before);
    assert_eq!(loaded.config(), &cfg);
}

#[test]
fn class_count_mismatch_is_config_error() {
    let ds = fixture();
    let cfg = ModelConfig {
        num_classes: 5,
        ..small(ActivationKind::Relu)
    };
    assert!(matches!(
        train(&cfg, &one_epoch(), &ds, &ds, |_| {}),
        Err(lenikit::Error::Config(_))
    ));
}
