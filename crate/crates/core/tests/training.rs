//! Trainer and comparison harness behaviour on a tiny synthetic task.

use rblock_core::mask::{DropMethod, DropSpec};
use rblock_core::train::checkpoint;
use rblock_core::train::compare::{run_comparison, stage_epochs, StageRow};
use rblock_core::train::{accuracy, train_single, DatasetConfig, SyntheticSpec, TrainConfig};

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::desk_scale();
    cfg.epochs = 5;
    cfg.lr_milestones = vec![(3, 0.1)];
    cfg.model.conv_channels = vec![3, 4];
    cfg.dataset = DatasetConfig::Synthetic(SyntheticSpec {
        per_class: 30,
        test_per_class: 10,
        height: 8,
        width: 8,
        ..SyntheticSpec::default()
    });
    cfg
}

#[test]
fn baseline_matches_zero_rate_dropout() {
    let cfg = tiny().with_drop(DropSpec::new(DropMethod::Baseline, 0.0));
    let (train, test) = cfg.dataset.load().unwrap();
    let a = train_single(cfg.init_network(&train).unwrap(), &train, &test, &cfg).unwrap();
    let zero = cfg.clone().with_drop(DropSpec::new(DropMethod::Dropout, 0.0));
    let b = train_single(zero.init_network(&train).unwrap(), &train, &test, &zero).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.network, b.network);
}

#[test]
fn evaluation_is_deterministic_and_unmasked() {
    let cfg = tiny();
    let (train, test) = cfg.dataset.load().unwrap();
    let net = cfg.init_network(&train).unwrap();
    let first = accuracy(&net, &test).unwrap();
    assert_eq!(first, accuracy(&net, &test).unwrap());
}

#[test]
fn single_method_table_reduces_to_its_metrics() {
    let cfg = tiny();
    let (train, test) = cfg.dataset.load().unwrap();
    let spec = DropSpec::new(DropMethod::BDropDml, 0.2);
    let table = run_comparison(std::slice::from_ref(&spec), &cfg, &train, &test).unwrap();
    assert_eq!(table.rows.len(), 1);
    let metrics = &table.metrics[0];
    let expected: Vec<f64> = stage_epochs(cfg.epochs).iter().map(|&e| metrics[e - 1].best_val_acc).collect();
    assert_eq!(table.rows[0].stages.to_vec(), expected);
    assert_eq!(table.rows[0], StageRow::from_metrics(spec.method, spec.p, metrics));
    assert_eq!(table.stages_csv().lines().count(), 2);
}

#[test]
fn repeated_method_gives_identical_rows() {
    let mut cfg = tiny();
    cfg.mask_placement = vec![0];
    let (train, test) = cfg.dataset.load().unwrap();
    let spec = DropSpec::new(DropMethod::SDropDml, 0.2);
    let table = run_comparison(&[spec, spec], &cfg, &train, &test).unwrap();
    assert_eq!(table.rows[0], table.rows[1]);
    assert_eq!(table.metrics[0], table.metrics[1]);
    for row in &table.rows {
        assert!(row.stages.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn failing_member_keeps_completed_rows() {
    let mut cfg = tiny();
    cfg.optimizer.lr = 1e200;
    cfg.lr_milestones.clear();
    let (train, test) = cfg.dataset.load().unwrap();
    let ok = {
        let mut c = cfg.clone();
        c.optimizer.lr = 0.01;
        c
    };
    let first = run_comparison(&[DropSpec::new(DropMethod::RDropPair, 0.5)], &ok, &train, &test).unwrap();
    assert_eq!(first.rows.len(), 1);
    let err = run_comparison(&[DropSpec::new(DropMethod::RDropPair, 0.5)], &cfg, &train, &test).unwrap_err();
    assert_eq!(err.method, DropMethod::RDropPair);
    assert!(err.completed.rows.is_empty());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = tiny();
    let (train, test) = cfg.dataset.load().unwrap();
    let out = rblock_core::train::train_rblock(cfg.init_network(&train).unwrap(), &train, &test, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.ckpt");
    checkpoint::save(&out.network, &path).unwrap();
    let mut restored = cfg.init_network(&train).unwrap();
    checkpoint::load_into(&path, &mut restored).unwrap();
    assert_eq!(restored, out.network);
    assert_eq!(accuracy(&restored, &test).unwrap(), accuracy(&out.network, &test).unwrap());
}

#[test]
fn config_file_round_trip() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    assert_eq!(TrainConfig::from_path(&path).unwrap(), cfg);
}
