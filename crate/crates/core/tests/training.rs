// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::reference_splits;
use cpd_attention::data::{generate, split, GeneratorConfig};
use cpd_attention::losses::{LossConfig, LossKind};
use cpd_attention::masks::MaskSpec;
use cpd_attention::metrics::MetricsConfig;
use cpd_attention::model::{Model, ModelConfig, ModelKind};
use cpd_attention::training::{
    dataset_loss, mask_for, multi_run, read_sweep_csv, run, sweep, table1_rows, train, write_sweep_csv, RowSpec,
    RunConfig, Splits, SweepFamily, TrainConfig,
};

fn tiny_splits() -> Splits {
    let ds = generate(&GeneratorConfig {
        n: 30,
        length: 16,
        dim: 2,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let (train, val, test) = split(&ds, [0.6, 0.2, 0.2], 1).unwrap();
    Splits { train, val, test }
}

fn tiny_model(mask: MaskSpec) -> ModelConfig {
    ModelConfig {
        input_dim: 2,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 8,
        mask,
        ..ModelConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        patience: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_configs_give_identical_run_directories() {
    let splits = tiny_splits();
    let cfg = RunConfig {
        model: ModelConfig {
            dropout: 0.2,
            ..tiny_model(MaskSpec::Causal)
        },
        train: tiny_train(),
        metrics: MetricsConfig::default(),
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&cfg, &splits, Some(&a)).unwrap();
    run(&cfg, &splits, Some(&b)).unwrap();
    for f in ["config.json", "report.json", "history.csv", "best.ckpt"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert_eq!(x, y, "{f} differs");
    }
    let history = std::fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_loss,val_loss"));
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let splits = tiny_splits();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..tiny_train()
    };
    let model_cfg = tiny_model(MaskSpec::Band(3));
    let out = train(&model_cfg, &splits.train, &splits.val, &cfg).unwrap();
    assert_eq!(out.model.params, Model::init(model_cfg).unwrap().params);
}

#[test]
fn best_epoch_has_minimum_validation_loss() {
    let splits = tiny_splits();
    let cfg = TrainConfig {
        epochs: 8,
        patience: 2,
        learning_rate: 2e-2,
        ..tiny_train()
    };
    let out = train(&tiny_model(MaskSpec::None), &splits.train, &splits.val, &cfg).unwrap();
    let vals: Vec<f64> = out.history.iter().filter_map(|r| r.val_loss).collect();
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if out.best_epoch > 0 {
        assert_eq!(out.best_val_loss, min);
        assert_eq!(out.history[out.best_epoch - 1].val_loss, Some(min));
    } else {
        assert!(vals.iter().all(|&v| v >= out.best_val_loss));
    }
}

#[test]
fn single_run_rows_have_zero_std_and_share_splits() {
    let splits = tiny_splits();
    let base = tiny_model(MaskSpec::None);
    let rows = vec![
        RowSpec::new("a", ModelKind::Transformer, MaskSpec::Causal, LossKind::Cpd, &base),
        RowSpec::new("b", ModelKind::Transformer, MaskSpec::Band(2), LossKind::Cpd, &base),
    ];
    let table = multi_run(&rows, &splits, &tiny_train(), &MetricsConfig::default(), 1).unwrap();
    assert_eq!(table.len(), 2);
    for row in &table {
        let std = row.std.unwrap();
        assert_eq!([std.f1, std.covering, std.area], [0.0; 3]);
    }
    assert!(multi_run(&rows, &splits, &tiny_train(), &MetricsConfig::default(), 0).is_err());
}

#[test]
fn failing_rows_are_marked_without_aborting_others() {
    let splits = tiny_splits();
    let base = tiny_model(MaskSpec::None);
    let mut bad = RowSpec::new("bad", ModelKind::Transformer, MaskSpec::None, LossKind::Cpd, &base);
    bad.model.input_dim = 5;
    let good = RowSpec::new("good", ModelKind::Recurrent, MaskSpec::None, LossKind::Bce, &base);
    let table = multi_run(&[bad, good], &splits, &tiny_train(), &MetricsConfig::default(), 2).unwrap();
    assert!(table[0].error.is_some() && table[0].mean.is_none());
    assert!(table[1].error.is_none() && table[1].mean.is_some());
}

#[test]
fn table_has_twelve_rows_in_order() {
    let rows = table1_rows(&ModelConfig::default());
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[4].label, "Low-triangular mask, CPD loss");
    assert_eq!(rows[4].model.mask, MaskSpec::Causal);
    assert_eq!(rows[7].model.mask, MaskSpec::Band(2));
    assert_eq!(rows[10].model.mask, MaskSpec::BandPlusWindow { k: 1, n: 8 });
    assert_eq!(rows[11].model.mask, MaskSpec::BandPlusWindow { k: 3, n: 32 });
    assert_eq!(rows.iter().filter(|r| r.loss.kind == LossKind::Bce).count(), 6);
}

#[test]
fn sweep_csv_has_expected_columns_and_round_trips() {
    let splits = tiny_splits();
    let rows = sweep(
        SweepFamily::BandWindow { k: 1 },
        &[1, 4],
        &tiny_model(MaskSpec::None),
        &LossConfig::default(),
        &splits,
        &tiny_train(),
        &MetricsConfig::default(),
        1,
    )
    .unwrap();
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "mask_size,f1_mean,f1_std,covering_mean,covering_std,area_mean,area_std"
    );
    assert_eq!(read_sweep_csv(buf.as_slice()).unwrap(), rows);
    assert!(rows.iter().all(|r| r.f1_std == 0.0 && r.area_std == 0.0));
}

/// Validation loss of the untrained model and the best within ten epochs,
/// recorded from the first verified run on the reference data.
const GOLDEN_INITIAL_VAL: f64 = 0.11727345373598341;
const GOLDEN_BEST_VAL: f64 = -19.17088464582868;

#[test]
fn reference_data_improves_within_ten_epochs() {
    let splits = reference_splits();
    let model_cfg = ModelConfig {
        mask: MaskSpec::Causal,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let untrained = Model::init(model_cfg.clone()).unwrap();
    let mask = mask_for(&model_cfg, 64).unwrap();
    let initial = dataset_loss(&untrained, &splits.val, &mask, &cfg.loss).unwrap();
    let out = train(&model_cfg, &splits.train, &splits.val, &cfg).unwrap();
    assert!(out.best_val_loss < initial);
    assert!((initial - GOLDEN_INITIAL_VAL).abs() <= 1e-9 * initial.abs());
    assert!((out.best_val_loss - GOLDEN_BEST_VAL).abs() <= 1e-9 * GOLDEN_BEST_VAL.abs());
}
