// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic training, evaluation, and the multi-seed comparison protocol.

use std::fs;
use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CpdError, Result};
use crate::losses::{batch_loss, LossConfig, LossKind};
use crate::masks::{build, AttentionMask, MaskSpec};
use crate::metrics::{aggregate, evaluate, Aggregate, MetricsConfig, MetricsReport};
use crate::model::{save_checkpoint, Model, ModelConfig, ModelKind, Parameters};

/// Absolute loss above which a run is treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap.
    pub grad_clip: f64,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            patience: 10,
            seed: 0,
            loss: LossConfig::default(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(CpdError::config(name, "must be >= 1"));
            }
        }
        if self.patience > self.epochs {
            return Err(CpdError::config("patience", "must not exceed epochs"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CpdError::config("learning_rate", "must be finite and >= 0"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(CpdError::config("grad_clip", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CpdError::config("beta", "decay rates must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &Parameters, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads.tensors()).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p.data[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Parameters, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model restored to the best validation checkpoint.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// The recurrent model never reads its mask, so it always gets the trivial one.
pub fn mask_for(config: &ModelConfig, length: usize) -> Result<AttentionMask> {
    match config.kind {
        ModelKind::Transformer => build(&config.mask, length),
        ModelKind::Recurrent => build(&MaskSpec::None, length),
    }
}

fn check_compatible(model: &ModelConfig, ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(CpdError::config(what, "dataset is empty"));
    }
    if ds.dim != model.input_dim {
        return Err(CpdError::config(
            what,
            format!("data dimension {} != model input_dim {}", ds.dim, model.input_dim),
        ));
    }
    Ok(())
}

/// Model probabilities for every sequence, in dataset order.
pub fn predict(model: &Model, ds: &Dataset, mask: &AttentionMask) -> Result<Vec<Vec<f64>>> {
    ds.sequences
        .par_iter()
        .map(|s| model.forward(s.values.view(), mask).map(|p| p.0))
        .collect()
}

/// Loss of `model` over a whole dataset treated as one batch.
pub fn dataset_loss(model: &Model, ds: &Dataset, mask: &AttentionMask, loss: &LossConfig) -> Result<f64> {
    let probs = predict(model, ds, mask)?;
    let batch: Vec<(&[f64], usize)> = probs
        .iter()
        .zip(&ds.sequences)
        .map(|(p, s)| (p.as_slice(), s.theta()))
        .collect();
    Ok(batch_loss(&batch, loss)?.total)
}

pub fn evaluate_model(model: &Model, ds: &Dataset, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let mask = mask_for(&model.config, ds.length)?;
    let probs = predict(model, ds, &mask)?;
    let outputs: Vec<(usize, &[f64])> = ds
        .sequences
        .iter()
        .zip(&probs)
        .map(|(s, p)| (s.theta(), p.as_slice()))
        .collect();
    evaluate(&outputs, cfg)
}

fn batch_gradients(
    model: &Model,
    seqs: &[ArrayView2<f64>],
    thetas: &[usize],
    mask: &AttentionMask,
    loss: &LossConfig,
    dropout_seed: Option<(u64, u64)>,
) -> Result<(crate::losses::BatchLoss, Parameters)> {
    let forwards: Vec<_> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = dropout_seed.map(|(seed, step)| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(step);
                r.set_word_pos(i as u128 * (1 << 32));
                r
            });
            model.forward_cached(*x, mask, rng.as_mut())
        })
        .collect::<Result<_>>()?;
    let batch: Vec<(&[f64], usize)> = forwards
        .iter()
        .zip(thetas)
        .map(|((p, _), &th)| (p.as_slice(), th))
        .collect();
    let out = batch_loss(&batch, loss)?;
    let per_seq: Vec<Parameters> = forwards
        .par_iter()
        .zip(&out.grads)
        .map(|((_, cache), g)| model.backward_cached(cache, g))
        .collect::<Result<_>>()?;
    // Fixed-order reduction keeps results independent of the worker count.
    let mut total = Parameters::zeros(&model.config);
    for g in &per_seq {
        total.add_scaled(g, 1.0);
    }
    Ok((out, total))
}

pub fn train(model_cfg: &ModelConfig, train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(model_cfg, train_ds, "train data")?;
    check_compatible(model_cfg, val_ds, "validation data")?;
    if train_ds.length != val_ds.length {
        return Err(CpdError::config(
            "validation data",
            "sequence lengths differ from training data",
        ));
    }
    cfg.loss.validate(train_ds.length)?;

    let mask = mask_for(model_cfg, train_ds.length)?;
    let mut model = Model::init(model_cfg.clone())?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let use_dropout = model_cfg.dropout > 0.0;

    let mut history = Vec::new();
    let mut best_val = dataset_loss(&model, val_ds, &mask, &cfg.loss)?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let seqs: Vec<ArrayView2<f64>> = chunk.iter().map(|&i| train_ds.sequences[i].values.view()).collect();
            let thetas: Vec<usize> = chunk.iter().map(|&i| train_ds.sequences[i].theta()).collect();
            let dropout_seed = use_dropout.then_some((cfg.seed, step));
            let (out, mut grads) = batch_gradients(&model, &seqs, &thetas, &mask, &cfg.loss, dropout_seed)
                .map_err(|e| CpdError::numeric(format!("epoch {epoch} batch {bi}"), e.to_string()))?;
            for (term, v) in [("total", out.total), ("delay", out.delay), ("false-alarm", out.fa)] {
                if !v.is_finite() {
                    return Err(CpdError::numeric(
                        format!("epoch {epoch} batch {bi}"),
                        format!("{term} loss is {v}"),
                    ));
                }
            }
            if out.total.abs() > DIVERGENCE_LIMIT {
                return Err(CpdError::numeric(
                    format!("epoch {epoch} batch {bi}"),
                    format!("loss diverged to {}", out.total),
                ));
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut model.params, &grads);
            loss_sum += out.total;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches as f64;

        let val_loss = if epoch % cfg.eval_every == 0 {
            let v = dataset_loss(&model, val_ds, &mask, &cfg.loss)?;
            if !v.is_finite() {
                return Err(CpdError::numeric(
                    format!("epoch {epoch} validation"),
                    format!("loss is {v}"),
                ));
            }
            Some(v)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:?}");

        match val_loss {
            Some(v) if v < best_val => {
                best_val = v;
                best_params = model.params.clone();
                best_epoch = epoch;
                since_best = 0;
            }
            _ => since_best += 1,
        }
        if since_best >= cfg.patience {
            break;
        }
    }

    model.params = best_params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Data splits shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Trains, evaluates on the test split, and optionally writes the run directory.
pub fn run(cfg: &RunConfig, splits: &Splits, out_dir: Option<&Path>) -> Result<RunResult> {
    let outcome = train(&cfg.model, &splits.train, &splits.val, &cfg.train)?;
    let report = evaluate_model(&outcome.model, &splits.test, &cfg.metrics)?;
    if let Some(dir) = out_dir {
        write_run_dir(dir, cfg, &outcome, &report)?;
    }
    Ok(RunResult { outcome, report })
}

pub fn write_run_dir(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CpdError::io(dir, e))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| CpdError::io(path, e))
    };
    write("config.json", serde_json::to_string_pretty(cfg)? + "\n")?;
    write("report.json", serde_json::to_string_pretty(report)? + "\n")?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["epoch", "train_loss", "val_loss"])?;
    for r in &outcome.history {
        csv.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    let body = csv.into_inner().map_err(|e| CpdError::Internal(e.to_string()))?;
    write("history.csv", String::from_utf8(body).expect("csv is utf-8"))?;
    save_checkpoint(dir.join("best.ckpt"), &outcome.model.config, &outcome.model.params)
}

/// One configuration of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub label: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl RowSpec {
    pub fn new(label: impl Into<String>, kind: ModelKind, mask: MaskSpec, loss: LossKind, base: &ModelConfig) -> Self {
        Self {
            label: label.into(),
            model: ModelConfig {
                kind,
                mask,
                ..base.clone()
            },
            loss: LossConfig {
                kind: loss,
                ..LossConfig::default()
            },
        }
    }
}

/// The twelve configurations of the published comparison, in its row order.
pub fn table1_rows(base: &ModelConfig) -> Vec<RowSpec> {
    use LossKind::{Bce, Cpd};
    use ModelKind::{Recurrent, Transformer};
    let band_win = |k, n| MaskSpec::BandPlusWindow { k, n };
    vec![
        RowSpec::new("RNN-based, CPD loss", Recurrent, MaskSpec::None, Cpd, base),
        RowSpec::new("RNN-based, BCE loss", Recurrent, MaskSpec::None, Bce, base),
        RowSpec::new(
            "Transformer without mask, CPD loss",
            Transformer,
            MaskSpec::None,
            Cpd,
            base,
        ),
        RowSpec::new(
            "Transformer without mask, BCE loss",
            Transformer,
            MaskSpec::None,
            Bce,
            base,
        ),
        RowSpec::new(
            "Low-triangular mask, CPD loss",
            Transformer,
            MaskSpec::Causal,
            Cpd,
            base,
        ),
        RowSpec::new(
            "Low-triangular mask, BCE loss",
            Transformer,
            MaskSpec::Causal,
            Bce,
            base,
        ),
        RowSpec::new("2-diagonal mask, CPD loss", Transformer, MaskSpec::Band(2), Cpd, base),
        RowSpec::new("2-diagonal mask, BCE loss", Transformer, MaskSpec::Band(2), Bce, base),
        RowSpec::new("8-diagonal mask, CPD loss", Transformer, MaskSpec::Band(8), Cpd, base),
        RowSpec::new(
            "1-diag. + 8-lower-triang., BCE loss",
            Transformer,
            band_win(1, 8),
            Bce,
            base,
        ),
        RowSpec::new(
            "1-diag. + 8-lower-triang., CPD loss",
            Transformer,
            band_win(1, 8),
            Cpd,
            base,
        ),
        RowSpec::new(
            "3-diag. + 32-lower-triang., BCE loss",
            Transformer,
            band_win(3, 32),
            Bce,
            base,
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub model: ModelKind,
    pub mask: MaskSpec,
    pub loss: LossKind,
    pub runs: usize,
    pub mean: Option<crate::metrics::MetricValues>,
    pub std: Option<crate::metrics::MetricValues>,
    pub error: Option<String>,
}

impl TableRow {
    pub fn aggregate(&self) -> Option<Aggregate> {
        Some(Aggregate {
            mean: self.mean?,
            std: self.std?,
            runs: self.runs,
        })
    }
}

/// Runs every row `n_runs` times with seeds `seed, seed + 1, ...` and aggregates test metrics.
///
/// A failing run marks its row as failed without affecting other rows.
pub fn multi_run(
    rows: &[RowSpec],
    splits: &Splits,
    base: &TrainConfig,
    metrics: &MetricsConfig,
    n_runs: usize,
) -> Result<Vec<TableRow>> {
    if n_runs == 0 {
        return Err(CpdError::config("runs", "must be >= 1"));
    }
    let jobs: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|r| (0..n_runs as u64).map(move |k| (r, k)))
        .collect();
    let results: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(r, k)| {
            let row = &rows[r];
            let cfg = RunConfig {
                model: ModelConfig {
                    param_seed: base.seed + k,
                    ..row.model.clone()
                },
                train: TrainConfig {
                    seed: base.seed + k,
                    loss: row.loss.clone(),
                    ..base.clone()
                },
                metrics: metrics.clone(),
            };
            run(&cfg, splits, None).map(|r| r.report)
        })
        .collect();

    let mut out = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let mut reports = Vec::with_capacity(n_runs);
        let mut error = None;
        for res in &results[r * n_runs..(r + 1) * n_runs] {
            match res {
                Ok(rep) => reports.push(rep.clone()),
                Err(e) => {
                    error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        let agg = if error.is_none() {
            Some(aggregate(&reports)?)
        } else {
            None
        };
        if let Some(e) = &error {
            log::warn!("row `{}` failed: {e}", row.label);
        }
        out.push(TableRow {
            label: row.label.clone(),
            model: row.model.kind,
            mask: row.model.mask,
            loss: row.loss.kind,
            runs: n_runs,
            mean: agg.as_ref().map(|a| a.mean),
            std: agg.as_ref().map(|a| a.std),
            error,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepFamily {
    /// `band:<size>`.
    Band,
    /// `bandwin:<k>,<size>`.
    BandWindow { k: usize },
}

impl SweepFamily {
    pub fn mask(&self, size: usize) -> MaskSpec {
        match *self {
            Self::Band => MaskSpec::Band(size),
            Self::BandWindow { k } => MaskSpec::BandPlusWindow { k, n: size },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask_size: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub covering_mean: f64,
    pub covering_std: f64,
    pub area_mean: f64,
    pub area_std: f64,
}

/// Mask-size sweep; failed sizes are reported with NaN statistics.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    family: SweepFamily,
    sizes: &[usize],
    base_model: &ModelConfig,
    loss: &LossConfig,
    splits: &Splits,
    base_train: &TrainConfig,
    metrics: &MetricsConfig,
    n_runs: usize,
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(CpdError::config("sizes", "at least one size is required"));
    }
    let rows: Vec<RowSpec> = sizes
        .iter()
        .map(|&n| {
            let mask = family.mask(n);
            mask.validate()?;
            Ok(RowSpec {
                label: mask.to_string(),
                model: ModelConfig {
                    kind: ModelKind::Transformer,
                    mask,
                    ..base_model.clone()
                },
                loss: loss.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let table = multi_run(&rows, splits, base_train, metrics, n_runs)?;
    Ok(sizes
        .iter()
        .zip(table)
        .map(|(&mask_size, row)| {
            let nan = crate::metrics::MetricValues {
                f1: f64::NAN,
                precision: f64::NAN,
                recall: f64::NAN,
                covering: f64::NAN,
                area: f64::NAN,
            };
            let (m, s) = (row.mean.unwrap_or(nan), row.std.unwrap_or(nan));
            SweepRow {
                mask_size,
                f1_mean: m.f1,
                f1_std: s.f1,
                covering_mean: m.covering,
                covering_std: s.covering,
                area_mean: m.area,
                area_std: s.area,
            }
        })
        .collect())
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush().map_err(|e| CpdError::io("<sweep csv>", e))
}

pub fn read_sweep_csv<R: std::io::Read>(r: R) -> Result<Vec<SweepRow>> {
    let mut csv = csv::Reader::from_reader(r);
    csv.deserialize().map(|row| row.map_err(CpdError::from)).collect()
}
