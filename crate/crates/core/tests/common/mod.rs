// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

pub mod oracles;

use cpd_attention::losses::{batch_loss, LossConfig};
use cpd_attention::masks::{build, MaskSpec};
use cpd_attention::model::{Model, ModelConfig, ModelKind};
use ndarray::Array2;

pub fn smooth_input(t: usize, d: usize, phase: f64) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |(i, j)| ((i * 5 + j * 11) as f64 * 0.29 + phase).sin() * 1.3)
}

pub fn small_config(kind: ModelKind, mask: MaskSpec, seed: u64) -> ModelConfig {
    ModelConfig {
        kind,
        input_dim: 3,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 16,
        mask,
        dropout: 0.0,
        param_seed: seed,
    }
}

fn loss_of(model: &Model, x: &Array2<f64>, spec: &MaskSpec, theta: usize, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let mask = build(spec, x.nrows()).unwrap();
    let p = model.forward(x.view(), &mask).unwrap();
    let out = batch_loss(&[(p.as_slice(), theta)], cfg).unwrap();
    (out.total, out.grads.into_iter().next().unwrap())
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over all parameters.
pub fn max_relative_grad_error(
    model: &Model,
    x: &Array2<f64>,
    theta: usize,
    cfg: &LossConfig,
    eps: f64,
    floor: f64,
) -> f64 {
    let spec = model.config.mask;
    let mask = build(&spec, x.nrows()).unwrap();
    let (_, upstream) = loss_of(model, x, &spec, theta, cfg);
    let analytic = model.backward(x.view(), &mask, &upstream).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (ti, tensor) in model.params.tensors().iter().enumerate() {
        for k in 0..tensor.data.len() {
            let orig = tensor.data[k];
            probe.params.tensors_mut()[ti].data[k] = orig + eps;
            let plus = loss_of(&probe, x, &spec, theta, cfg).0;
            probe.params.tensors_mut()[ti].data[k] = orig - eps;
            let minus = loss_of(&probe, x, &spec, theta, cfg).0;
            probe.params.tensors_mut()[ti].data[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.tensors()[ti].data[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// The seeded mean-shift reference dataset (N=200, T=64, d=8, shift 2, balance 0.5)
/// with the fixed 80/10/10 split.
pub fn reference_splits() -> cpd_attention::training::Splits {
    use cpd_attention::data::{generate, split, GeneratorConfig};
    let ds = generate(&GeneratorConfig {
        n: 200,
        length: 64,
        dim: 8,
        seed: 42,
        balance: 0.5,
        shift_magnitude: 2.0,
        noise_sigma: 1.0,
        ..Default::default()
    })
    .unwrap();
    let (train, val, test) = split(&ds, [0.8, 0.1, 0.1], 0).unwrap();
    cpd_attention::training::Splits { train, val, test }
}
