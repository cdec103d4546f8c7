// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains one configuration on the seeded mean-shift reference data and
//! prints test metrics, train-split metrics and wall-clock time.
//!
//! cargo run --release --example desk_scale -- [mask] [seed] [loss] [model]

use std::time::Instant;

use cpd_attention::data::{generate, split, GeneratorConfig};
use cpd_attention::losses::{LossConfig, LossKind};
use cpd_attention::masks::MaskSpec;
use cpd_attention::model::{ModelConfig, ModelKind};
use cpd_attention::training::{evaluate_model, run, RunConfig, Splits, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let mask: MaskSpec = arg(0, "causal").parse()?;
    let seed: u64 = arg(1, "0").parse()?;
    let loss: LossKind = arg(2, "cpd").parse()?;
    let kind: ModelKind = arg(3, "transformer").parse()?;

    let ds = generate(&GeneratorConfig {
        n: 200,
        length: 64,
        dim: 8,
        seed: 42,
        shift_magnitude: 2.0,
        noise_sigma: 1.0,
        ..Default::default()
    })?;
    let (train, val, test) = split(&ds, [0.8, 0.1, 0.1], 0)?;
    let splits = Splits { train, val, test };
    let cfg = RunConfig {
        model: ModelConfig {
            kind,
            input_dim: 8,
            mask,
            param_seed: seed,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            seed,
            loss: LossConfig {
                kind: loss,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        },
        metrics: Default::default(),
    };
    let start = Instant::now();
    let res = run(&cfg, &splits, None)?;
    let secs = start.elapsed().as_secs_f64();
    let fit = evaluate_model(&res.outcome.model, &splits.train, &cfg.metrics)?;
    let r = &res.report;
    println!(
        "{kind} {mask} {loss} seed={seed}: epochs={} best={} test f1={:.3} covering={:.3} area={:.3} | train f1={:.3} covering={:.3} | {secs:.1}s",
        res.outcome.history.len(),
        res.outcome.best_epoch,
        r.f1,
        r.covering,
        r.area,
        fit.f1,
        fit.covering,
    );
    Ok(())
}
