// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force reference implementations written independently of the crate.

use std::collections::{BTreeSet, HashSet, VecDeque};

use cpd_attention::masks::MaskSpec;
use cpd_attention::model::Parameters;
use ndarray::Array2;

/// Expected cost of the first alarm in `p[a..=b]`, found by summing over
/// every binary alarm pattern in the window.
pub fn enumerate_first_alarm(p: &[f64], a: usize, b: usize, cost: impl Fn(usize) -> f64, none_cost: f64) -> f64 {
    let width = b + 1 - a;
    let mut total = 0.0;
    for pattern in 0u32..(1 << width) {
        let mut prob = 1.0;
        for i in 0..width {
            let q = p[a + i];
            prob *= if pattern >> i & 1 == 1 { q } else { 1.0 - q };
        }
        let value = if pattern == 0 {
            none_cost
        } else {
            cost(a + pattern.trailing_zeros() as usize)
        };
        total += prob * value;
    }
    total
}

pub fn delay_oracle(p: &[f64], theta: usize, t_max: usize) -> f64 {
    enumerate_first_alarm(p, theta, t_max, |t| (t - theta) as f64, (t_max + 1 - theta) as f64)
}

/// Negated expected false-alarm time; `verbatim` negates the no-alarm term first.
pub fn fa_oracle(p: &[f64], theta: usize, verbatim: bool) -> f64 {
    let end = theta.min(p.len() - 1);
    let no_alarm = (end + 1) as f64;
    let weighted = enumerate_first_alarm(p, 0, end, |t| t as f64, 0.0);
    let survival: f64 = p[..=end].iter().map(|q| 1.0 - q).product();
    if verbatim {
        -(weighted - no_alarm * survival)
    } else {
        -(weighted + no_alarm * survival)
    }
}

/// Unmasked (row, column) pairs, 1-based, built from the set definitions.
pub fn unmasked_pairs(spec: &MaskSpec, t: usize) -> HashSet<(i64, i64)> {
    let band = |n: usize| -> HashSet<i64> {
        let lo = -((n / 2) as i64);
        let hi = ((n as i64) - 1) / 2;
        (lo..=hi).collect()
    };
    let mut out = HashSet::new();
    for i in 1..=t as i64 {
        for j in 1..=t as i64 {
            let keep = match *spec {
                MaskSpec::None => true,
                MaskSpec::Causal => j <= i,
                MaskSpec::Band(n) => band(n).contains(&(i - j)),
                MaskSpec::BandPlusWindow { k, n } => band(k).contains(&(i - j)) || (1..=n as i64).contains(&(i - j)),
                MaskSpec::BandPlusPrefix { k, n } => band(k).contains(&(i - j)) || (j <= n as i64 && j <= i),
            };
            if keep {
                out.insert((i, j));
            }
        }
    }
    out
}

/// Positions whose input can influence output `target` through `layers`
/// rounds of attention over the unmasked pairs (0-based).
pub fn reachable_inputs(pairs: &HashSet<(i64, i64)>, target: usize, layers: usize) -> HashSet<usize> {
    let mut dist = vec![usize::MAX; 1 + pairs.iter().map(|p| p.0.max(p.1) as usize).max().unwrap_or(0)];
    let mut queue = VecDeque::new();
    dist[target + 1] = 0;
    queue.push_back(target + 1);
    while let Some(i) = queue.pop_front() {
        if dist[i] == layers {
            continue;
        }
        for &(r, c) in pairs {
            let (r, c) = (r as usize, c as usize);
            if r == i && dist[c] == usize::MAX {
                dist[c] = dist[i] + 1;
                queue.push_back(c);
            }
        }
    }
    (1..dist.len())
        .filter(|&i| dist[i] != usize::MAX)
        .map(|i| i - 1)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn f1_oracle(cases: &[(usize, Option<usize>)], length: usize, margin: usize) -> (Tally, f64) {
    let mut c = Tally::default();
    for &(theta, alarm) in cases {
        let has_change = theta != length;
        if !has_change {
            if alarm.is_some() {
                c.fp += 1;
            } else {
                c.tn += 1;
            }
            continue;
        }
        match alarm {
            None => c.fn_ += 1,
            Some(tau) => {
                let near = (tau as i64 - theta as i64).abs() <= margin as i64;
                if near {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                    c.fn_ += 1;
                }
            }
        }
    }
    let p = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (c, f1)
}

fn partition(boundary: Option<usize>, length: usize) -> Vec<BTreeSet<usize>> {
    match boundary {
        Some(b) if b < length => vec![(0..b).collect(), (b..length).collect()],
        _ => vec![(0..length).collect()],
    }
}

pub fn covering_oracle(theta: usize, alarm: Option<usize>, length: usize) -> f64 {
    let truth = partition(Some(theta), length);
    let pred = partition(alarm, length);
    let mut acc = 0.0;
    for g in truth.iter().filter(|g| !g.is_empty()) {
        let mut best: f64 = 0.0;
        for s in pred.iter().filter(|s| !s.is_empty()) {
            let inter = g.intersection(s).count() as f64;
            let union = g.union(s).count() as f64;
            best = best.max(inter / union);
        }
        acc += g.len() as f64 * best;
    }
    acc / length as f64
}

/// Detection-curve area from `(theta, probabilities)` pairs.
pub fn area_oracle(outputs: &[(usize, Vec<f64>)], thresholds: &[f64]) -> f64 {
    let first_above = |p: &[f64], from: usize, h: f64| (from..p.len()).find(|&t| p[t] > h);
    let mut points: Vec<(f64, f64)> = Vec::new();
    for &h in thresholds {
        let mut alarms = 0usize;
        let mut clean = 0usize;
        let mut delay_sum = 0.0;
        let mut changes = 0usize;
        for (theta, p) in outputs {
            if *theta == p.len() {
                clean += 1;
                if first_above(p, 0, h).is_some() {
                    alarms += 1;
                }
            } else {
                changes += 1;
                delay_sum += match first_above(p, *theta, h) {
                    Some(tau) => (tau - theta) as f64,
                    None => (p.len() - theta) as f64,
                };
            }
        }
        points.push((alarms as f64 / clean as f64, delay_sum / changes as f64));
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let curve: Vec<(f64, f64)> = xs
        .iter()
        .map(|&x| {
            let ys: Vec<f64> = points.iter().filter(|p| p.0 == x).map(|p| p.1).collect();
            (x, ys.iter().sum::<f64>() / ys.len() as f64)
        })
        .collect();
    let mut area = 0.0;
    for i in 1..curve.len() {
        area += (curve[i].0 - curve[i - 1].0) * (curve[i].1 + curve[i - 1].1) * 0.5;
    }
    area
}

/// Single-head, single-layer transformer forward pass written with scalar
/// loops; `masked[i][j]` removes key `j` from query `i`.
pub fn transformer_forward_oracle(params: &Parameters, x: &Array2<f64>, masked: &[Vec<bool>]) -> Vec<f64> {
    let w = |name: &str| params.get(name).expect(name);
    let (t, d) = x.dim();
    let m = w("input.b").data.len();
    let f = w("layer0.ffn1.b").data.len();

    let linear = |rows: &[Vec<f64>], wn: &str, bn: &str, out: usize| -> Vec<Vec<f64>> {
        let (wt, bt) = (w(wn), w(bn));
        let inp = rows[0].len();
        rows.iter()
            .map(|r| {
                (0..out)
                    .map(|o| bt.data[o] + (0..inp).map(|i| r[i] * wt.data[i * out + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let norm = |rows: &[Vec<f64>], g: &str, b: &str| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let mu = r.iter().sum::<f64>() / r.len() as f64;
                let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / r.len() as f64;
                r.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * w(g).data[i] + w(b).data[i])
                    .collect()
            })
            .collect()
    };

    let rows: Vec<Vec<f64>> = (0..t).map(|i| (0..d).map(|j| x[[i, j]]).collect()).collect();
    let mut h = linear(&rows, "input.w", "input.b", m);
    for (pos, row) in h.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / m as f64);
            let angle = pos as f64 * rate;
            *v += if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }

    let q = linear(&h, "layer0.attn.q.w", "layer0.attn.q.b", m);
    let k = linear(&h, "layer0.attn.k.w", "layer0.attn.k.b", m);
    let v = linear(&h, "layer0.attn.v.w", "layer0.attn.v.b", m);
    let mut ctx = vec![vec![0.0; m]; t];
    for i in 0..t {
        let allowed: Vec<usize> = (0..t).filter(|&j| !masked[i][j]).collect();
        let scores: Vec<f64> = allowed
            .iter()
            .map(|&j| (0..m).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (m as f64).sqrt())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
        for (a, &j) in allowed.iter().enumerate() {
            let weight = (scores[a] - top).exp() / z;
            for c in 0..m {
                ctx[i][c] += weight * v[j][c];
            }
        }
    }
    let attn = linear(&ctx, "layer0.attn.o.w", "layer0.attn.o.b", m);
    let sum1: Vec<Vec<f64>> = h
        .iter()
        .zip(&attn)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let n1 = norm(&sum1, "layer0.ln1.gain", "layer0.ln1.bias");
    let hidden: Vec<Vec<f64>> = linear(&n1, "layer0.ffn1.w", "layer0.ffn1.b", f)
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                .collect()
        })
        .collect();
    let ffn = linear(&hidden, "layer0.ffn2.w", "layer0.ffn2.b", m);
    let sum2: Vec<Vec<f64>> = n1
        .iter()
        .zip(&ffn)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let out = norm(&sum2, "layer0.ln2.gain", "layer0.ln2.bias");
    linear(&out, "head.w", "head.b", 1)
        .into_iter()
        .map(|r| 1.0 / (1.0 + (-r[0]).exp()))
        .collect()
}
