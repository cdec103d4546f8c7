// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-layer GRU baseline. The candidate state uses `(r * h) U_n`.

use ndarray::{Array1, Array2, ArrayView2};

use super::ops::{affine, ensure_finite, sigmoid};
use super::{ModelConfig, Parameters};
use crate::error::Result;

const Z: usize = 0;
const R: usize = 3;
const N: usize = 6;
const HEAD: usize = 9;

pub struct Cache {
    x: Array2<f64>,
    /// Row `t` is the state before step `t`; row `T` is the final state.
    states: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    p: Vec<f64>,
}

pub fn forward(cfg: &ModelConfig, params: &Parameters, x: ArrayView2<f64>) -> Result<(Vec<f64>, Cache)> {
    let t_len = x.nrows();
    let width = cfg.d_model;
    let gate_in = |g: usize| affine(&x, &params.at(g).mat(), &params.at(g + 2).vec());
    let (xz, xr, xn) = (gate_in(Z), gate_in(R), gate_in(N));
    let (uz, ur, un) = (params.at(Z + 1).mat(), params.at(R + 1).mat(), params.at(N + 1).mat());

    let mut states = Array2::zeros((t_len + 1, width));
    let mut z = Array2::zeros((t_len, width));
    let mut r = Array2::zeros((t_len, width));
    let mut n = Array2::zeros((t_len, width));
    for t in 0..t_len {
        let h = states.row(t).to_owned();
        let zt = (&xz.row(t) + &h.dot(&uz)).mapv(sigmoid);
        let rt = (&xr.row(t) + &h.dot(&ur)).mapv(sigmoid);
        let nt = (&xn.row(t) + &(&rt * &h).dot(&un)).mapv(f64::tanh);
        let next = &nt + &(&zt * &(&h - &nt));
        states.row_mut(t + 1).assign(&next);
        z.row_mut(t).assign(&zt);
        r.row_mut(t).assign(&rt);
        n.row_mut(t).assign(&nt);
    }
    ensure_finite(&states, "recurrent cell")?;
    let hidden = states.slice(ndarray::s![1.., ..]);
    let logits = affine(&hidden, &params.at(HEAD).mat(), &params.at(HEAD + 1).vec());
    ensure_finite(&logits, "output head")?;
    let p: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
    Ok((
        p.clone(),
        Cache {
            x: x.to_owned(),
            states,
            z,
            r,
            n,
            p,
        },
    ))
}

fn add_outer(acc: &mut [f64], a: &Array1<f64>, b: &Array1<f64>) {
    let cols = b.len();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            acc[i * cols + j] += ai * bj;
        }
    }
}

fn add_vec(acc: &mut [f64], a: &Array1<f64>) {
    acc.iter_mut().zip(a.iter()).for_each(|(x, y)| *x += y);
}

pub fn backward(cfg: &ModelConfig, params: &Parameters, cache: &Cache, upstream: &[f64]) -> Result<Parameters> {
    let mut grads = Parameters::zeros(cfg);
    let t_len = cache.p.len();
    let width = cfg.d_model;
    let head_w = params.at(HEAD).mat();
    let (uz, ur, un) = (params.at(Z + 1).mat(), params.at(R + 1).mat(), params.at(N + 1).mat());

    let dlogits: Vec<f64> = (0..t_len)
        .map(|t| upstream[t] * cache.p[t] * (1.0 - cache.p[t]))
        .collect();
    let head_col = head_w.column(0).to_owned();

    let mut dnext = Array1::<f64>::zeros(width);
    for t in (0..t_len).rev() {
        let h_prev = cache.states.row(t).to_owned();
        let h_out = cache.states.row(t + 1);
        {
            let gw = &mut grads.at_mut(HEAD).data;
            for j in 0..width {
                gw[j] += dlogits[t] * h_out[j];
            }
        }
        grads.at_mut(HEAD + 1).data[0] += dlogits[t];
        let dh = &dnext + &(&head_col * dlogits[t]);

        let (zt, rt, nt) = (cache.z.row(t), cache.r.row(t), cache.n.row(t));
        let xt = cache.x.row(t).to_owned();

        let dn_pre = Array1::from_shape_fn(width, |j| dh[j] * (1.0 - zt[j]) * (1.0 - nt[j] * nt[j]));
        let dz_pre = Array1::from_shape_fn(width, |j| dh[j] * (h_prev[j] - nt[j]) * zt[j] * (1.0 - zt[j]));
        let rh = &rt * &h_prev;
        let drh = dn_pre.dot(&un.t());
        let dr_pre = Array1::from_shape_fn(width, |j| drh[j] * h_prev[j] * rt[j] * (1.0 - rt[j]));

        let mut dprev = &dh * &zt;
        dprev += &(&drh * &rt);
        dprev += &dz_pre.dot(&uz.t());
        dprev += &dr_pre.dot(&ur.t());

        for (g, dpre, hin) in [(Z, &dz_pre, &h_prev), (R, &dr_pre, &h_prev), (N, &dn_pre, &rh)] {
            add_outer(&mut grads.at_mut(g).data, &xt, dpre);
            add_outer(&mut grads.at_mut(g + 1).data, hin, dpre);
            add_vec(&mut grads.at_mut(g + 2).data, dpre);
        }
        dnext = dprev;
    }
    Ok(grads)
}
