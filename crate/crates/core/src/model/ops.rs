// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{CpdError, Result};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn positional_encoding(length: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((length, width), |(t, i)| {
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / width as f64);
        let angle = t as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `x W + b` for row-major activations.
pub fn affine(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>, gain: &ArrayView1<f64>, bias: &ArrayView1<f64>) -> (Array2<f64>, LayerNormCache) {
    let width = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / width;
    let mut xhat = x - &mean.view().insert_axis(Axis(1));
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / width;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    xhat *= &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dx` and accumulates gain/bias gradients.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gain: &ArrayView1<f64>,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Array2<f64> {
    let width = dy.ncols() as f64;
    for (row_dy, row_xh) in dy.outer_iter().zip(cache.xhat.outer_iter()) {
        for j in 0..dy.ncols() {
            dgain[j] += row_dy[j] * row_xh[j];
            dbias[j] += row_dy[j];
        }
    }
    let dxhat = dy * gain;
    let mean_d = dxhat.sum_axis(Axis(1)) / width;
    let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / width;
    let mut dx = dxhat;
    Zip::from(dx.rows_mut())
        .and(cache.xhat.rows())
        .and(&mean_d)
        .and(&mean_dx)
        .and(&cache.inv_std)
        .for_each(|mut row, xh, &md, &mdx, &is| {
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|d, &h| *d = is * (*d - md - h * mdx));
        });
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            z += e;
            e
        });
        row /= z;
    }
}

/// `dS = P * (dP - rowsum(dP * P))`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = dp.clone();
    for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
        Zip::from(&mut drow).and(&prow).for_each(|d, &q| *d = q * (*d - dot));
    }
    ds
}

pub fn add_outer_product(acc: &mut [f64], a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    // acc (a.ncols x b.ncols) += a^T b
    let prod = a.t().dot(b);
    acc.iter_mut().zip(prod.iter()).for_each(|(x, y)| *x += y);
}

pub fn add_column_sums(acc: &mut [f64], a: &Array2<f64>) {
    for row in a.rows() {
        acc.iter_mut().zip(row.iter()).for_each(|(x, y)| *x += y);
    }
}

pub fn ensure_finite(a: &Array2<f64>, location: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CpdError::numeric(location, "non-finite activation"))
    }
}
