// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-norm transformer encoder with an additive attention mask and a
//! per-position sigmoid head.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{
    add_column_sums, add_outer_product, affine, ensure_finite, gelu, gelu_grad, layer_norm, layer_norm_backward,
    positional_encoding, sigmoid, softmax_rows, softmax_rows_backward, LayerNormCache,
};
use super::{ModelConfig, Parameters};
use crate::error::Result;
use crate::masks::AttentionMask;

const TENSORS_PER_LAYER: usize = 16;

// Offsets inside one layer block.
const Q_W: usize = 0;
const K_W: usize = 2;
const V_W: usize = 4;
const O_W: usize = 6;
const LN1_G: usize = 8;
const FFN1_W: usize = 10;
const FFN2_W: usize = 12;
const LN2_G: usize = 14;

fn layer_base(l: usize) -> usize {
    2 + l * TENSORS_PER_LAYER
}

fn head_index(cfg: &ModelConfig) -> usize {
    layer_base(cfg.n_layers)
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln1: LayerNormCache,
    normed1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

pub struct Cache {
    x: Array2<f64>,
    layers: Vec<LayerCache>,
    last: Array2<f64>,
    p: Vec<f64>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < rate { 0.0 } else { keep })
}

pub fn forward(
    cfg: &ModelConfig,
    params: &Parameters,
    x: ArrayView2<f64>,
    mask: &AttentionMask,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<f64>, Cache)> {
    let t_len = x.nrows();
    let (width, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let additive = Array2::from_shape_vec((t_len, t_len), mask.to_additive()).expect("mask is square");
    let rate = if rng.is_some() { cfg.dropout } else { 0.0 };

    let mut h = affine(&x, &params.at(0).mat(), &params.at(1).vec());
    h += &positional_encoding(t_len, width);
    ensure_finite(&h, "input projection")?;

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let base = layer_base(l);
        let w = |off: usize| params.at(base + off).mat();
        let b = |off: usize| params.at(base + off + 1).vec();

        let q = affine(&h.view(), &w(Q_W), &b(Q_W));
        let k = affine(&h.view(), &w(K_W), &b(K_W));
        let v = affine(&h.view(), &w(V_W), &b(V_W));
        let mut context = Array2::zeros((t_len, width));
        let mut probs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            scores += &additive;
            softmax_rows(&mut scores);
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let mut attn = affine(&context.view(), &w(O_W), &b(O_W));
        let attn_drop = (rate > 0.0).then(|| {
            let m = dropout_mask(rng.as_deref_mut().unwrap(), t_len, width, rate);
            attn *= &m;
            m
        });
        let residual1 = &h + &attn;
        let (normed1, ln1) = layer_norm(
            &residual1,
            &params.at(base + LN1_G).vec(),
            &params.at(base + LN1_G + 1).vec(),
        );
        ensure_finite(&normed1, &format!("layer {l} attention"))?;

        let ffn_pre = affine(&normed1.view(), &w(FFN1_W), &b(FFN1_W));
        let ffn_act = ffn_pre.mapv(gelu);
        let mut ffn_out = affine(&ffn_act.view(), &w(FFN2_W), &b(FFN2_W));
        let ffn_drop = (rate > 0.0).then(|| {
            let m = dropout_mask(rng.as_deref_mut().unwrap(), t_len, width, rate);
            ffn_out *= &m;
            m
        });
        let residual2 = &normed1 + &ffn_out;
        let (out, ln2) = layer_norm(
            &residual2,
            &params.at(base + LN2_G).vec(),
            &params.at(base + LN2_G + 1).vec(),
        );
        ensure_finite(&out, &format!("layer {l} feed-forward"))?;

        layers.push(LayerCache {
            input: std::mem::replace(&mut h, out),
            q,
            k,
            v,
            probs,
            context,
            attn_drop,
            ln1,
            normed1,
            ffn_pre,
            ffn_act,
            ffn_drop,
            ln2,
        });
    }

    let hi = head_index(cfg);
    let logits = affine(&h.view(), &params.at(hi).mat(), &params.at(hi + 1).vec());
    ensure_finite(&logits, "output head")?;
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let cache = Cache {
        x: x.to_owned(),
        layers,
        last: h,
        p: p.clone(),
    };
    Ok((p, cache))
}

pub fn backward(cfg: &ModelConfig, params: &Parameters, cache: &Cache, upstream: &[f64]) -> Result<Parameters> {
    let mut grads = Parameters::zeros(cfg);
    let (width, heads, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let t_len = cache.p.len();

    let dlogits = Array2::from_shape_fn((t_len, 1), |(t, _)| {
        let p = cache.p[t];
        upstream[t] * p * (1.0 - p)
    });
    let hi = head_index(cfg);
    add_outer_product(&mut grads.at_mut(hi).data, &cache.last.view(), &dlogits.view());
    add_column_sums(&mut grads.at_mut(hi + 1).data, &dlogits);
    let mut dh_out = dlogits.dot(&params.at(hi).mat().t());

    for l in (0..cfg.n_layers).rev() {
        let c = &cache.layers[l];
        let base = layer_base(l);
        let w = |off: usize| params.at(base + off).mat();

        // Second sublayer: out = LN2(normed1 + ffn_out).
        let (dg, db) = grad_pair(&mut grads, base + LN2_G);
        let dres2 = layer_norm_backward(&dh_out, &c.ln2, &params.at(base + LN2_G).vec(), dg, db);
        let mut dnormed1 = dres2.clone();
        let mut dffn_out = dres2;
        if let Some(m) = &c.ffn_drop {
            dffn_out *= m;
        }
        add_outer_product(
            &mut grads.at_mut(base + FFN2_W).data,
            &c.ffn_act.view(),
            &dffn_out.view(),
        );
        add_column_sums(&mut grads.at_mut(base + FFN2_W + 1).data, &dffn_out);
        let mut dpre = dffn_out.dot(&w(FFN2_W).t());
        dpre.zip_mut_with(&c.ffn_pre, |d, &z| *d *= gelu_grad(z));
        add_outer_product(&mut grads.at_mut(base + FFN1_W).data, &c.normed1.view(), &dpre.view());
        add_column_sums(&mut grads.at_mut(base + FFN1_W + 1).data, &dpre);
        dnormed1 += &dpre.dot(&w(FFN1_W).t());

        // First sublayer: normed1 = LN1(input + attn).
        let (dg, db) = grad_pair(&mut grads, base + LN1_G);
        let dres1 = layer_norm_backward(&dnormed1, &c.ln1, &params.at(base + LN1_G).vec(), dg, db);
        let mut dinput = dres1.clone();
        let mut dattn = dres1;
        if let Some(m) = &c.attn_drop {
            dattn *= m;
        }
        add_outer_product(&mut grads.at_mut(base + O_W).data, &c.context.view(), &dattn.view());
        add_column_sums(&mut grads.at_mut(base + O_W + 1).data, &dattn);
        let dcontext = dattn.dot(&w(O_W).t());

        let mut dq = Array2::zeros((t_len, width));
        let mut dk = Array2::zeros((t_len, width));
        let mut dv = Array2::zeros((t_len, width));
        for hd in 0..heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let probs = &c.probs[hd];
            let dctx = dcontext.slice(cols);
            let dprobs = dctx.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&probs.t().dot(&dctx));
            let dscores = softmax_rows_backward(probs, &dprobs) * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
        }
        for (off, d) in [(Q_W, &dq), (K_W, &dk), (V_W, &dv)] {
            add_outer_product(&mut grads.at_mut(base + off).data, &c.input.view(), &d.view());
            add_column_sums(&mut grads.at_mut(base + off + 1).data, d);
            dinput += &d.dot(&w(off).t());
        }
        dh_out = dinput;
    }

    add_outer_product(&mut grads.at_mut(0).data, &cache.x.view(), &dh_out.view());
    add_column_sums(&mut grads.at_mut(1).data, &dh_out);
    Ok(grads)
}

/// Mutable gain and bias gradient buffers stored at `idx` and `idx + 1`.
fn grad_pair(grads: &mut Parameters, idx: usize) -> (&mut [f64], &mut [f64]) {
    let (left, right) = grads.tensors_mut().split_at_mut(idx + 1);
    (&mut left[idx].data, &mut right[0].data)
}
