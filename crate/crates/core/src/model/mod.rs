// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sequence models that map a `T x d` input to per-step change probabilities.
//!
//! Two architectures share one parameter container and checkpoint format:
//! a post-norm transformer encoder with a boolean attention mask, and a
//! single-layer gated recurrent unit that ignores the mask.

mod ops;
mod params;
mod recurrent;
mod transformer;

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CpdError, Result};
use crate::masks::{AttentionMask, MaskSpec};

pub use params::{load_checkpoint, save_checkpoint, Parameters, Tensor, CHECKPOINT_FORMAT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transformer,
    Recurrent,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Transformer => "transformer",
            Self::Recurrent => "rnn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = CpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "rnn" | "recurrent" | "gru" => Ok(Self::Recurrent),
            other => Err(CpdError::config(
                "model",
                format!("expected transformer or rnn, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    /// Ignored by the recurrent model.
    pub mask: MaskSpec,
    pub dropout: f64,
    pub param_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Transformer,
            input_dim: 8,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            ffn_dim: 64,
            mask: MaskSpec::None,
            dropout: 0.0,
            param_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                return Err(CpdError::config(name, "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CpdError::config(
                "n_heads",
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CpdError::config("dropout", "must lie in [0, 1)"));
        }
        self.mask.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m, f) = (self.input_dim, self.d_model, self.ffn_dim);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));
        match self.kind {
            ModelKind::Transformer => {
                push("input.w".into(), &[d, m]);
                push("input.b".into(), &[m]);
                for l in 0..self.n_layers {
                    for p in ["q", "k", "v", "o"] {
                        push(format!("layer{l}.attn.{p}.w"), &[m, m]);
                        push(format!("layer{l}.attn.{p}.b"), &[m]);
                    }
                    push(format!("layer{l}.ln1.gain"), &[m]);
                    push(format!("layer{l}.ln1.bias"), &[m]);
                    push(format!("layer{l}.ffn1.w"), &[m, f]);
                    push(format!("layer{l}.ffn1.b"), &[f]);
                    push(format!("layer{l}.ffn2.w"), &[f, m]);
                    push(format!("layer{l}.ffn2.b"), &[m]);
                    push(format!("layer{l}.ln2.gain"), &[m]);
                    push(format!("layer{l}.ln2.bias"), &[m]);
                }
            }
            ModelKind::Recurrent => {
                for g in ["z", "r", "n"] {
                    push(format!("gru.{g}.w"), &[d, m]);
                    push(format!("gru.{g}.u"), &[m, m]);
                    push(format!("gru.{g}.b"), &[m]);
                }
            }
        }
        push("head.w".into(), &[m, 1]);
        push("head.b".into(), &[1]);
        out
    }
}

/// Per-step change probabilities, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbSeries(pub Vec<f64>);

impl ProbSeries {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Intermediate values retained by a forward pass for the backward pass.
pub enum ForwardCache {
    Transformer(transformer::Cache),
    Recurrent(recurrent::Cache),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// Fresh model with seeded `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    fn check_input(&self, x: &ArrayView2<f64>, mask: &AttentionMask) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(CpdError::Validation(format!(
                "input width {} != model input_dim {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(CpdError::Validation("empty input sequence".into()));
        }
        if self.config.kind == ModelKind::Transformer && mask.size() != x.nrows() {
            return Err(CpdError::Validation(format!(
                "mask size {} != sequence length {}",
                mask.size(),
                x.nrows()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CpdError::Validation("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Inference pass (dropout disabled).
    pub fn forward(&self, x: ArrayView2<f64>, mask: &AttentionMask) -> Result<ProbSeries> {
        Ok(self.forward_cached(x, mask, None)?.0)
    }

    /// Forward pass that keeps what [`Model::backward_cached`] needs.
    /// Dropout is applied only when `dropout_rng` is given.
    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        mask: &AttentionMask,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ProbSeries, ForwardCache)> {
        self.check_input(&x, mask)?;
        let (p, cache) = match self.config.kind {
            ModelKind::Transformer => {
                let (p, c) = transformer::forward(&self.config, &self.params, x, mask, dropout_rng)?;
                (p, ForwardCache::Transformer(c))
            }
            ModelKind::Recurrent => {
                let (p, c) = recurrent::forward(&self.config, &self.params, x)?;
                (p, ForwardCache::Recurrent(c))
            }
        };
        Ok((ProbSeries(p), cache))
    }

    /// Gradients of a scalar loss given `upstream = dL/dp`.
    pub fn backward_cached(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Parameters> {
        let grads = match cache {
            ForwardCache::Transformer(c) => transformer::backward(&self.config, &self.params, c, upstream)?,
            ForwardCache::Recurrent(c) => recurrent::backward(&self.config, &self.params, c, upstream)?,
        };
        if let Some(t) = grads.tensors().iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(CpdError::numeric(&t.name, "non-finite gradient"));
        }
        Ok(grads)
    }

    pub fn backward(&self, x: ArrayView2<f64>, mask: &AttentionMask, upstream: &[f64]) -> Result<Parameters> {
        let (p, cache) = self.forward_cached(x, mask, None)?;
        if upstream.len() != p.len() {
            return Err(CpdError::Validation(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                p.len()
            )));
        }
        if upstream.iter().any(|v| !v.is_finite()) {
            return Err(CpdError::Validation("upstream gradient is not finite".into()));
        }
        self.backward_cached(&cache, upstream)
    }
}
