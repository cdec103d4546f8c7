// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{CpdError, Result};

pub const CHECKPOINT_FORMAT: &str = "cpd-ckpt";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn mat(&self) -> ArrayView2<'_, f64> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => unreachable!("tensors are rank 1 or 2"),
        };
        ArrayView2::from_shape((r, c), &self.data).expect("shape matches data")
    }

    pub fn vec(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data)
    }
}

/// Named tensors in the order given by [`ModelConfig::layout`].
///
/// Gradients use the same container.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    tensors: Vec<Tensor>,
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            tensors: config
                .layout()
                .into_iter()
                .map(|(name, shape)| Tensor::zeros(name, shape))
                .collect(),
        }
    }

    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.param_seed);
        let mut params = Self::zeros(config);
        for t in &mut params.tensors {
            if t.name.ends_with(".gain") {
                t.data.fill(1.0);
            } else if t.shape.len() == 2 {
                let bound = 1.0 / (t.shape[0] as f64).sqrt();
                t.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            }
        }
        params
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub(crate) fn at(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub(crate) fn at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element-wise `self += scale * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            debug_assert_eq!(a.name, b.name);
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = config.layout();
        if layout.len() != self.tensors.len() {
            return Err(CpdError::Validation(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if &t.name != name || &t.shape != shape {
                return Err(CpdError::Validation(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(CpdError::Validation(format!("tensor {} has wrong size", t.name)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(CpdError::Validation(format!("tensor {} is not finite", t.name)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &Parameters) -> Result<()> {
    let path = path.as_ref();
    let io = |e| CpdError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for t in params.tensors() {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, Parameters)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CpdError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse = |line: usize, text: std::io::Result<String>| -> Result<String> {
        text.map_err(|e| CpdError::Parse {
            line,
            message: e.to_string(),
        })
    };
    let first = parse(1, lines.next().unwrap_or(Ok(String::new())))?;
    let header: CheckpointHeader = serde_json::from_str(&first).map_err(|e| CpdError::Parse {
        line: 1,
        message: format!("bad checkpoint header: {e}"),
    })?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(CpdError::Parse {
            line: 1,
            message: format!("unsupported checkpoint {}/{}", header.format, header.version),
        });
    }
    let mut tensors = Vec::new();
    for (i, line) in lines.enumerate() {
        let text = parse(i + 2, line)?;
        if text.trim().is_empty() {
            continue;
        }
        let t: Tensor = serde_json::from_str(&text).map_err(|e| CpdError::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        tensors.push(t);
    }
    let params = Parameters::from_tensors(tensors);
    header.config.validate()?;
    params.check_layout(&header.config)?;
    Ok((header.config, params))
}
