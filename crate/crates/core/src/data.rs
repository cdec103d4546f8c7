// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic change-point datasets and their line-oriented JSON storage.
//!
//! Change points are stored 1-based with `T + 1` meaning "no change". Use
//! [`Sequence::theta`] to get the 0-based index (sentinel `T`) consumed by the
//! loss and metric code.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CpdError, Result};

pub const DATASET_FORMAT: &str = "cpd-dataset";
pub const DATASET_VERSION: u32 = 1;

const MORPH_LATENT_DIM: usize = 4;
const MORPH_HIDDEN_DIM: usize = 16;

// Reserved RNG streams; per-sequence streams are `id + 1`.
const ASSIGNMENT_STREAM: u64 = u64::MAX;
const DECODER_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: u64,
    /// Time-major `T x d` observations.
    pub values: Array2<f64>,
    /// 1-based change point, `T + 1` when the sequence has no change.
    pub change_point: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn has_change(&self) -> bool {
        self.change_point <= self.len()
    }

    /// 0-based change index; equals `T` for sequences without a change.
    pub fn theta(&self) -> usize {
        self.change_point - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub seed: u64,
    pub n: usize,
    pub balance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub length: usize,
    pub dim: usize,
    pub sequences: Vec<Sequence>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Builds a dataset after checking every sequence invariant.
    pub fn new(
        length: usize,
        dim: usize,
        sequences: Vec<Sequence>,
        kind: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let n = sequences.len();
        let changes = sequences.iter().filter(|s| s.change_point <= length).count();
        let balance = if n == 0 { 0.0 } else { changes as f64 / n as f64 };
        let ds = Self {
            length,
            dim,
            sequences,
            meta: DatasetMeta {
                kind: kind.into(),
                seed,
                n,
                balance,
            },
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_changes(&self) -> usize {
        self.sequences.iter().filter(|s| s.has_change()).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.dim == 0 {
            return Err(CpdError::Validation(format!(
                "dataset shape must be positive; got T={} d={}",
                self.length, self.dim
            )));
        }
        let mut ids = std::collections::HashSet::with_capacity(self.sequences.len());
        for s in &self.sequences {
            if s.values.dim() != (self.length, self.dim) {
                return Err(CpdError::Validation(format!(
                    "sequence {} has shape {:?}, expected ({}, {})",
                    s.id,
                    s.values.dim(),
                    self.length,
                    self.dim
                )));
            }
            if s.change_point == 0 || s.change_point > self.length + 1 {
                return Err(CpdError::Validation(format!(
                    "sequence {} has change_point {} outside 1..={}",
                    s.id,
                    s.change_point,
                    self.length + 1
                )));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(CpdError::Validation(format!(
                    "sequence {} contains non-finite values",
                    s.id
                )));
            }
            if !ids.insert(s.id) {
                return Err(CpdError::Validation(format!("duplicate sequence id {}", s.id)));
            }
        }
        if self.meta.n != self.sequences.len() {
            return Err(CpdError::Validation(format!(
                "meta.n = {} but {} sequences present",
                self.meta.n,
                self.sequences.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    MeanShift,
    Morph,
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanShift => "mean-shift",
            Self::Morph => "morph",
        })
    }
}

impl FromStr for GeneratorKind {
    type Err = CpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-shift" => Ok(Self::MeanShift),
            "morph" => Ok(Self::Morph),
            other => Err(CpdError::config(
                "kind",
                format!("expected mean-shift or morph, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub n: usize,
    pub length: usize,
    pub dim: usize,
    pub seed: u64,
    /// Fraction of sequences that contain a change.
    pub balance: f64,
    pub shift_magnitude: f64,
    pub noise_sigma: f64,
    /// Number of steps the morph transition takes to reach the second anchor.
    pub morph_width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::MeanShift,
            n: 1000,
            length: 64,
            dim: 8,
            seed: 0,
            balance: 0.5,
            shift_magnitude: 2.0,
            noise_sigma: 1.0,
            morph_width: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(CpdError::config("n", "must be >= 1"));
        }
        if self.length < 2 {
            return Err(CpdError::config("length", format!("must be >= 2; got {}", self.length)));
        }
        if self.dim < 1 {
            return Err(CpdError::config("dim", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(CpdError::config(
                "balance",
                format!("must lie in [0, 1]; got {}", self.balance),
            ));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(CpdError::config(
                "noise_sigma",
                format!("must be finite and > 0; got {}", self.noise_sigma),
            ));
        }
        if !self.shift_magnitude.is_finite() {
            return Err(CpdError::config("shift_magnitude", "must be finite"));
        }
        if self.morph_width < 1 {
            return Err(CpdError::config("morph_width", "must be >= 1"));
        }
        Ok(())
    }

    /// Inclusive 1-based range change points are drawn from.
    pub fn change_point_range(&self) -> (usize, usize) {
        (self.length.div_ceil(4), 3 * self.length / 4)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v = normal_vec(rng, d);
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Fixed random two-layer map from latent space to observations.
struct MorphDecoder {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl MorphDecoder {
    fn new(seed: u64, dim: usize) -> Self {
        let mut rng = stream_rng(seed, DECODER_STREAM);
        let mut mat = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let w1 = mat(
            MORPH_LATENT_DIM,
            MORPH_HIDDEN_DIM,
            1.5 / (MORPH_LATENT_DIM as f64).sqrt(),
        );
        let b1 = mat(1, MORPH_HIDDEN_DIM, 0.1).row(0).to_owned();
        let w2 = mat(MORPH_HIDDEN_DIM, dim, 2.0 / (MORPH_HIDDEN_DIM as f64).sqrt());
        let b2 = mat(1, dim, 0.1).row(0).to_owned();
        Self { w1, b1, w2, b2 }
    }

    fn decode(&self, z: &Array1<f64>) -> Array1<f64> {
        let h = (z.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        h.dot(&self.w2) + &self.b2
    }
}

fn generate_one(cfg: &GeneratorConfig, id: u64, with_change: bool, decoder: Option<&MorphDecoder>) -> Sequence {
    let (t_len, d) = (cfg.length, cfg.dim);
    let mut rng = stream_rng(cfg.seed, id + 1);
    let change_point = if with_change {
        let (lo, hi) = cfg.change_point_range();
        rng.random_range(lo..=hi)
    } else {
        t_len + 1
    };
    let theta = change_point - 1;
    let mut values = Array2::zeros((t_len, d));
    match cfg.kind {
        GeneratorKind::MeanShift => {
            let u = random_unit(&mut rng, d);
            for t in 0..t_len {
                let noise = normal_vec(&mut rng, d) * cfg.noise_sigma;
                let mut row = values.row_mut(t);
                row.assign(&noise);
                if t >= theta {
                    row.scaled_add(cfg.shift_magnitude, &u);
                }
            }
        }
        GeneratorKind::Morph => {
            let decoder = decoder.expect("morph generation requires a decoder");
            let z0 = normal_vec(&mut rng, MORPH_LATENT_DIM);
            let z1 = normal_vec(&mut rng, MORPH_LATENT_DIM);
            let width = cfg.morph_width as f64;
            for t in 0..t_len {
                let alpha = if t < theta {
                    0.0
                } else {
                    ((t - theta + 1) as f64 / width).min(1.0)
                };
                let z = &z0 * (1.0 - alpha) + &z1 * alpha;
                let x = decoder.decode(&z) + normal_vec(&mut rng, d) * cfg.noise_sigma;
                values.row_mut(t).assign(&x);
            }
        }
    }
    Sequence {
        id,
        values,
        change_point,
    }
}

/// Generates a dataset; the output is a pure function of `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n_change = (cfg.n as f64 * cfg.balance).round() as usize;
    let mut has_change = vec![false; cfg.n];
    has_change[..n_change].iter_mut().for_each(|c| *c = true);
    has_change.shuffle(&mut stream_rng(cfg.seed, ASSIGNMENT_STREAM));

    let decoder = (cfg.kind == GeneratorKind::Morph).then(|| MorphDecoder::new(cfg.seed, cfg.dim));
    let sequences: Vec<Sequence> = has_change
        .par_iter()
        .enumerate()
        .map(|(id, &c)| generate_one(cfg, id as u64, c, decoder.as_ref()))
        .collect();
    let mut ds = Dataset::new(cfg.length, cfg.dim, sequences, cfg.kind.to_string(), cfg.seed)?;
    ds.meta.balance = cfg.balance;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(rename = "T")]
    length: usize,
    d: usize,
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    change_point: usize,
    values: Vec<Vec<f64>>,
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let header = Header {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        length: ds.length,
        d: ds.dim,
        meta: ds.meta.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(|e| CpdError::io("<dataset>", e))?;
    for s in &ds.sequences {
        let rec = Record {
            id: s.id,
            change_point: s.change_point,
            values: s.values.outer_iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| CpdError::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or(CpdError::Parse {
        line: 1,
        message: "empty file, expected header".into(),
    })?;
    let first = first.map_err(|e| CpdError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let header: Header = serde_json::from_str(&first).map_err(|e| CpdError::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(CpdError::Parse {
            line: 1,
            message: format!(
                "unsupported format {}/{}, expected {DATASET_FORMAT}/{DATASET_VERSION}",
                header.format, header.version
            ),
        });
    }
    let (t_len, d) = (header.length, header.d);
    let mut sequences = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| CpdError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| CpdError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.values.len() != t_len {
            return Err(CpdError::Parse {
                line: lineno,
                message: format!("expected {t_len} rows, found {}", rec.values.len()),
            });
        }
        let mut flat = Vec::with_capacity(t_len * d);
        for (t, row) in rec.values.iter().enumerate() {
            if row.len() != d {
                return Err(CpdError::Parse {
                    line: lineno,
                    message: format!("row {t} has width {}, expected {d}", row.len()),
                });
            }
            flat.extend_from_slice(row);
        }
        let values = Array2::from_shape_vec((t_len, d), flat).map_err(|e| CpdError::Internal(e.to_string()))?;
        sequences.push(Sequence {
            id: rec.id,
            values,
            change_point: rec.change_point,
        });
    }
    let ds = Dataset {
        length: t_len,
        dim: d,
        sequences,
        meta: header.meta,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CpdError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset(ds, &mut w)?;
    w.flush().map_err(|e| CpdError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CpdError::io(path, e))?;
    read_dataset(BufReader::new(file))
}

/// Splits per-class counts by largest remainder so every part keeps the class ratio.
fn apportion(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Stratified, seeded train/validation/test split.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if fractions.iter().any(|f| f.is_nan() || *f <= 0.0) {
        return Err(CpdError::config("fractions", "all parts must be positive"));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CpdError::config("fractions", format!("must sum to 1; got {sum}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut change: Vec<usize> = Vec::new();
    let mut no_change: Vec<usize> = Vec::new();
    for (i, s) in ds.sequences.iter().enumerate() {
        if s.has_change() {
            change.push(i);
        } else {
            no_change.push(i);
        }
    }
    change.shuffle(&mut rng);
    no_change.shuffle(&mut rng);

    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in [&change, &no_change] {
        let counts = apportion(class.len(), &fractions);
        let mut start = 0;
        for (part, c) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&class[start..start + c]);
            start += c;
        }
    }
    const NAMES: [&str; 3] = ["train", "val", "test"];
    for (part, name) in parts.iter().zip(NAMES) {
        if part.is_empty() {
            return Err(CpdError::config(
                "fractions",
                format!("{name} part would be empty for {} sequences", ds.len()),
            ));
        }
    }
    let build = |idx: &Vec<usize>, name: &str| {
        let mut idx = idx.clone();
        idx.sort_by_key(|&i| ds.sequences[i].id);
        let seqs = idx.iter().map(|&i| ds.sequences[i].clone()).collect();
        Dataset::new(
            ds.length,
            ds.dim,
            seqs,
            format!("{}/{name}", ds.meta.kind),
            ds.meta.seed,
        )
    };
    let [a, b, c] = &parts;
    Ok((build(a, "train")?, build(b, "val")?, build(c, "test")?))
}
