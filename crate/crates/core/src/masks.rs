// SPDX-License-Identifier: MIT OR Apache-2.0

//! Boolean attention masks. A `true` entry at `(i, j)` means query position `i`
//! may not attend to key position `j`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CpdError, Result};

/// Additive penalty for masked logits. `exp(-LARGE)` is exactly zero while the
/// value itself stays finite.
pub const MASK_PENALTY: f64 = f64::MAX / 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskSpec {
    None,
    /// Lower triangular: attend to self and the past.
    Causal,
    /// Band of total width `n` around the diagonal.
    Band(usize),
    /// `Band(k)` plus the `n` most recent past positions.
    BandPlusWindow {
        k: usize,
        n: usize,
    },
    /// `Band(k)` plus causal access to the first `n` positions.
    BandPlusPrefix {
        k: usize,
        n: usize,
    },
}

/// Offsets `i - j` covered by a band of width `n`: `-(n/2) ..= (n-1)/2`.
fn band_contains(width: usize, i: usize, j: usize) -> bool {
    let diff = i as i64 - j as i64;
    let lo = -((width / 2) as i64);
    let hi = ((width.saturating_sub(1)) / 2) as i64;
    (lo..=hi).contains(&diff)
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: usize| {
            if v == 0 {
                Err(CpdError::config(name, "mask size must be >= 1"))
            } else {
                Ok(())
            }
        };
        match *self {
            Self::None | Self::Causal => Ok(()),
            Self::Band(n) => check("n", n),
            Self::BandPlusWindow { k, n } | Self::BandPlusPrefix { k, n } => {
                check("k", k)?;
                check("n", n)
            }
        }
    }

    /// Whether query `i` may attend to key `j` (0-based).
    pub fn attends(&self, i: usize, j: usize) -> bool {
        match *self {
            Self::None => true,
            Self::Causal => j <= i,
            Self::Band(n) => band_contains(n, i, j),
            Self::BandPlusWindow { k, n } => band_contains(k, i, j) || (j < i && i - j <= n),
            Self::BandPlusPrefix { k, n } => band_contains(k, i, j) || (j < n && j <= i),
        }
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::Causal => write!(f, "causal"),
            Self::Band(n) => write!(f, "band:{n}"),
            Self::BandPlusWindow { k, n } => write!(f, "bandwin:{k},{n}"),
            Self::BandPlusPrefix { k, n } => write!(f, "bandprefix:{k},{n}"),
        }
    }
}

impl FromStr for MaskSpec {
    type Err = CpdError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            CpdError::config(
                "mask",
                format!("`{s}` is not one of none, causal, band:<n>, bandwin:<k>,<n>, bandprefix:<k>,<n>"),
            )
        };
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let pair = |v: &str| -> Result<(usize, usize)> {
            let (k, n) = v.split_once(',').ok_or_else(bad)?;
            Ok((num(k)?, num(n)?))
        };
        let spec = match s.split_once(':') {
            None if s == "none" => Self::None,
            None if s == "causal" => Self::Causal,
            Some(("band", n)) => Self::Band(num(n)?),
            Some(("bandwin", rest)) => {
                let (k, n) = pair(rest)?;
                Self::BandPlusWindow { k, n }
            }
            Some(("bandprefix", rest)) => {
                let (k, n) = pair(rest)?;
                Self::BandPlusPrefix { k, n }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for MaskSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.size..(i + 1) * self.size]
    }

    /// Row-major `T x T` additive logits: 0 where attended, `-MASK_PENALTY` where masked.
    pub fn to_additive(&self) -> Vec<f64> {
        self.bits.iter().map(|&m| if m { -MASK_PENALTY } else { 0.0 }).collect()
    }
}

pub fn build(spec: &MaskSpec, length: usize) -> Result<AttentionMask> {
    if length < 1 {
        return Err(CpdError::config("length", "mask size must be >= 1"));
    }
    spec.validate()?;
    let mut bits = Vec::with_capacity(length * length);
    for i in 0..length {
        for j in 0..length {
            bits.push(!spec.attends(i, j));
        }
    }
    let mask = AttentionMask { size: length, bits };
    for i in 0..length {
        if mask.row(i).iter().all(|&m| m) {
            return Err(CpdError::Internal(format!(
                "mask {spec} has a fully masked row {i} at T={length}"
            )));
        }
        if mask.is_masked(i, i) {
            return Err(CpdError::Internal(format!("mask {spec} masks diagonal entry {i}")));
        }
    }
    Ok(mask)
}
