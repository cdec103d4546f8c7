// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stopping-time losses for change point detection and the BCE baseline.
//!
//! All positions are 0-based. A sequence without a change has `theta == T`.
//! Compared with 1-based bookkeeping, the false-alarm loss is shifted by a
//! per-sequence constant, which changes neither its gradient nor its argmin.
//!
//! Given per-step alarm probabilities `q_t` on a window `[a, b]`, the alarm
//! fires at `t` with probability `q_t * prod_{k=a}^{t-1} (1 - q_k)` and never
//! fires with probability `prod_{k=a}^{b} (1 - q_k)`. Both losses are
//! expectations of a cost under this distribution.

use serde::{Deserialize, Serialize};

use crate::error::{CpdError, Result};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cpd,
    Bce,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cpd => "cpd",
            Self::Bce => "bce",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = CpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpd" => Ok(Self::Cpd),
            "bce" => Ok(Self::Bce),
            other => Err(CpdError::config("loss", format!("expected cpd or bce, got `{other}`"))),
        }
    }
}

/// Sign convention for the no-alarm term of the false-alarm loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaSign {
    /// `-(E[alarm time])`: later false alarms give lower loss.
    Corrected,
    /// The no-alarm term enters with a minus sign before negation.
    Verbatim,
}

impl std::fmt::Display for FaSign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Corrected => "corrected",
            Self::Verbatim => "verbatim",
        })
    }
}

impl std::str::FromStr for FaSign {
    type Err = CpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(Self::Corrected),
            "verbatim" => Ok(Self::Verbatim),
            other => Err(CpdError::config(
                "fa_sign",
                format!("expected corrected or verbatim, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Delay horizon (0-based). `None` means `T - 1`.
    pub t_max: Option<usize>,
    /// Weight `c` of the false-alarm term.
    pub fa_weight: f64,
    pub fa_sign: FaSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Cpd,
            t_max: None,
            fa_weight: 1.0,
            fa_sign: FaSign::Corrected,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, length: usize) -> Result<()> {
        if let Some(t) = self.t_max {
            if t + 1 > length {
                return Err(CpdError::config(
                    "t_max",
                    format!("must be <= T-1 = {}; got {t}", length.saturating_sub(1)),
                ));
            }
        }
        if !(self.fa_weight >= 0.0 && self.fa_weight.is_finite()) {
            return Err(CpdError::config(
                "fa_weight",
                format!("must be finite and non-negative; got {}", self.fa_weight),
            ));
        }
        Ok(())
    }

    pub fn horizon(&self, length: usize) -> usize {
        self.t_max.unwrap_or(length - 1)
    }
}

/// Loss value and its gradient with respect to the raw probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn clamp_prob(p: f64) -> (f64, f64) {
    if p < PROB_EPS {
        (PROB_EPS, 0.0)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, 0.0)
    } else {
        (p, 1.0)
    }
}

/// Expected cost of the first alarm in `[a, b]` and its gradient.
///
/// `cost(t)` is paid when the alarm fires at `t`; `no_alarm_cost` when it never fires.
/// Uses the backward recursion `G_t = q_t c(t) + (1 - q_t) G_{t+1}` with
/// `G_{b+1} = no_alarm_cost`, so `dE/dq_t = S_t (c(t) - G_{t+1})` where `S_t` is
/// the survival probability up to `t`.
fn expected_stop_cost(p: &[f64], a: usize, b: usize, cost: impl Fn(usize) -> f64, no_alarm_cost: f64) -> LossGrad {
    let mut grad = vec![0.0; p.len()];
    let mut q = Vec::with_capacity(b + 1 - a);
    let mut dq = Vec::with_capacity(b + 1 - a);
    for &pt in &p[a..=b] {
        let (v, d) = clamp_prob(pt);
        q.push(v);
        dq.push(d);
    }
    let mut survival = Vec::with_capacity(q.len());
    let mut s = 1.0;
    for &qt in &q {
        survival.push(s);
        s *= 1.0 - qt;
    }
    let mut g_next = no_alarm_cost;
    for i in (0..q.len()).rev() {
        let t = a + i;
        let c = cost(t);
        grad[t] = survival[i] * (c - g_next) * dq[i];
        g_next = q[i] * c + (1.0 - q[i]) * g_next;
    }
    LossGrad { value: g_next, grad }
}

/// Expected detection delay over `[theta, t_max]`, capped at `t_max + 1 - theta`.
pub fn delay_loss(p: &[f64], theta: usize, t_max: usize) -> Result<LossGrad> {
    let t_len = p.len();
    if t_max >= t_len {
        return Err(CpdError::Domain(format!("t_max {t_max} >= T {t_len}")));
    }
    if theta >= t_len {
        return Err(CpdError::Domain(
            "delay loss is undefined for a sequence without a change".into(),
        ));
    }
    if theta > t_max {
        return Err(CpdError::Domain(format!(
            "change {theta} lies beyond the horizon {t_max}"
        )));
    }
    let cap = (t_max + 1 - theta) as f64;
    Ok(expected_stop_cost(p, theta, t_max, |t| (t - theta) as f64, cap))
}

/// Negated expected false-alarm time over `[0, min(theta, T-1)]`.
pub fn fa_loss(p: &[f64], theta: usize, sign: FaSign) -> Result<LossGrad> {
    let t_len = p.len();
    if t_len == 0 {
        return Err(CpdError::Domain("empty probability series".into()));
    }
    let end = theta.min(t_len - 1);
    let horizon = (end + 1) as f64;
    let no_alarm = match sign {
        FaSign::Corrected => horizon,
        FaSign::Verbatim => -horizon,
    };
    let mut lg = expected_stop_cost(p, 0, end, |t| t as f64, no_alarm);
    lg.value = -lg.value;
    lg.grad.iter_mut().for_each(|g| *g = -*g);
    Ok(lg)
}

/// Per-step BCE against the step target `1{t >= theta}`, averaged over `T`.
pub fn bce_loss(p: &[f64], theta: usize) -> LossGrad {
    let t_len = p.len() as f64;
    let mut value = 0.0;
    let grad = p
        .iter()
        .enumerate()
        .map(|(t, &pt)| {
            let (q, dq) = clamp_prob(pt);
            if t >= theta {
                value -= q.ln();
                -dq / (q * t_len)
            } else {
                value -= (1.0 - q).ln();
                dq / ((1.0 - q) * t_len)
            }
        })
        .collect();
    LossGrad {
        value: value / t_len,
        grad,
    }
}

/// Batch loss with per-sequence gradients. For the CPD kind `delay` and `fa`
/// hold the two terms of `total = delay + c * fa`; for BCE both are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub delay: f64,
    pub fa: f64,
    pub grads: Vec<Vec<f64>>,
    /// Set when a CPD batch contained no change within the horizon.
    pub no_change_in_batch: bool,
}

/// Loss over `(probabilities, theta)` pairs.
///
/// Delay is averaged over change-bearing sequences (`theta <= t_max`) and the
/// false-alarm term over every sequence.
pub fn batch_loss(batch: &[(&[f64], usize)], cfg: &LossConfig) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(CpdError::Domain("empty batch".into()));
    }
    let t_len = batch[0].0.len();
    if batch.iter().any(|(p, _)| p.len() != t_len) {
        return Err(CpdError::Validation("batch sequences differ in length".into()));
    }
    cfg.validate(t_len)?;
    let n = batch.len() as f64;
    match cfg.kind {
        LossKind::Bce => {
            let mut total = 0.0;
            let grads = batch
                .iter()
                .map(|(p, theta)| {
                    let lg = bce_loss(p, *theta);
                    total += lg.value;
                    lg.grad.into_iter().map(|g| g / n).collect()
                })
                .collect();
            Ok(BatchLoss {
                total: total / n,
                delay: 0.0,
                fa: 0.0,
                grads,
                no_change_in_batch: false,
            })
        }
        LossKind::Cpd => {
            let t_max = cfg.horizon(t_len);
            let n_delay = batch.iter().filter(|(_, th)| *th <= t_max).count();
            let mut delay = 0.0;
            let mut fa = 0.0;
            let mut grads = Vec::with_capacity(batch.len());
            for (p, theta) in batch {
                let f = fa_loss(p, *theta, cfg.fa_sign)?;
                fa += f.value;
                let mut g: Vec<f64> = f.grad.iter().map(|v| cfg.fa_weight * v / n).collect();
                if *theta <= t_max {
                    let dl = delay_loss(p, *theta, t_max)?;
                    delay += dl.value;
                    let scale = 1.0 / n_delay as f64;
                    g.iter_mut().zip(&dl.grad).for_each(|(a, b)| *a += scale * b);
                }
                grads.push(g);
            }
            let delay = if n_delay > 0 { delay / n_delay as f64 } else { 0.0 };
            let fa = fa / n;
            Ok(BatchLoss {
                total: delay + cfg.fa_weight * fa,
                delay,
                fa,
                grads,
                no_change_in_batch: n_delay == 0,
            })
        }
    }
}
