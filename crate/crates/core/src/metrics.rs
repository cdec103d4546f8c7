// SPDX-License-Identifier: MIT OR Apache-2.0

//! Detection metrics: F1 with a matching margin, segmentation Covering, and the
//! area under the (false-alarm rate, mean delay) detection curve.
//!
//! Every function takes 0-based change indices with `T` as the no-change sentinel.

use serde::{Deserialize, Serialize};

use crate::error::{CpdError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub margin: usize,
    /// Number of evenly spaced thresholds `k / K` for the detection curve.
    pub grid_size: usize,
    pub f1_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            margin: 5,
            grid_size: 100,
            f1_threshold: 0.5,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(CpdError::config("grid_size", "must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.f1_threshold) {
            return Err(CpdError::config(
                "threshold",
                format!("must lie in [0, 1); got {}", self.f1_threshold),
            ));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> Vec<f64> {
        (0..self.grid_size).map(|k| k as f64 / self.grid_size as f64).collect()
    }
}

/// First position with `p_t > threshold`.
pub fn alarm_time(p: &[f64], threshold: f64) -> Option<usize> {
    p.iter().position(|&v| v > threshold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 over `(theta, alarm)` pairs; `length` identifies the no-change sentinel.
///
/// A change-bearing sequence whose alarm falls outside the margin counts as
/// both a false positive and a false negative.
pub fn f1_score(predictions: &[(usize, Option<usize>)], length: usize, margin: usize) -> F1Score {
    let mut c = Counts::default();
    for &(theta, alarm) in predictions {
        match (theta < length, alarm) {
            (true, Some(tau)) if tau.abs_diff(theta) <= margin => c.tp += 1,
            (true, Some(_)) => {
                c.fp += 1;
                c.fn_ += 1;
            }
            (true, None) => c.fn_ += 1,
            (false, Some(_)) => c.fp += 1,
            (false, None) => c.tn += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    F1Score {
        precision,
        recall,
        f1,
        counts: c,
    }
}

fn segments(boundary: usize, length: usize) -> Vec<(usize, usize)> {
    if boundary == 0 || boundary >= length {
        vec![(0, length)]
    } else {
        vec![(0, boundary), (boundary, length)]
    }
}

fn jaccard(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = a.1.max(b.1) - a.0.min(b.0);
    inter as f64 / union as f64
}

/// Covering of the two-segment ground truth by the alarm-induced partition.
pub fn covering(theta: usize, alarm: Option<usize>, length: usize) -> f64 {
    let truth = segments(theta, length);
    let pred = segments(alarm.unwrap_or(length), length);
    let total: f64 = truth
        .iter()
        .map(|&g| {
            let best = pred.iter().map(|&s| jaccard(g, s)).fold(0.0, f64::max);
            (g.1 - g.0) as f64 * best
        })
        .sum();
    total / length as f64
}

pub fn mean_covering(predictions: &[(usize, Option<usize>)], length: usize) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions
        .iter()
        .map(|&(theta, alarm)| covering(theta, alarm, length))
        .sum::<f64>()
        / predictions.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fa_rate: f64,
    pub mean_delay: f64,
}

/// Per-threshold operating point before sorting and merging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fa_rate: f64,
    pub mean_delay: f64,
}

pub fn operating_points(outputs: &[(usize, &[f64])], thresholds: &[f64]) -> Result<Vec<OperatingPoint>> {
    let (changes, clean): (Vec<_>, Vec<_>) = outputs.iter().partition(|(theta, p)| *theta < p.len());
    if changes.is_empty() {
        return Err(CpdError::Domain(
            "detection curve needs at least one change-bearing sequence".into(),
        ));
    }
    if clean.is_empty() {
        return Err(CpdError::Domain(
            "detection curve needs at least one no-change sequence".into(),
        ));
    }
    Ok(thresholds
        .iter()
        .map(|&h| {
            let fa = clean.iter().filter(|(_, p)| alarm_time(p, h).is_some()).count() as f64 / clean.len() as f64;
            let delay = changes
                .iter()
                .map(|(theta, p)| match alarm_time(&p[*theta..], h) {
                    Some(d) => d,
                    None => p.len() - theta,
                } as f64)
                .sum::<f64>()
                / changes.len() as f64;
            OperatingPoint {
                threshold: h,
                fa_rate: fa,
                mean_delay: delay,
            }
        })
        .collect())
}

/// Detection curve sorted by false-alarm rate and its trapezoidal area.
pub fn detection_area(outputs: &[(usize, &[f64])], thresholds: &[f64]) -> Result<(f64, Vec<CurvePoint>)> {
    let mut points = operating_points(outputs, thresholds)?;
    points.sort_by(|a, b| a.fa_rate.total_cmp(&b.fa_rate));
    let mut curve: Vec<CurvePoint> = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let fa = points[i].fa_rate;
        let mut j = i;
        let mut sum = 0.0;
        while j < points.len() && points[j].fa_rate == fa {
            sum += points[j].mean_delay;
            j += 1;
        }
        curve.push(CurvePoint {
            fa_rate: fa,
            mean_delay: sum / (j - i) as f64,
        });
        i = j;
    }
    let area = curve
        .windows(2)
        .map(|w| (w[1].fa_rate - w[0].fa_rate) * (w[0].mean_delay + w[1].mean_delay) / 2.0)
        .fold(0.0, |acc, x| acc + x);
    Ok((area, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub covering: f64,
    pub area: f64,
    pub counts: Counts,
    /// `[fa_rate, mean_delay]` pairs.
    pub curve: Vec<[f64; 2]>,
    pub config: MetricsConfig,
}

/// Evaluates model outputs given as `(theta, probabilities)` per sequence.
pub fn evaluate(outputs: &[(usize, &[f64])], cfg: &MetricsConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if outputs.is_empty() {
        return Err(CpdError::Domain("no predictions to evaluate".into()));
    }
    let length = outputs[0].1.len();
    if outputs.iter().any(|(_, p)| p.len() != length) {
        return Err(CpdError::Validation("outputs differ in length".into()));
    }
    let alarms: Vec<(usize, Option<usize>)> = outputs
        .iter()
        .map(|(theta, p)| (*theta, alarm_time(p, cfg.f1_threshold)))
        .collect();
    let f1 = f1_score(&alarms, length, cfg.margin);
    let covering = mean_covering(&alarms, length);
    let (area, curve) = detection_area(outputs, &cfg.thresholds())?;
    Ok(MetricsReport {
        f1: f1.f1,
        precision: f1.precision,
        recall: f1.recall,
        covering,
        area,
        counts: f1.counts,
        curve: curve.iter().map(|c| [c.fa_rate, c.mean_delay]).collect(),
        config: cfg.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub covering: f64,
    pub area: f64,
}

impl From<&MetricsReport> for MetricValues {
    fn from(r: &MetricsReport) -> Self {
        Self {
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
            covering: r.covering,
            area: r.area,
        }
    }
}

impl MetricValues {
    fn to_array(self) -> [f64; 5] {
        [self.f1, self.precision, self.recall, self.covering, self.area]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            f1: a[0],
            precision: a[1],
            recall: a[2],
            covering: a[3],
            area: a[4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: MetricValues,
    pub std: MetricValues,
    pub runs: usize,
}

/// Mean and population standard deviation of each scalar metric.
pub fn aggregate(reports: &[MetricsReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(CpdError::Domain("cannot aggregate zero reports".into()));
    }
    let n = reports.len() as f64;
    let values: Vec<[f64; 5]> = reports.iter().map(|r| MetricValues::from(r).to_array()).collect();
    // Shifted by the first run so identical runs reproduce their value exactly.
    let origin = values[0];
    let mut mean = [0.0; 5];
    for v in &values {
        for ((m, x), o) in mean.iter_mut().zip(v).zip(&origin) {
            *m += x - o;
        }
    }
    for (m, o) in mean.iter_mut().zip(&origin) {
        *m = o + *m / n;
    }
    let mut var = [0.0; 5];
    for v in &values {
        for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std = var.map(|s| (s / n).sqrt());
    Ok(Aggregate {
        mean: MetricValues::from_array(mean),
        std: MetricValues::from_array(std),
        runs: reports.len(),
    })
}
