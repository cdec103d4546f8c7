// SPDX-License-Identifier: MIT OR Apache-2.0

//! Markdown rendering of comparison tables and sweeps.
//!
//! Cells read `mean ± std`. Within each loss type the best value of a metric
//! is bold and the second best is underlined.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CpdError, Result};
use crate::losses::LossKind;
use crate::metrics::{aggregate, MetricValues, MetricsReport};
use crate::model::ModelKind;
use crate::training::{table1_rows, RunConfig, SweepRow, TableRow};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// Rows are ranked against others with the same key.
    pub group: String,
    pub mean: Option<MetricValues>,
    pub std: Option<MetricValues>,
    pub runs: usize,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Column {
    F1,
    Covering,
    Area,
}

impl Column {
    const ALL: [Column; 3] = [Column::F1, Column::Covering, Column::Area];

    fn title(self) -> &'static str {
        match self {
            Column::F1 => "F1",
            Column::Covering => "Covering",
            Column::Area => "Area",
        }
    }

    fn value(self, m: &MetricValues) -> f64 {
        match self {
            Column::F1 => m.f1,
            Column::Covering => m.covering,
            Column::Area => m.area,
        }
    }

    fn higher_is_better(self) -> bool {
        self != Column::Area
    }

    fn precision(self) -> usize {
        match self {
            Column::Area => 2,
            _ => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rank {
    Best,
    Second,
    Other,
}

/// Ranks one metric column within each group; ties share a rank.
fn rank_column(rows: &[ReportRow], col: Column) -> Vec<Rank> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(m) = &r.mean {
            let v = col.value(m);
            if v.is_finite() {
                groups.entry(&r.group).or_default().push(v);
            }
        }
    }
    for vals in groups.values_mut() {
        vals.sort_by(|a, b| {
            if col.higher_is_better() {
                b.total_cmp(a)
            } else {
                a.total_cmp(b)
            }
        });
        vals.dedup();
    }
    rows.iter()
        .map(|r| {
            let Some(v) = r.mean.as_ref().map(|m| col.value(m)).filter(|v| v.is_finite()) else {
                return Rank::Other;
            };
            let vals = &groups[r.group.as_str()];
            if vals.first() == Some(&v) {
                Rank::Best
            } else if vals.get(1) == Some(&v) {
                Rank::Second
            } else {
                Rank::Other
            }
        })
        .collect()
}

pub fn render_markdown(rows: &[ReportRow]) -> String {
    let ranks: Vec<Vec<Rank>> = Column::ALL.iter().map(|&c| rank_column(rows, c)).collect();
    let mut out = String::from("| Configuration |");
    for c in Column::ALL {
        out.push_str(&format!(" {} |", c.title()));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(Column::ALL.len()));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&format!("| {} |", row.label));
        for (ci, &col) in Column::ALL.iter().enumerate() {
            let cell = match (&row.mean, &row.std) {
                (Some(m), Some(s)) => {
                    let p = col.precision();
                    let text = format!("{:.p$} ± {:.p$}", col.value(m), col.value(s));
                    match ranks[ci][i] {
                        Rank::Best => format!("**{text}**"),
                        Rank::Second => format!("<u>{text}</u>"),
                        Rank::Other => text,
                    }
                }
                _ => "failed".to_string(),
            };
            out.push_str(&format!(" {cell} |"));
        }
        out.push('\n');
    }
    out
}

pub fn rows_from_table(table: &[TableRow]) -> Vec<ReportRow> {
    table
        .iter()
        .map(|r| ReportRow {
            label: r.label.clone(),
            group: r.loss.to_string(),
            mean: r.mean,
            std: r.std,
            runs: r.runs,
            error: r.error.clone(),
        })
        .collect()
}

pub fn rows_from_sweep(rows: &[SweepRow]) -> Vec<ReportRow> {
    rows.iter()
        .map(|r| {
            let mk = |f1, covering, area| MetricValues {
                f1,
                precision: f64::NAN,
                recall: f64::NAN,
                covering,
                area,
            };
            let failed = r.f1_mean.is_nan();
            ReportRow {
                label: format!("mask size {}", r.mask_size),
                group: "sweep".to_string(),
                mean: (!failed).then(|| mk(r.f1_mean, r.covering_mean, r.area_mean)),
                std: (!failed).then(|| mk(r.f1_std, r.covering_std, r.area_std)),
                runs: 0,
                error: failed.then(|| "run failed".to_string()),
            }
        })
        .collect()
}

/// Human-readable label for a run configuration, using the comparison-table
/// label when one matches.
pub fn config_label(cfg: &RunConfig) -> String {
    let mask = match cfg.model.kind {
        ModelKind::Recurrent => crate::masks::MaskSpec::None,
        ModelKind::Transformer => cfg.model.mask,
    };
    table1_rows(&cfg.model)
        .into_iter()
        .find(|r| r.model.kind == cfg.model.kind && r.model.mask == mask && r.loss.kind == cfg.train.loss.kind)
        .map(|r| r.label)
        .unwrap_or_else(|| format!("{}, mask {}, {} loss", cfg.model.kind, mask, cfg.train.loss.kind))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).map_err(|e| CpdError::io(path, e))?;
    Ok(serde_json::from_str(&body)?)
}

/// Groups run directories by configuration label and aggregates each group.
pub fn rows_from_run_dirs(dirs: &[&Path]) -> Result<Vec<ReportRow>> {
    let mut groups: Vec<(String, LossKind, Vec<MetricsReport>)> = Vec::new();
    for dir in dirs {
        let cfg: RunConfig = read_json(&dir.join("config.json"))?;
        let report: MetricsReport = read_json(&dir.join("report.json"))?;
        let label = config_label(&cfg);
        match groups.iter_mut().find(|g| g.0 == label) {
            Some(g) => g.2.push(report),
            None => groups.push((label, cfg.train.loss.kind, vec![report])),
        }
    }
    groups
        .into_iter()
        .map(|(label, loss, reports)| {
            let agg = aggregate(&reports)?;
            Ok(ReportRow {
                label,
                group: loss.to_string(),
                mean: Some(agg.mean),
                std: Some(agg.std),
                runs: agg.runs,
                error: None,
            })
        })
        .collect()
}

/// Loads report rows from run directories, a `table.json`, or a sweep CSV.
pub fn load_rows(inputs: &[&Path]) -> Result<Vec<ReportRow>> {
    if inputs.is_empty() {
        return Err(CpdError::config("in", "at least one input is required"));
    }
    let (dirs, files): (Vec<&Path>, Vec<&Path>) = inputs.iter().partition(|p| p.is_dir());
    let mut rows = rows_from_run_dirs(&dirs)?;
    for f in files {
        match f.extension().and_then(|e| e.to_str()) {
            Some("csv") => {
                let file = fs::File::open(f).map_err(|e| CpdError::io(f, e))?;
                rows.extend(rows_from_sweep(&crate::training::read_sweep_csv(file)?));
            }
            Some("json") => {
                let table: Vec<TableRow> = read_json(f)?;
                rows.extend(rows_from_table(&table));
            }
            _ => {
                return Err(CpdError::config(
                    "in",
                    format!(
                        "{} is neither a run directory, a .json table, nor a .csv sweep",
                        f.display()
                    ),
                ))
            }
        }
    }
    Ok(rows)
}
