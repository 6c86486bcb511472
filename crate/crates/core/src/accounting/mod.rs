//! Parameter budgets and Trainable/All ratios, computed by walking the same
//! parameter list the model builder materializes.

pub mod presets;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::freezing::{FreezeError, FreezeSpec};
use crate::model::{count_by_group, param_specs, Group, ModelConfig, ModelError, TaggedParam};

#[derive(Debug, Error)]
pub enum AccountingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Freeze(#[from] FreezeError),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamBudget {
    pub per_group: BTreeMap<Group, usize>,
    /// Parameters selected by each entry of the spec, keyed by its text.
    pub per_selector: BTreeMap<String, usize>,
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
}

/// Budget of an arbitrary parameter list. Every spec entry counts as
/// frozen, whatever epoch it is scheduled for.
pub fn budget_of<P: TaggedParam>(
    params: &[P],
    spec: &FreezeSpec,
) -> Result<ParamBudget, FreezeError> {
    let selected = spec.resolve(params)?;
    let mut per_selector = BTreeMap::new();
    let mut frozen = 0;
    for (entry, indices) in spec.entries().iter().zip(&selected) {
        let n: usize = indices.iter().map(|&i| params[i].numel()).sum();
        per_selector.insert(entry.to_string(), n);
        frozen += n;
    }
    let per_group = count_by_group(params);
    let total: usize = per_group.values().sum();
    let trainable = total - frozen;
    Ok(ParamBudget {
        per_group,
        per_selector,
        total,
        trainable,
        ratio: trainable as f64 / total as f64,
    })
}

pub fn count_budget(
    config: &ModelConfig,
    spec: &FreezeSpec,
) -> Result<ParamBudget, AccountingError> {
    Ok(budget_of(&param_specs(config)?, spec)?)
}

/// One requested row of a ratio table.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioQuery {
    pub preset: String,
    pub config: ModelConfig,
    pub spec: FreezeSpec,
    pub expected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub preset: String,
    pub spec: String,
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
    pub expected: Option<f64>,
    pub delta: Option<f64>,
}

impl RatioRow {
    /// True when no expectation is set or `|Δ| <= tolerance`.
    pub fn within(&self, tolerance: f64) -> bool {
        self.delta.is_none_or(|d| d <= tolerance + 1e-12)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RatioTable {
    pub rows: Vec<RatioRow>,
}

pub fn ratio_table(grid: &[RatioQuery]) -> Result<RatioTable, AccountingError> {
    let mut rows = Vec::with_capacity(grid.len());
    for q in grid {
        let b = count_budget(&q.config, &q.spec)?;
        rows.push(RatioRow {
            preset: q.preset.clone(),
            spec: q.spec.to_string(),
            total: b.total,
            trainable: b.trainable,
            ratio: b.ratio,
            expected: q.expected,
            delta: q.expected.map(|e| (b.ratio - e).abs()),
        });
    }
    Ok(RatioTable { rows })
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map(|v| format!("{v:.digits$}")).unwrap_or_default()
}

impl RatioTable {
    pub fn to_csv(&self) -> Result<String, AccountingError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "preset",
            "spec",
            "total",
            "trainable",
            "ratio",
            "expected",
            "abs_delta",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.preset.clone(),
                r.spec.clone(),
                r.total.to_string(),
                r.trainable.to_string(),
                format!("{:.6}", r.ratio),
                opt(r.expected, 2),
                opt(r.delta, 6),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Column-aligned plain text.
    pub fn to_text(&self) -> String {
        let header = [
            "preset",
            "spec",
            "total",
            "trainable",
            "ratio",
            "expected",
            "|Δ|",
        ];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.preset.clone(),
                    r.spec.clone(),
                    r.total.to_string(),
                    r.trainable.to_string(),
                    format!("{:.4}", r.ratio),
                    opt(r.expected, 2),
                    opt(r.delta, 4),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&header.map(String::from));
        for row in &body {
            line(row);
        }
        out
    }
}
