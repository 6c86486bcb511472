use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{Direction, Grid, Metric, Severity};
use super::{full_scale_budget, HarnessError};
use crate::train::RunRecord;

/// One (row, seed) run. The record's wall clock is zeroed; timings live
/// in [`GridReport::timings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub row: String,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
    /// Run ratio equals the accounting count for the trained config.
    pub ratio_matches_accounting: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub row: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub id: String,
    pub freeze: String,
    pub ratio_preset: Option<String>,
    pub full_total: Option<usize>,
    pub full_trainable: Option<usize>,
    pub full_ratio: Option<f64>,
    pub expected_ratio: Option<f64>,
    pub abs_delta: Option<f64>,
    pub ratio_ok: Option<bool>,
    /// Ratio of the trained desk model, when any run succeeded.
    pub desk_ratio: Option<f64>,
    pub runs: usize,
    pub failed: usize,
    pub median_bleu: Option<f64>,
    pub median_ppl: Option<f64>,
    pub median_epochs: Option<f64>,
}

impl RowSummary {
    pub fn median(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Bleu => self.median_bleu,
            Metric::Ppl => self.median_ppl,
            Metric::Epochs => self.median_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingResult {
    pub a: String,
    pub b: String,
    pub metric: Metric,
    pub direction: Direction,
    pub severity: Severity,
    pub value_a: Option<f64>,
    pub value_b: Option<f64>,
    /// Positive when the asserted direction holds.
    pub margin: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub name: String,
    pub ratio_tolerance: f64,
    pub rows: Vec<RowSummary>,
    pub runs: Vec<RunResult>,
    pub orderings: Vec<OrderingResult>,
    #[serde(skip)]
    pub timings: Vec<RunTiming>,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Compares the seed medians of two rows. A row compared with itself
/// passes with zero margin; otherwise the inequality must be strict.
pub fn assert_ordering(
    report: &GridReport,
    row_a: &str,
    row_b: &str,
    metric: Metric,
    direction: Direction,
) -> Result<OrderingResult, HarnessError> {
    let find = |id: &str| {
        report
            .rows
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| HarnessError::MissingRow(id.to_string()))
    };
    let (ra, rb) = (find(row_a)?, find(row_b)?);
    let (value_a, value_b) = (ra.median(metric), rb.median(metric));
    let margin = match (value_a, value_b) {
        (Some(a), Some(b)) => Some(match direction {
            Direction::Less => b - a,
            Direction::Greater => a - b,
        }),
        _ => None,
    };
    let pass = if row_a == row_b {
        value_a.is_some()
    } else {
        margin.is_some_and(|m| m > 0.0)
    };
    Ok(OrderingResult {
        a: row_a.to_string(),
        b: row_b.to_string(),
        metric,
        direction,
        severity: Severity::Trend,
        value_a,
        value_b,
        margin: if row_a == row_b {
            value_a.map(|_| 0.0)
        } else {
            margin
        },
        pass,
    })
}

type Outcome = (String, u64, Result<(RunRecord, bool), String>, f64);

pub(super) fn assemble(grid: &Grid, outcomes: Vec<Outcome>) -> Result<GridReport, HarnessError> {
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut timings = Vec::with_capacity(outcomes.len());
    for (row, seed, out, secs) in outcomes {
        timings.push(RunTiming {
            row: row.clone(),
            seed,
            wall_clock_secs: secs,
        });
        runs.push(match out {
            Ok((record, matches)) => RunResult {
                row,
                seed,
                record: Some(record.without_timing()),
                error: None,
                ratio_matches_accounting: Some(matches),
            },
            Err(e) => RunResult {
                row,
                seed,
                record: None,
                error: Some(e),
                ratio_matches_accounting: None,
            },
        });
    }
    runs.sort_by(|a, b| a.row.cmp(&b.row).then(a.seed.cmp(&b.seed)));
    let mut rows = Vec::with_capacity(grid.experiments.len());
    for e in &grid.experiments {
        let full = full_scale_budget(e)?;
        let mine: Vec<&RunResult> = runs.iter().filter(|r| r.row == e.id).collect();
        let records: Vec<&RunRecord> = mine.iter().filter_map(|r| r.record.as_ref()).collect();
        let collect = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Vec<f64> {
            records.iter().filter_map(|r| f(r)).collect()
        };
        let abs_delta = match (&full, e.expected_ratio) {
            (Some(b), Some(x)) => Some((b.ratio - x).abs()),
            _ => None,
        };
        rows.push(RowSummary {
            id: e.id.clone(),
            freeze: e.freeze.to_string(),
            ratio_preset: e.ratio_preset.clone(),
            full_total: full.as_ref().map(|b| b.total),
            full_trainable: full.as_ref().map(|b| b.trainable),
            full_ratio: full.as_ref().map(|b| b.ratio),
            expected_ratio: e.expected_ratio,
            abs_delta,
            ratio_ok: abs_delta.map(|d| d <= grid.ratio_tolerance + 1e-12),
            desk_ratio: records.first().map(|r| r.ratio),
            runs: mine.len(),
            failed: mine.iter().filter(|r| r.record.is_none()).count(),
            median_bleu: median(&collect(&|r| r.final_bleu)),
            median_ppl: median(&collect(&|r| Some(r.final_ppl))),
            median_epochs: median(&collect(&|r| Some(r.epochs_to_converge as f64))),
        });
    }
    let mut report = GridReport {
        name: grid.name.clone(),
        ratio_tolerance: grid.ratio_tolerance,
        rows,
        runs,
        orderings: Vec::new(),
        timings,
    };
    let ran = !report.runs.is_empty();
    if ran {
        for o in &grid.orderings {
            let mut r = assert_ordering(&report, &o.a, &o.b, o.metric, o.direction)?;
            r.severity = o.severity;
            report.orderings.push(r);
        }
    }
    Ok(report)
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn optf(x: Option<f64>, digits: usize) -> String {
    x.map(|v| format!("{v:.digits$}")).unwrap_or_default()
}

fn csv_string(
    write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| HarnessError::Encode(e.to_string()))?;
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Encode(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Encode(e.to_string()))
}

fn direction_symbol(d: Direction) -> &'static str {
    match d {
        Direction::Less => "<",
        Direction::Greater => ">",
    }
}

fn severity_name(s: Severity) -> &'static str {
    match s {
        Severity::Hard => "hard",
        Severity::Trend => "trend",
    }
}

impl GridReport {
    /// 0 when every check passes, 1 on any hard failure, 2 when only
    /// trend assertions failed.
    pub fn exit_code(&self) -> i32 {
        let hard = self
            .rows
            .iter()
            .any(|r| r.ratio_ok == Some(false) || r.failed > 0)
            || self
                .runs
                .iter()
                .any(|r| r.ratio_matches_accounting == Some(false))
            || self
                .orderings
                .iter()
                .any(|o| !o.pass && o.severity == Severity::Hard);
        if hard {
            1
        } else if self.orderings.iter().any(|o| !o.pass) {
            2
        } else {
            0
        }
    }

    pub fn row(&self, id: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn summary_csv(&self) -> Result<String, HarnessError> {
        csv_string(|w| {
            w.write_record([
                "id",
                "freeze",
                "ratio_preset",
                "full_total",
                "full_trainable",
                "full_ratio",
                "expected_ratio",
                "abs_delta",
                "ratio_ok",
                "desk_ratio",
                "runs",
                "failed",
                "median_bleu",
                "median_ppl",
                "median_epochs",
            ])?;
            for r in &self.rows {
                w.write_record([
                    r.id.clone(),
                    r.freeze.clone(),
                    opt(r.ratio_preset.clone()),
                    opt(r.full_total),
                    opt(r.full_trainable),
                    optf(r.full_ratio, 6),
                    optf(r.expected_ratio, 2),
                    optf(r.abs_delta, 6),
                    opt(r.ratio_ok),
                    optf(r.desk_ratio, 6),
                    r.runs.to_string(),
                    r.failed.to_string(),
                    optf(r.median_bleu, 6),
                    optf(r.median_ppl, 6),
                    optf(r.median_epochs, 1),
                ])?;
            }
            Ok(())
        })
    }

    /// Per-run reproducible fields, sorted by row and seed.
    pub fn runs_csv(&self) -> Result<String, HarnessError> {
        csv_string(|w| {
            let mut header = vec!["row", "seed", "status", "ratio_matches_accounting"];
            header.extend(RunRecord::CSV_HEADER);
            header.push("error");
            w.write_record(&header)?;
            for r in &self.runs {
                let mut rec = vec![
                    r.row.clone(),
                    r.seed.to_string(),
                    if r.record.is_some() { "ok" } else { "failed" }.to_string(),
                    opt(r.ratio_matches_accounting),
                ];
                match &r.record {
                    Some(x) => rec.extend(x.csv_record()),
                    None => rec.extend(std::iter::repeat_n(
                        String::new(),
                        RunRecord::CSV_HEADER.len(),
                    )),
                }
                rec.push(opt(r.error.clone()));
                w.write_record(&rec)?;
            }
            Ok(())
        })
    }

    pub fn orderings_csv(&self) -> Result<String, HarnessError> {
        csv_string(|w| {
            w.write_record([
                "a",
                "b",
                "metric",
                "direction",
                "severity",
                "value_a",
                "value_b",
                "margin",
                "pass",
            ])?;
            for o in &self.orderings {
                w.write_record([
                    o.a.clone(),
                    o.b.clone(),
                    o.metric.as_str().to_string(),
                    direction_symbol(o.direction).to_string(),
                    severity_name(o.severity).to_string(),
                    optf(o.value_a, 6),
                    optf(o.value_b, 6),
                    optf(o.margin, 6),
                    o.pass.to_string(),
                ])?;
            }
            Ok(())
        })
    }

    pub fn timing_csv(&self) -> Result<String, HarnessError> {
        csv_string(|w| {
            w.write_record(["row", "seed", "wall_clock_secs"])?;
            for t in &self.timings {
                w.write_record([
                    t.row.clone(),
                    t.seed.to_string(),
                    format!("{:.3}", t.wall_clock_secs),
                ])?;
            }
            Ok(())
        })
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        serde_json::to_string_pretty(self).map_err(|e| HarnessError::Encode(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Encode(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("# {}\n\n", self.name);
        let _ = writeln!(out, "| row | freeze | preset | ratio | expected | abs Δ | ok | desk ratio | runs | failed | BLEU | PPL | epochs |");
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                r.id,
                r.freeze,
                opt(r.ratio_preset.clone()),
                optf(r.full_ratio, 4),
                optf(r.expected_ratio, 2),
                optf(r.abs_delta, 4),
                r.ratio_ok.map_or("", |ok| if ok { "pass" } else { "FAIL" }),
                optf(r.desk_ratio, 4),
                r.runs,
                r.failed,
                optf(r.median_bleu, 2),
                optf(r.median_ppl, 3),
                optf(r.median_epochs, 1),
            );
        }
        if !self.orderings.is_empty() {
            let _ = writeln!(
                out,
                "\n| assertion | metric | severity | a | b | margin | result |"
            );
            let _ = writeln!(out, "|---|---|---|---|---|---|---|");
            for o in &self.orderings {
                let _ = writeln!(
                    out,
                    "| {} {} {} | {} | {} | {} | {} | {} | {} |",
                    o.a,
                    direction_symbol(o.direction),
                    o.b,
                    o.metric.as_str(),
                    severity_name(o.severity),
                    optf(o.value_a, 3),
                    optf(o.value_b, 3),
                    optf(o.margin, 3),
                    if o.pass { "pass" } else { "FAIL" },
                );
            }
        }
        let failures: Vec<&RunResult> = self.runs.iter().filter(|r| r.error.is_some()).collect();
        if !failures.is_empty() {
            let _ = writeln!(out, "\nFailed runs:\n");
            for r in failures {
                let _ = writeln!(out, "- {} seed {}: {}", r.row, r.seed, opt(r.error.clone()));
            }
        }
        out
    }

    /// Writes every report file into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        let metrics = dir.join("metrics");
        std::fs::create_dir_all(&metrics).map_err(|e| HarnessError::io(&metrics, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))
        };
        write("summary.csv", self.summary_csv()?)?;
        write("runs.csv", self.runs_csv()?)?;
        write("orderings.csv", self.orderings_csv()?)?;
        write("timing.csv", self.timing_csv()?)?;
        write("report.md", self.to_markdown())?;
        write("report.json", self.to_json()?)?;
        for r in &self.runs {
            if let Some(rec) = &r.record {
                let p = metrics.join(format!("{}.seed{}.csv", r.row, r.seed));
                std::fs::write(&p, rec.metrics_csv()).map_err(|e| HarnessError::io(&p, e))?;
            }
        }
        Ok(())
    }

    pub fn read_from(dir: &Path) -> Result<Self, HarnessError> {
        let p = dir.join("report.json");
        let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        Self::from_json(&text)
    }
}
