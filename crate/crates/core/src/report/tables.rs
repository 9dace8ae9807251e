use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::calibration::ReliabilityBins;
use crate::ikd::{LadderReport, Method};

pub const LADDER_COLUMNS: [&str; 8] =
    ["step", "student", "teacher", "compression", "ece_ikd", "acc_ikd", "ece_ikd_plus", "acc_ikd_plus"];

/// One line of the paired comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub step: usize,
    pub student: String,
    pub teacher: Option<String>,
    pub compression: f64,
    pub ece_ikd: Option<f64>,
    pub acc_ikd: Option<f64>,
    pub ece_ikd_plus: Option<f64>,
    pub acc_ikd_plus: Option<f64>,
}

/// Base row plus one row per step. The base row's IKD+ cells hold `M0`
/// after the calibrated method's post-hoc map.
pub fn ladder_rows(report: &LadderReport) -> Vec<LadderRow> {
    let plain = report.run(Method::Ikd);
    let plus = report.calibrated_run();
    let base_plus = plus.and_then(|r| report.base.calibrated.iter().find(|(m, _)| *m == r.method)).map(|(_, c)| &c.metrics);
    let mut rows = vec![LadderRow {
        step: 0,
        student: report.base.model_id.clone(),
        teacher: None,
        compression: 1.0,
        ece_ikd: plain.map(|_| report.base.raw.ece),
        acc_ikd: plain.map(|_| report.base.raw.accuracy),
        ece_ikd_plus: base_plus.map(|m| m.ece),
        acc_ikd_plus: base_plus.map(|m| m.accuracy),
    }];
    let steps = plain.or(plus).map_or(0, |r| r.steps.len());
    for i in 0..steps {
        let a = plain.map(|r| &r.steps[i]);
        let b = plus.map(|r| &r.steps[i]);
        let any = a.or(b).expect("one run exists");
        rows.push(LadderRow {
            step: any.step,
            student: any.student_id.clone(),
            teacher: Some(any.teacher_id.clone()),
            compression: any.compression,
            ece_ikd: a.map(|s| s.ece),
            acc_ikd: a.map(|s| s.accuracy),
            ece_ikd_plus: b.map(|s| s.ece),
            acc_ikd_plus: b.map(|s| s.accuracy),
        });
    }
    rows
}

/// `x` to 4 significant digits followed by `x`, e.g. `2.000x`, `15.94x`.
pub fn format_compression(x: f64) -> String {
    if !(x.is_finite() && x > 0.0) {
        return format!("{x}x");
    }
    // the exponent after rounding to 4 significant digits fixes the decimals
    let sci = format!("{x:.3e}");
    let exp: i32 = sci.split('e').nth(1).and_then(|e| e.parse().ok()).unwrap_or(0);
    let decimals = (3 - exp).max(0) as usize;
    format!("{x:.decimals$}x")
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cells(r: &LadderRow) -> [String; 8] {
    [
        r.step.to_string(),
        r.student.clone(),
        r.teacher.clone().unwrap_or_default(),
        format_compression(r.compression),
        cell(r.ece_ikd),
        cell(r.acc_ikd),
        cell(r.ece_ikd_plus),
        cell(r.acc_ikd_plus),
    ]
}

pub fn write_ladder_csv<W: Write>(rows: &[LadderRow], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LADDER_COLUMNS)?;
    for r in rows {
        w.write_record(cells(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ladder_markdown<W: Write>(rows: &[LadderRow], mut out: W) -> Result<(), ReportError> {
    writeln!(out, "| {} |", LADDER_COLUMNS.join(" | "))?;
    writeln!(out, "|{}", "---|".repeat(LADDER_COLUMNS.len()))?;
    for r in rows {
        writeln!(out, "| {} |", cells(r).join(" | "))?;
    }
    Ok(())
}

/// Reads a table written by [`write_ladder_csv`]. Compression comes back at
/// its printed precision; every other value is exact.
pub fn parse_ladder_csv<R: Read>(input: R) -> Result<Vec<LadderRow>, ReportError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != LADDER_COLUMNS {
        return Err(ReportError::Table(format!("unexpected header {header:?}")));
    }
    let opt = |s: &str, line: usize| -> Result<Option<f64>, ReportError> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| ReportError::Table(format!("line {line}: `{s}` is not a number")))
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |what: &str| ReportError::Table(format!("line {line}: bad {what}"));
        let compression = rec[3].strip_suffix('x').and_then(|s| s.parse().ok()).ok_or_else(|| bad("compression"))?;
        rows.push(LadderRow {
            step: rec[0].parse().map_err(|_| bad("step"))?,
            student: rec[1].to_string(),
            teacher: Some(rec[2].to_string()).filter(|t| !t.is_empty()),
            compression,
            ece_ikd: opt(&rec[4], line)?,
            acc_ikd: opt(&rec[5], line)?,
            ece_ikd_plus: opt(&rec[6], line)?,
            acc_ikd_plus: opt(&rec[7], line)?,
        });
    }
    Ok(rows)
}

pub fn emit_ladder_table<W: Write>(report: &LadderReport, format: super::Format, out: W) -> Result<(), ReportError> {
    let rows = ladder_rows(report);
    match format {
        super::Format::Csv => write_ladder_csv(&rows, out),
        super::Format::Md => write_ladder_markdown(&rows, out),
    }
}

pub fn emit_reliability<W: Write>(bins: &ReliabilityBins, out: W) -> Result<(), ReportError> {
    Ok(bins.write_csv(out)?)
}
