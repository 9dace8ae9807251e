use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::ReportError;
use crate::calibration::{apply_calibration, probabilities, CalibrationMap};
use crate::data::{Dataset, Labels};
use crate::ikd::dataset_logits;
use crate::model::{Head, Model};

/// Per-class probabilities of one example before and after calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleBars {
    pub index: usize,
    /// True classes: one for multi-class data, the positive set otherwise.
    pub truth: Vec<usize>,
    pub uncalibrated: Vec<f64>,
    pub calibrated: Option<Vec<f64>>,
}

pub fn prediction_bars(model: &Model, ds: &Dataset, indices: &[usize], map: Option<&CalibrationMap>) -> Result<Vec<ExampleBars>, ReportError> {
    let subset = ds.subset(indices, ds.split);
    let logits = dataset_logits(model, &subset)?;
    let (c, head) = (model.structure.num_classes, model.structure.head);
    let raw = probabilities(&logits, c, head);
    let cal = map.map(|m| apply_calibration(m, &logits, c, head));
    Ok(indices
        .iter()
        .enumerate()
        .map(|(k, &index)| ExampleBars {
            index,
            truth: match &ds.labels {
                Labels::Classes { labels, .. } => vec![labels[index]],
                Labels::MultiHot { labels, .. } => (0..labels[index].len()).filter(|&j| labels[index][j]).collect(),
            },
            uncalibrated: raw[k * c..(k + 1) * c].to_vec(),
            calibrated: cal.as_ref().map(|p| p[k * c..(k + 1) * c].to_vec()),
        })
        .collect())
}

/// `class_names` padded with `class{i}` up to `c` entries.
pub fn resolve_class_names(names: Option<&[String]>, c: usize) -> Vec<String> {
    (0..c).map(|i| names.and_then(|n| n.get(i)).cloned().unwrap_or_else(|| format!("class{i}"))).collect()
}

/// Long format: one row per (example, class).
pub fn write_prediction_csv<W: Write>(bars: &[ExampleBars], names: &[String], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["example", "class", "name", "is_true", "uncalibrated", "calibrated"])?;
    for b in bars {
        for (j, p) in b.uncalibrated.iter().enumerate() {
            let cal = b.calibrated.as_ref().map(|c| c[j].to_string()).unwrap_or_default();
            w.write_record([
                b.index.to_string(),
                j.to_string(),
                names[j].clone(),
                u8::from(b.truth.contains(&j)).to_string(),
                p.to_string(),
                cal,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Horizontal bar chart: one group per class, grey for uncalibrated and blue
/// for calibrated probabilities.
pub fn prediction_svg(bars: &ExampleBars, names: &[String], head: Head) -> String {
    const ROW: f64 = 34.0;
    const LEFT: f64 = 120.0;
    const WIDTH: f64 = 300.0;
    let c = bars.uncalibrated.len();
    let height = 40.0 + ROW * c as f64 + 30.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        LEFT + WIDTH + 80.0
    );
    let kind = match head {
        Head::Softmax => "softmax",
        Head::Sigmoid => "sigmoid",
    };
    let _ = writeln!(s, r#"<text x="8" y="18">example {} ({kind})</text>"#, bars.index);
    for j in 0..c {
        let y = 32.0 + ROW * j as f64;
        let mark = if bars.truth.contains(&j) { " *" } else { "" };
        let _ = writeln!(s, r#"<text x="8" y="{}">{}{mark}</text>"#, y + 16.0, escape(&names[j]));
        let mut series = vec![(bars.uncalibrated[j], "#9e9e9e", 0.0)];
        if let Some(cal) = &bars.calibrated {
            series.push((cal[j], "#1f77b4", 13.0));
        }
        for (p, color, dy) in series {
            let _ = writeln!(
                s,
                r#"<rect x="{LEFT}" y="{}" width="{:.2}" height="12" fill="{color}"/><text x="{:.2}" y="{}">{p:.3}</text>"#,
                y + dy,
                p * WIDTH,
                LEFT + p * WIDTH + 4.0,
                y + dy + 10.0
            );
        }
    }
    let ly = height - 12.0;
    let _ = writeln!(s, r##"<rect x="8" y="{}" width="10" height="10" fill="#9e9e9e"/><text x="22" y="{ly}">uncalibrated</text>"##, ly - 9.0);
    if bars.calibrated.is_some() {
        let _ = writeln!(s, r##"<rect x="120" y="{}" width="10" height="10" fill="#1f77b4"/><text x="134" y="{ly}">calibrated</text>"##, ly - 9.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `predictions.csv` and `example_{i}.svg` under `dir`; returns the
/// paths written.
pub fn emit_prediction_bars(
    dir: &Path,
    model: &Model,
    ds: &Dataset,
    indices: &[usize],
    map: Option<&CalibrationMap>,
    class_names: Option<&[String]>,
) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(dir)?;
    let bars = prediction_bars(model, ds, indices, map)?;
    let names = resolve_class_names(class_names, model.structure.num_classes);
    let csv_path = dir.join("predictions.csv");
    write_prediction_csv(&bars, &names, std::fs::File::create(&csv_path)?)?;
    let mut written = vec![csv_path];
    for b in &bars {
        let path = dir.join(format!("example_{}.svg", b.index));
        std::fs::write(&path, prediction_svg(b, &names, model.structure.head))?;
        written.push(path);
    }
    Ok(written)
}
