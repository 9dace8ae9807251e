use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use super::CalibrationError;

pub const DEFAULT_BINS: usize = 10;

/// One equal-width confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub confidence_sum: f64,
    pub correct: usize,
}

impl Bin {
    pub fn mean_confidence(&self) -> Option<f64> {
        (self.count > 0).then(|| self.confidence_sum / self.count as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
    pub n: usize,
}

/// Bin for `conf` over `n` equal-width bins; interior edges belong to the
/// upper bin and 1.0 to the last.
pub fn bin_index(conf: f64, n: usize) -> usize {
    let mut b = ((conf * n as f64).floor().max(0.0) as usize).min(n - 1);
    if b > 0 && conf < b as f64 / n as f64 {
        b -= 1;
    }
    if b + 1 < n && conf >= (b + 1) as f64 / n as f64 {
        b += 1;
    }
    b
}

impl ReliabilityBins {
    pub fn from_predictions(confidences: &[f64], correct: &[bool], n_bins: usize) -> Result<Self, CalibrationError> {
        if n_bins == 0 {
            return Err(CalibrationError::BadBins);
        }
        if confidences.is_empty() {
            return Err(CalibrationError::Empty);
        }
        if confidences.len() != correct.len() {
            return Err(CalibrationError::Shape(format!(
                "{} confidences but {} correctness flags",
                confidences.len(),
                correct.len()
            )));
        }
        let mut bins: Vec<Bin> = (0..n_bins)
            .map(|b| Bin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: 0,
                confidence_sum: 0.0,
                correct: 0,
            })
            .collect();
        for (&q, &ok) in confidences.iter().zip(correct) {
            if !(0.0..=1.0).contains(&q) {
                return Err(CalibrationError::BadProbability(q));
            }
            let bin = &mut bins[bin_index(q, n_bins)];
            bin.count += 1;
            bin.confidence_sum += q;
            bin.correct += usize::from(ok);
        }
        Ok(Self { bins, n: confidences.len() })
    }

    /// `Σ_b (|B_b| / n) · |acc(B_b) − conf(B_b)|`
    pub fn ece(&self) -> f64 {
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| {
                let acc = b.correct as f64 / b.count as f64;
                let conf = b.confidence_sum / b.count as f64;
                (b.count as f64 / self.n as f64) * (acc - conf).abs()
            })
            .sum()
    }

    /// CSV with columns `bin_low, bin_high, count, mean_confidence, accuracy`;
    /// empty bins leave the last two cells blank.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_low", "bin_high", "count", "mean_confidence", "accuracy"])?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.bins {
            w.write_record([
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                cell(b.mean_confidence()),
                cell(b.accuracy()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First index of the largest entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_probs(probs: &[f64], classes: usize, n: usize) -> Result<(), CalibrationError> {
    if classes == 0 || probs.len() != n * classes {
        return Err(CalibrationError::Shape(format!("{} probabilities for {n} examples x {classes} classes", probs.len())));
    }
    if let Some(&p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CalibrationError::BadProbability(p));
    }
    Ok(())
}

/// Reliability bins for multi-class predictions: confidence is the top
/// probability, correctness compares its class with the label.
pub fn reliability(probs: &[f64], classes: usize, labels: &[usize], n_bins: usize) -> Result<ReliabilityBins, CalibrationError> {
    if labels.is_empty() {
        return Err(CalibrationError::Empty);
    }
    check_probs(probs, classes, labels.len())?;
    let mut conf = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    for (row, &y) in probs.chunks(classes).zip(labels) {
        if y >= classes {
            return Err(CalibrationError::Shape(format!("label {y} out of range for {classes} classes")));
        }
        let k = argmax(row);
        conf.push(row[k]);
        correct.push(k == y);
    }
    ReliabilityBins::from_predictions(&conf, &correct, n_bins)
}

pub fn compute_ece(probs: &[f64], classes: usize, labels: &[usize], n_bins: usize) -> Result<f64, CalibrationError> {
    Ok(reliability(probs, classes, labels, n_bins)?.ece())
}

/// Fraction of examples whose top class matches the label.
pub fn accuracy(probs: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let hits = probs.chunks(classes).zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Per-pair accuracy of thresholded sigmoid outputs.
pub fn multilabel_accuracy(probs: &[f64], labels: &[Vec<bool>]) -> f64 {
    let classes = labels.first().map_or(1, Vec::len).max(1);
    let hits = probs
        .chunks(classes)
        .zip(labels)
        .flat_map(|(row, ys)| row.iter().zip(ys))
        .filter(|(&p, &y)| (p >= 0.5) == y)
        .count();
    hits as f64 / (labels.len() * classes).max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultilabelEce {
    /// Per-class ECE; `None` for classes without positive examples.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that have positives.
    pub macro_ece: Option<f64>,
    /// ECE over every (example, class) pair.
    pub pooled: f64,
    pub pooled_bins: ReliabilityBins,
    pub warnings: Vec<String>,
}

/// Per-class binary calibration: confidence `max(p, 1 − p)`, prediction
/// `p ≥ 0.5`.
pub fn compute_multilabel_ece(probs: &[f64], labels: &[Vec<bool>], n_bins: usize) -> Result<MultilabelEce, CalibrationError> {
    if labels.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let classes = labels[0].len();
    if labels.iter().any(|r| r.len() != classes) {
        return Err(CalibrationError::Shape("ragged multi-label rows".into()));
    }
    check_probs(probs, classes, labels.len())?;
    let judge = |p: f64, y: bool| (p.max(1.0 - p), (p >= 0.5) == y);
    let mut per_class = Vec::with_capacity(classes);
    let mut warnings = Vec::new();
    for c in 0..classes {
        if !labels.iter().any(|r| r[c]) {
            let msg = format!("class {c} has no positive examples; excluded from macro ECE");
            warn!("{msg}");
            warnings.push(msg);
            per_class.push(None);
            continue;
        }
        let (conf, correct): (Vec<f64>, Vec<bool>) =
            probs.chunks(classes).zip(labels).map(|(row, ys)| judge(row[c], ys[c])).unzip();
        per_class.push(Some(ReliabilityBins::from_predictions(&conf, &correct, n_bins)?.ece()));
    }
    let kept: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_ece = (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64);
    let (conf, correct): (Vec<f64>, Vec<bool>) = probs
        .chunks(classes)
        .zip(labels)
        .flat_map(|(row, ys)| row.iter().zip(ys).map(|(&p, &y)| judge(p, y)))
        .unzip();
    let pooled_bins = ReliabilityBins::from_predictions(&conf, &correct, n_bins)?;
    Ok(MultilabelEce { per_class, macro_ece, pooled: pooled_bins.ece(), pooled_bins, warnings })
}
