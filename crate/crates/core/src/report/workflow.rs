use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{emit_ladder_table, emit_reliability, ConfigError, Format, ReportError, RunConfig};
use crate::data::{load_csv, load_idx, stratified_split, CsvSchema, Dataset, SplitTag};
use crate::ikd::{derive_seed, streams, LadderReport};
use crate::model::{Model, Structure};

fn missing(key: &str, why: &str) -> ReportError {
    ReportError::Config(ConfigError::BadValue { key: key.into(), value: String::new(), reason: why.into(), line: None })
}

impl RunConfig {
    /// Train and test sets named by the config. Without test data,
    /// `test_fraction` of the training file is held out (stratified).
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset, Vec<String>), ReportError> {
        let schema = CsvSchema { label_columns: self.label_columns, has_header: true };
        let load = |images: &Option<PathBuf>, labels: &Option<PathBuf>, csv: &Option<PathBuf>, which: &str| -> Result<Option<Dataset>, ReportError> {
            Ok(match (images, labels, csv) {
                (Some(i), Some(l), None) => Some(load_idx(i, l)?),
                (None, None, Some(c)) => Some(load_csv(c, schema)?),
                (None, None, None) => None,
                (Some(_), None, _) | (None, Some(_), _) => {
                    return Err(missing(&format!("{which}_images"), "IDX data needs both an image and a label file"))
                }
                _ => return Err(missing(&format!("{which}_csv"), "give either IDX files or a CSV file, not both")),
            })
        };
        let train = load(&self.train_images, &self.train_labels, &self.train_csv, "train")?
            .ok_or_else(|| missing("train_images", "no training data configured (set train_images/train_labels or train_csv)"))?;
        if let Some(test) = load(&self.test_images, &self.test_labels, &self.test_csv, "test")? {
            return Ok((train, Dataset { split: SplitTag::Test, ..test }, Vec::new()));
        }
        let f = self.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(missing("test_fraction", "must lie in (0, 1) when no test data is given"));
        }
        let s = stratified_split(&train, [1.0 - f, 0.0, f], derive_seed(self.ladder.seed, streams::TEST_SPLIT))?;
        Ok((s.train, s.test, s.warnings))
    }

    /// Teacher structure for `train`.
    pub fn teacher_for(&self, train: &Dataset) -> Structure {
        let conv = self.is_convolutional();
        if conv && !train.is_image() {
            warn!("convolutional teacher requested for tabular data");
        }
        self.teacher_structure(train.input_shape(conv), train.num_classes(), train.labels.head())
    }
}

fn bins_csv(path: &Path, bins: &crate::calibration::ReliabilityBins) -> Result<(), ReportError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    emit_reliability(bins, fs::File::create(path)?)
}

/// Writes `ladder.{csv,md}` and the reliability CSVs for every model in the
/// report. Output depends only on `report`.
pub fn emit_run_reports(dir: &Path, report: &LadderReport, format: Format) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    let ext = match format {
        Format::Csv => "csv",
        Format::Md => "md",
    };
    emit_ladder_table(report, format, fs::File::create(dir.join(format!("ladder.{ext}")))?)?;
    let rel = dir.join("reliability");
    bins_csv(&rel.join(format!("{}_raw.csv", report.base.model_id)), &report.base.raw.bins)?;
    for (method, c) in &report.base.calibrated {
        bins_csv(&rel.join(method.name()).join(format!("{}_posthoc.csv", report.base.model_id)), &c.metrics.bins)?;
    }
    for run in &report.runs {
        for s in &run.steps {
            let d = rel.join(run.method.name());
            bins_csv(&d.join(format!("{}_raw.csv", s.student_id)), &s.raw.bins)?;
            if let Some(c) = &s.calibrated {
                bins_csv(&d.join(format!("{}_posthoc.csv", s.student_id)), &c.metrics.bins)?;
            }
        }
    }
    Ok(())
}

/// Reads `report.json` from a run directory.
pub fn load_report(dir: &Path) -> Result<LadderReport, ReportError> {
    let text = fs::read_to_string(dir.join("report.json"))?;
    serde_json::from_str(&text).map_err(|e| ReportError::Table(format!("report.json: {e}")))
}

/// Loads a checkpoint, naming the path on failure.
pub fn load_model(path: &Path) -> Result<Model, ReportError> {
    crate::model::checkpoint_load(path).map_err(|e| ReportError::Table(format!("{}: {e}", path.display())))
}
