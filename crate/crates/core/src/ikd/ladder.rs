use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, streams};
use super::train::{dataset_logits, fit, metrics_for_logits, Metrics, Objective, TrainLog};
use super::{IkdError, LadderConfig, Method};
use crate::calibration::{fit_platt, fit_temperature, CalibrationError, CalibrationMap, PlattConfig};
use crate::data::{balance_oversample, stratified_split, Dataset, Splits};
use crate::loss::DistillLossConfig;
use crate::model::{param_count, refine, Model, Structure};

/// Train/validation/test data for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

/// Splits `val_fraction` of `train` off for validation (stratified) and
/// oversamples rare classes in what remains.
pub fn prepare_data(train: &Dataset, test: Dataset, cfg: &LadderConfig) -> Result<RunData, IkdError> {
    let f = cfg.val_fraction;
    let Splits { train: tr, val, warnings, .. } = stratified_split(train, [1.0 - f, f, 0.0], derive_seed(cfg.seed, streams::SPLIT))?;
    let mut warnings = warnings;
    let tr = if cfg.balance_threshold > 0.0 {
        let (balanced, report) = balance_oversample(&tr, cfg.balance_threshold, derive_seed(cfg.seed, streams::BALANCE))?;
        if !report.records.is_empty() {
            info!("balancing added {} augmented examples", report.records.len());
        }
        warnings.extend(report.warnings);
        balanced
    } else {
        tr
    };
    let c = tr.num_classes().max(test.num_classes());
    Ok(RunData { train: tr.with_num_classes(c), val: val.with_num_classes(c), test: test.with_num_classes(c), warnings })
}

/// Trains `M0` with cross-entropy.
pub fn train_teacher(structure: &Structure, data: &RunData, cfg: &LadderConfig) -> Result<(Model, TrainLog), IkdError> {
    cfg.validate()?;
    let model = Model::init("M0", structure.clone(), derive_seed(cfg.seed, streams::TEACHER_INIT))?;
    let loss = DistillLossConfig::plain(0.0).with_head(structure.head);
    let objective = Objective { loss, teacher_logits: None };
    fit(model, &data.train, &data.val, &objective, cfg.teacher_epochs, cfg, derive_seed(cfg.seed, streams::TEACHER_SHUFFLE))
}

/// Fits the method's calibration map on validation logits. `Ikd` has none.
pub fn fit_map(method: Method, logits: &[f64], val: &Dataset) -> Result<Option<CalibrationMap>, CalibrationError> {
    Ok(match method {
        Method::Ikd => None,
        Method::IkdTemperature => Some(fit_temperature(logits, &val.labels)?.map),
        Method::IkdPlatt => Some(fit_platt(logits, &val.labels, &PlattConfig::default())?.map),
    })
}

fn identity_map(method: Method, classes: usize) -> CalibrationMap {
    match method {
        Method::IkdPlatt => CalibrationMap::identity_platt(classes),
        _ => CalibrationMap::Temperature { t: 1.0 },
    }
}

/// Fit with fallback to the identity map; the second value is a warning.
fn fit_map_or_identity(method: Method, logits: &[f64], val: &Dataset, what: &str) -> (Option<CalibrationMap>, Option<String>) {
    match fit_map(method, logits, val) {
        Ok(m) => (m, None),
        Err(e) => {
            let msg = format!("{method} calibration fit on {what} failed ({e}); using the identity map");
            warn!("{msg}");
            (Some(identity_map(method, val.num_classes())), Some(msg))
        }
    }
}

/// Post-hoc calibrated metrics of a model under one calibration variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedMetrics {
    pub map: CalibrationMap,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step: usize,
    pub student_id: String,
    pub teacher_id: String,
    pub structure: Structure,
    pub param_count: usize,
    /// `param_count(σ0) / param_count(σk)`
    pub compression: f64,
    /// Accuracy reported for the method: raw for IKD, after the student's own
    /// post-hoc map for calibrated methods.
    pub accuracy: f64,
    pub ece: f64,
    /// Metrics of the student's raw outputs.
    pub raw: Metrics,
    /// Map fitted on the teacher and used inside the distillation loss.
    pub fitted_map: Option<CalibrationMap>,
    /// Student calibrated post hoc with the same variant.
    pub calibrated: Option<CalibratedMetrics>,
    pub train_log: TrainLog,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Evaluates `model` on the test split, with and without a post-hoc map of
/// the method's variant fitted on validation logits.
fn assess(model: &Model, method: Method, data: &RunData, n_bins: usize, warnings: &mut Vec<String>) -> Result<(Metrics, Option<CalibratedMetrics>), IkdError> {
    let test_logits = dataset_logits(model, &data.test)?;
    let raw = metrics_for_logits(&test_logits, &data.test, None, n_bins)?;
    if !method.is_calibrated() {
        return Ok((raw, None));
    }
    let val_logits = dataset_logits(model, &data.val)?;
    let (map, warning) = fit_map_or_identity(method, &val_logits, &data.val, &model.id);
    warnings.extend(warning);
    let map = map.expect("calibrated methods always have a map");
    let metrics = metrics_for_logits(&test_logits, &data.test, Some(&map), n_bins)?;
    Ok((raw, Some(CalibratedMetrics { map, metrics })))
}

/// One rung: fit the method's map on the teacher's validation logits, train
/// a fresh student of `student_structure` with the distillation loss, and
/// measure it on the test split.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    teacher: &Model,
    student_structure: &Structure,
    method: Method,
    data: &RunData,
    cfg: &LadderConfig,
    step: usize,
    base_params: usize,
) -> Result<(Model, StepResult), IkdError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut warnings = Vec::new();
    let head = student_structure.head;
    let fitted_map = if method.is_calibrated() {
        let val_logits = dataset_logits(teacher, &data.val)?;
        let (map, warning) = fit_map_or_identity(method, &val_logits, &data.val, &teacher.id);
        warnings.extend(warning);
        map
    } else {
        None
    };
    let mut loss = match &fitted_map {
        Some(map) => map.loss_config(cfg.alpha, head),
        None => DistillLossConfig::plain(cfg.alpha).with_head(head),
    };
    loss.kl_direction = cfg.kl_direction;
    loss.kd_factor = cfg.kd_factor;
    let teacher_logits = dataset_logits(teacher, &data.train)?;
    let student_id = format!("M{step}");
    let student = Model::init(&student_id, student_structure.clone(), derive_seed(cfg.seed, streams::STUDENT_INIT + step as u64))?;
    let objective = Objective { loss, teacher_logits: Some(&teacher_logits) };
    let shuffle = derive_seed(cfg.seed, streams::STUDENT_SHUFFLE + step as u64);
    let (student, train_log) = fit(student, &data.train, &data.val, &objective, cfg.epochs_per_step, cfg, shuffle)?;
    let (raw, calibrated) = assess(&student, method, data, cfg.n_bins, &mut warnings)?;
    let reported = calibrated.as_ref().map_or(&raw, |c| &c.metrics);
    let count = param_count(student_structure)?;
    let result = StepResult {
        step,
        student_id,
        teacher_id: teacher.id.clone(),
        structure: student_structure.clone(),
        param_count: count,
        compression: base_params as f64 / count as f64,
        accuracy: reported.accuracy,
        ece: reported.ece,
        raw,
        fitted_map,
        calibrated,
        train_log,
        warnings,
        wall_time: started.elapsed().as_secs_f64(),
    };
    info!(
        "{method} step {step}: {} <- {}, compression {:.3}x, accuracy {:.4}, ECE {:.4}",
        result.student_id, result.teacher_id, result.compression, result.accuracy, result.ece
    );
    Ok((student, result))
}

/// `σ1, ρ(σ1), …` for `k` steps; depends on nothing but its arguments.
pub fn structure_ladder(sigma_1: &Structure, p: f64, k: usize) -> Result<Vec<Structure>, IkdError> {
    let mut out = vec![sigma_1.clone()];
    while out.len() < k {
        let next = refine(out.last().expect("non-empty"), p)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRecord {
    pub model_id: String,
    pub structure: Structure,
    pub param_count: usize,
    pub raw: Metrics,
    /// `M0` calibrated post hoc, one entry per calibrated method in the report.
    pub calibrated: Vec<(Method, CalibratedMetrics)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub steps: Vec<StepResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub config: LadderConfig,
    pub base: BaseRecord,
    pub runs: Vec<MethodRun>,
    pub warnings: Vec<String>,
}

impl LadderReport {
    pub fn run(&self, method: Method) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method)
    }

    /// The calibrated method, if any, in a paired or single report.
    pub fn calibrated_run(&self) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method.is_calibrated())
    }
}

/// Models produced by a ladder: `M1..Mk` per method.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderModels {
    pub runs: Vec<(Method, Vec<Model>)>,
}

fn base_record(m0: &Model, methods: &[Method], data: &RunData, cfg: &LadderConfig, warnings: &mut Vec<String>) -> Result<BaseRecord, IkdError> {
    let mut raw = None;
    let mut calibrated = Vec::new();
    for &method in methods {
        let (r, c) = assess(m0, method, data, cfg.n_bins, warnings)?;
        raw = Some(r);
        if let Some(c) = c {
            calibrated.push((method, c));
        }
    }
    Ok(BaseRecord {
        model_id: m0.id.clone(),
        structure: m0.structure.clone(),
        param_count: param_count(&m0.structure)?,
        raw: raw.expect("at least one method"),
        calibrated,
    })
}

fn ladder_for(m0: &Model, sigmas: &[Structure], method: Method, data: &RunData, cfg: &LadderConfig) -> Result<(MethodRun, Vec<Model>), IkdError> {
    let base_params = param_count(&m0.structure)?;
    let mut teacher = m0.clone();
    let mut steps = Vec::with_capacity(sigmas.len());
    let mut models = Vec::with_capacity(sigmas.len());
    for (i, sigma) in sigmas.iter().enumerate() {
        let (student, result) = distill_step(&teacher, sigma, method, data, cfg, i + 1, base_params)?;
        steps.push(result);
        models.push(student.clone());
        teacher = student;
    }
    Ok((MethodRun { method, steps }, models))
}

fn run_methods(m0: &Model, sigma_1: Option<&Structure>, methods: &[Method], data: &RunData, cfg: &LadderConfig) -> Result<(LadderReport, LadderModels), IkdError> {
    cfg.validate()?;
    let sigma_1 = match sigma_1 {
        Some(s) => s.clone(),
        None => refine(&m0.structure, cfg.p)?,
    };
    let sigmas = structure_ladder(&sigma_1, cfg.p, cfg.k)?;
    let mut warnings = data.warnings.clone();
    let base = base_record(m0, methods, data, cfg, &mut warnings)?;
    let mut runs = Vec::new();
    let mut models = Vec::new();
    for &method in methods {
        let (run, ms) = ladder_for(m0, &sigmas, method, data, cfg)?;
        runs.push(run);
        models.push((method, ms));
    }
    Ok((LadderReport { config: cfg.clone(), base, runs, warnings }, LadderModels { runs: models }))
}

/// Runs the configured method for `k` steps with chained teachers:
/// `M(i-1)` teaches `Mi`. `sigma_1` defaults to `ρ(σ0)`.
pub fn run_ladder(m0: &Model, sigma_1: Option<&Structure>, data: &RunData, cfg: &LadderConfig) -> Result<(LadderReport, LadderModels), IkdError> {
    run_methods(m0, sigma_1, &[cfg.method], data, cfg)
}

/// Runs plain IKD and the configured calibrated variant (temperature if the
/// config names plain IKD) over the same structures and seeds.
pub fn compare_methods(m0: &Model, sigma_1: Option<&Structure>, data: &RunData, cfg: &LadderConfig) -> Result<(LadderReport, LadderModels), IkdError> {
    let plus = if cfg.method.is_calibrated() { cfg.method } else { Method::IkdTemperature };
    run_methods(m0, sigma_1, &[Method::Ikd, plus], data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockSpec, Head};

    #[test]
    fn ladder_arithmetic() {
        let s = Structure::dense(100, &[64, 32], 10, Head::Softmax);
        let ladder = structure_ladder(&s, 0.5, 3).unwrap();
        let widths: Vec<Vec<usize>> = ladder.iter().map(Structure::widths).collect();
        assert_eq!(widths, vec![vec![64, 32], vec![32, 16], vec![16, 8]]);
        assert_eq!(structure_ladder(&s, 0.5, 1).unwrap().len(), 1);
    }

    #[test]
    fn ladder_is_pure() {
        let s = Structure {
            blocks: vec![BlockSpec::Conv { filters: 8, kernel: 3 }, BlockSpec::Pool, BlockSpec::Flatten, BlockSpec::Dense { width: 20 }],
            input_shape: vec![1, 8, 8],
            num_classes: 3,
            head: Head::Softmax,
        };
        assert_eq!(structure_ladder(&s, 0.5, 4).unwrap(), structure_ladder(&s, 0.5, 4).unwrap());
    }
}
