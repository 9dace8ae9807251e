use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, IkdError, LadderConfig};
use crate::calibration::{
    accuracy, apply_calibration, compute_multilabel_ece, multilabel_accuracy, probabilities, reliability,
    CalibrationMap, ReliabilityBins,
};
use crate::data::{Dataset, Labels};
use crate::diffcore::Tensor;
use crate::loss::graph::{build_loss, loss_bindings};
use crate::loss::DistillLossConfig;
use crate::model::{predict_logits, Model, Network};

/// Held-out metrics for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Top-1 accuracy, or per-(example, class) accuracy for multi-label data.
    pub accuracy: f64,
    /// ECE; pooled over (example, class) pairs for multi-label data.
    pub ece: f64,
    /// Mean per-class ECE (multi-label only).
    pub macro_ece: Option<f64>,
    pub bins: ReliabilityBins,
}

impl Metrics {
    pub fn from_probs(probs: &[f64], labels: &Labels, n_bins: usize) -> Result<Self, IkdError> {
        Ok(match labels {
            Labels::Classes { labels: ls, num_classes } => {
                let bins = reliability(probs, *num_classes, ls, n_bins)?;
                Metrics { accuracy: accuracy(probs, *num_classes, ls), ece: bins.ece(), macro_ece: None, bins }
            }
            Labels::MultiHot { labels: ls, .. } => {
                let r = compute_multilabel_ece(probs, ls, n_bins)?;
                Metrics { accuracy: multilabel_accuracy(probs, ls), ece: r.pooled, macro_ece: r.macro_ece, bins: r.pooled_bins }
            }
        })
    }
}

/// Model logits for every example of `ds`, widened to `f64`.
pub fn dataset_logits(model: &Model, ds: &Dataset) -> Result<Vec<f64>, IkdError> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::new();
    ds.gather(&all, &model.structure.input_shape, &mut rows);
    let logits = predict_logits(model, &rows, ds.len())?;
    Ok(logits.data().iter().map(|&v| f64::from(v)).collect())
}

/// Accuracy and ECE on `ds`, optionally after a calibration map.
pub fn evaluate(model: &Model, ds: &Dataset, map: Option<&CalibrationMap>, n_bins: usize) -> Result<Metrics, IkdError> {
    let logits = dataset_logits(model, ds)?;
    metrics_for_logits(&logits, ds, map, n_bins)
}

pub fn metrics_for_logits(
    logits: &[f64],
    ds: &Dataset,
    map: Option<&CalibrationMap>,
    n_bins: usize,
) -> Result<Metrics, IkdError> {
    let (c, head) = (ds.num_classes(), ds.labels.head());
    let probs = match map {
        Some(m) => apply_calibration(m, logits, c, head),
        None => probabilities(logits, c, head),
    };
    Metrics::from_probs(&probs, &ds.labels, n_bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

/// What a training run optimizes: the loss and, for distillation, the
/// teacher's logits on every training example.
pub struct Objective<'a> {
    pub loss: DistillLossConfig,
    pub teacher_logits: Option<&'a [f64]>,
}

fn val_accuracy(net: &mut Network<f32>, val: &Dataset, input_shape: &[usize]) -> Result<f64, IkdError> {
    const CHUNK: usize = 512;
    let c = val.num_classes();
    let mut logits = Vec::with_capacity(val.len() * c);
    let mut rows = Vec::new();
    let all: Vec<usize> = (0..val.len()).collect();
    for chunk in all.chunks(CHUNK) {
        val.gather(chunk, input_shape, &mut rows);
        let out = net.logits_for(&rows, chunk.len())?;
        logits.extend(out.data().iter().map(|&v| f64::from(v)));
    }
    let probs = probabilities(&logits, c, val.labels.head());
    Ok(match &val.labels {
        Labels::Classes { labels, .. } => accuracy(&probs, c, labels),
        Labels::MultiHot { labels, .. } => multilabel_accuracy(&probs, labels),
    })
}

/// Minibatch Adam on `objective`, keeping the epoch with the best validation
/// accuracy (earliest on ties). Zero epochs return `model` unchanged.
pub fn fit(
    model: Model,
    train: &Dataset,
    val: &Dataset,
    objective: &Objective<'_>,
    epochs: usize,
    cfg: &LadderConfig,
    shuffle_seed: u64,
) -> Result<(Model, TrainLog), IkdError> {
    let c = model.structure.num_classes;
    if train.num_classes() != c || val.num_classes() != c {
        return Err(IkdError::Config(format!(
            "model has {c} classes but the data has {}",
            train.num_classes()
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(IkdError::Config("training and validation splits must be non-empty".into()));
    }
    let mut log = TrainLog { epochs: Vec::new(), best_epoch: 0 };
    if epochs == 0 {
        return Ok((model, log));
    }
    if let Some(t) = objective.teacher_logits {
        if t.len() != train.len() * c {
            return Err(IkdError::Config("teacher logits do not cover the training split".into()));
        }
    }
    let input_shape = model.structure.input_shape.clone();
    let mut net = Network::<f32>::new(&model.structure, &model.params)?;
    let nodes = build_loss(&mut net.graph, net.logits, &objective.loss)?;
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.adam_betas.0,
        beta2: cfg.adam_betas.1,
        ..AdamConfig::default()
    };
    let sizes: Vec<usize> = model.params.tensors.iter().map(Tensor::len).collect();
    let mut adam = AdamState::<f32>::new(sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::new();
    let mut teacher_rows = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let m = batch.len();
            train.gather(batch, &input_shape, &mut rows);
            let onehot = train.labels.onehot_rows(batch);
            teacher_rows.clear();
            match objective.teacher_logits {
                Some(t) => batch.iter().for_each(|&i| teacher_rows.extend_from_slice(&t[i * c..(i + 1) * c])),
                None => teacher_rows.resize(m * c, 0.0),
            }
            for (name, t) in loss_bindings::<f32>(&objective.loss, &onehot, &teacher_rows, m, c)? {
                net.graph.bind(name, t)?;
            }
            net.graph.set_value(net.input, Tensor::new(net.batch_shape(m), rows.clone()));
            let value = f64::from(net.graph.evaluate(nodes.batch)?.data()[0]);
            if !value.is_finite() {
                return Err(IkdError::NonFiniteLoss { model: model.id.clone(), epoch, batch: b, value });
            }
            loss_sum += value * m as f64;
            let grads = net.graph.backprop(nodes.batch)?;
            let coeffs = adam.advance(&adam_cfg);
            for (k, &id) in net.params.iter().enumerate() {
                let g = grads.get(id).expect("every parameter receives a gradient");
                let p = net.graph.leaf_mut(id).expect("parameters are leaves");
                adam.apply(k, p, g, &coeffs);
            }
        }
        let acc = val_accuracy(&mut net, val, &input_shape)?;
        let mean_loss = loss_sum / train.len() as f64;
        debug!("{} epoch {epoch}: loss {mean_loss:.5}, val accuracy {acc:.4}", model.id);
        log.epochs.push(EpochLog { epoch, mean_loss, val_accuracy: acc });
        if best.as_ref().is_none_or(|(a, _)| acc > *a) {
            let params = net.param_set(model.params.seed);
            best = Some((acc, Model { params, ..model.clone() }));
            log.best_epoch = epoch;
        }
    }
    let (acc, best) = best.expect("at least one epoch ran");
    info!("{}: best val accuracy {acc:.4} at epoch {}", best.id, log.best_epoch);
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitTag;
    use crate::model::{Head, Structure};
    use rand::Rng;

    /// Two Gaussian blobs far apart, linearly separable by construction.
    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 0 { 0.2 } else { 0.8 };
            for _ in 0..4 {
                features.push((centre + rng.gen_range(-0.1f32..0.1)).clamp(0.0, 1.0));
            }
            labels.push(y);
        }
        Dataset::new(features, vec![4], Labels::Classes { labels, num_classes: 2 }, SplitTag::Train).unwrap()
    }

    fn cfg() -> LadderConfig {
        LadderConfig { learning_rate: 1e-2, ..LadderConfig::default() }
    }

    fn ce() -> Objective<'static> {
        Objective { loss: DistillLossConfig::plain(0.0), teacher_logits: None }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = Model::init("M0", Structure::dense(4, &[8], 2, Head::Softmax), 1).unwrap();
        let (out, log) = fit(m.clone(), &blobs(20, 1), &blobs(10, 2), &ce(), 0, &cfg(), 0).unwrap();
        assert_eq!(out, m);
        assert_eq!(log.best_epoch, 0);
    }

    #[test]
    fn separable_blobs_learned() {
        let m = Model::init("M0", Structure::dense(4, &[8], 2, Head::Softmax), 1).unwrap();
        let val = blobs(100, 2);
        let (out, log) = fit(m, &blobs(200, 1), &val, &ce(), 20, &cfg(), 0).unwrap();
        assert!(log.epochs[log.best_epoch - 1].val_accuracy >= 0.95);
        assert!(evaluate(&out, &val, None, 10).unwrap().accuracy >= 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let m = Model::init("M0", Structure::dense(4, &[8], 2, Head::Softmax), 3).unwrap();
            fit(m, &blobs(64, 1), &blobs(16, 2), &ce(), 3, &cfg(), 9).unwrap().0
        };
        assert_eq!(run(), run());
    }
}
