use log::warn;
use serde::Serialize;

use super::{nll, CalibrationError, CalibrationMap};
use crate::data::Labels;
use crate::diffcore::{Graph, GraphError, NodeId, Tensor};
use crate::ikd::{adam_update, AdamConfig, AdamState};
use crate::loss::AffineMap;
use crate::model::Head;

pub const T_GRID_MIN: f64 = 0.05;
pub const T_GRID_MAX: f64 = 20.0;
pub const T_GRID_POINTS: usize = 200;
const T_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemperatureFit {
    pub map: CalibrationMap,
    pub t: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub warnings: Vec<String>,
}

fn check_logits(logits: &[f64], labels: &Labels, needed: usize) -> Result<Vec<f64>, CalibrationError> {
    let (m, c) = (labels.len(), labels.num_classes());
    if m < needed {
        return Err(CalibrationError::TooFewExamples { needed, got: m });
    }
    if logits.len() != m * c {
        return Err(CalibrationError::Shape(format!("{} logits for {m} examples x {c} classes", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CalibrationError::NonFinite);
    }
    Ok(labels.onehot_rows(&(0..m).collect::<Vec<_>>()))
}

fn degenerate_labels(labels: &Labels) -> bool {
    let counts = labels.class_counts();
    match labels {
        Labels::Classes { .. } => counts.iter().filter(|&&k| k > 0).count() < 2,
        Labels::MultiHot { .. } => counts.iter().all(|&k| k == 0 || k == labels.len()),
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a >= tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Temperature minimizing validation NLL: a log-spaced grid over
/// `[0.05, 20]`, then golden-section search between the best grid point's
/// neighbours. `T = 1` is always a candidate, so the fit never does worse.
pub fn fit_temperature(logits: &[f64], labels: &Labels) -> Result<TemperatureFit, CalibrationError> {
    let targets = check_logits(logits, labels, 2)?;
    let (c, head) = (labels.num_classes(), labels.head());
    let mut warnings = Vec::new();
    if degenerate_labels(labels) {
        let msg = "validation labels are degenerate; temperature fit is unreliable".to_string();
        warn!("{msg}");
        warnings.push(msg);
    }
    let mut scaled = vec![0.0; logits.len()];
    let mut objective = |t: f64| {
        for (s, &z) in scaled.iter_mut().zip(logits) {
            *s = z / t;
        }
        nll(&scaled, &targets, c, head)
    };
    let ratio = (T_GRID_MAX / T_GRID_MIN).ln() / (T_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..T_GRID_POINTS).map(|i| T_GRID_MIN * (ratio * i as f64).exp()).collect();
    let values: Vec<f64> = grid.iter().map(|&t| objective(t)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CalibrationError::NonFinite);
    }
    let k = (0..grid.len()).fold(0, |best, i| if values[i] < values[best] { i } else { best });
    let lo = grid[k.saturating_sub(1)];
    let hi = grid[(k + 1).min(grid.len() - 1)];
    let refined = {
        let f = std::cell::RefCell::new(&mut objective);
        golden_section(|t| (f.borrow_mut())(t), lo, hi, T_TOLERANCE)
    };
    let nll_before = objective(1.0);
    let (mut t, mut best) = (1.0, nll_before);
    // only leave T = 1 for a gain beyond rounding noise
    let margin = 1e-12 * nll_before.abs().max(1.0);
    for cand in [grid[k], refined] {
        let v = objective(cand);
        if v < best - margin {
            t = cand;
            best = v;
        }
    }
    Ok(TemperatureFit { map: CalibrationMap::Temperature { t }, t, nll_before, nll_after: best, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlattConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Consecutive NLL increases tolerated before the fit is abandoned.
    pub patience: usize,
}

impl Default for PlattConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, iterations: 500, patience: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlattFit {
    pub map: CalibrationMap,
    pub nll_before: f64,
    pub nll_after: f64,
    pub iterations: usize,
}

struct PlattGraph {
    g: Graph<f64>,
    weight_t: NodeId,
    bias: NodeId,
    loss: NodeId,
}

fn platt_graph(logits: &[f64], targets: &[f64], m: usize, c: usize, head: Head) -> Result<PlattGraph, GraphError> {
    let mut g = Graph::<f64>::verification();
    let z = g.constant(Tensor::new(vec![m, c], logits.to_vec()));
    let y = g.constant(Tensor::new(vec![m, c], targets.to_vec()));
    let weight_t = g.param("platt.weight_t", Tensor::new(vec![c, c], AffineMap::identity(c).weight))?;
    let bias = g.param("platt.bias", Tensor::zeros(vec![c]))?;
    let zw = g.matmul(z, weight_t);
    let u = g.add_bias(zw, bias);
    let total = match head {
        Head::Softmax => {
            let ls = g.log_softmax(u);
            let picked = g.mul(y, ls);
            g.sum(picked)
        }
        Head::Sigmoid => {
            let lp = g.log_sigmoid(u);
            let neg = g.scale(u, -1.0);
            let ln = g.log_sigmoid(neg);
            let y_not = g.constant(Tensor::new(vec![m, c], targets.iter().map(|t| 1.0 - t).collect()));
            let a = g.mul(y, lp);
            let b = g.mul(y_not, ln);
            let ab = g.add(a, b);
            g.sum(ab)
        }
    };
    let loss = g.scale(total, -1.0 / m as f64);
    Ok(PlattGraph { g, weight_t, bias, loss })
}

/// Fits an affine map on logits by full-batch Adam on validation NLL, starting
/// from the identity and keeping the best iterate. Multi-class labels get a
/// full matrix map; multi-label data gets an independent `a_c z_c + b_c` per
/// class.
pub fn fit_platt(logits: &[f64], labels: &Labels, cfg: &PlattConfig) -> Result<PlattFit, CalibrationError> {
    let (m, c, head) = (labels.len(), labels.num_classes(), labels.head());
    let diagonal = head == Head::Sigmoid;
    let targets = check_logits(logits, labels, if diagonal { 2 } else { c.max(2) })?;
    let graph_err = |_: GraphError| CalibrationError::NonFinite;
    let mut pg = platt_graph(logits, &targets, m, c, head).map_err(graph_err)?;
    let mut params = vec![Tensor::new(vec![c, c], AffineMap::identity(c).weight), Tensor::zeros(vec![c])];
    let mut state = AdamState::for_tensors(&params);
    let adam = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
    let mut best = (f64::INFINITY, params.clone());
    let mut nll_before = f64::NAN;
    let mut prev = f64::INFINITY;
    let mut streak = 0;
    let mut iterations = 0;
    for it in 0..=cfg.iterations {
        pg.g.set_value(pg.weight_t, params[0].clone());
        pg.g.set_value(pg.bias, params[1].clone());
        let value = pg.g.evaluate(pg.loss).map_err(graph_err)?.data()[0];
        if !value.is_finite() {
            return Err(CalibrationError::NonFinite);
        }
        if it == 0 {
            nll_before = value;
        }
        if value < best.0 {
            best = (value, params.clone());
        }
        streak = if value > prev { streak + 1 } else { 0 };
        if streak >= cfg.patience {
            return Err(CalibrationError::Diverged(streak));
        }
        prev = value;
        iterations = it;
        if it == cfg.iterations {
            break;
        }
        let grads = pg.g.backprop(pg.loss).map_err(graph_err)?;
        let mut gw = grads.get(pg.weight_t).cloned().ok_or(CalibrationError::NonFinite)?;
        let gb = grads.get(pg.bias).cloned().ok_or(CalibrationError::NonFinite)?;
        if diagonal {
            for (i, v) in gw.data_mut().iter_mut().enumerate() {
                if i / c != i % c {
                    *v = 0.0;
                }
            }
        }
        let (w_slot, b_slot) = params.split_at_mut(1);
        adam_update(&mut [&mut w_slot[0], &mut b_slot[0]], &[&gw, &gb], &mut state, &adam);
    }
    let (_, p) = best;
    let wt = p[0].data();
    let bias = p[1].data().to_vec();
    let map = if diagonal {
        CalibrationMap::PerClassPlatt { scale: (0..c).map(|i| wt[i * c + i]).collect(), bias }
    } else {
        let mut weight = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                weight[i * c + j] = wt[j * c + i];
            }
        }
        CalibrationMap::Platt { weight, bias }
    };
    let mapped: Vec<f64> = logits.chunks(c).flat_map(|row| map.map_logits(row)).collect();
    let nll_after = nll(&mapped, &targets, c, head);
    Ok(PlattFit { map, nll_before, nll_after, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{accuracy, apply_calibration, probabilities};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Labels drawn from softmax(z) so `z` is calibrated by construction.
    fn calibrated(n: usize, c: usize, seed: u64) -> (Vec<f64>, Labels) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::with_capacity(n * c);
        let mut ls = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = probabilities(&z, c, Head::Softmax);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut y = c - 1;
            for (k, &pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    y = k;
                    break;
                }
            }
            ls.push(y);
            logits.extend(z);
        }
        (logits, Labels::Classes { labels: ls, num_classes: c })
    }

    #[test]
    fn recovers_scaled_temperature() {
        let (z, labels) = calibrated(5000, 5, 3);
        let hot: Vec<f64> = z.iter().map(|v| v * 2.5).collect();
        let fit = fit_temperature(&hot, &labels).unwrap();
        assert!((2.3..=2.7).contains(&fit.t), "{}", fit.t);
        assert!(fit.nll_after <= fit.nll_before);
    }

    #[test]
    fn calibrated_logits_keep_unit_temperature() {
        let (z, labels) = calibrated(5000, 4, 8);
        let fit = fit_temperature(&z, &labels).unwrap();
        assert!((0.9..=1.1).contains(&fit.t), "{}", fit.t);
    }

    #[test]
    fn flat_objective() {
        let labels = Labels::Classes { labels: vec![0, 1, 2, 1], num_classes: 3 };
        let z = vec![0.7; 12];
        let fit = fit_temperature(&z, &labels).unwrap();
        assert_eq!(fit.t, 1.0);
        let p = apply_calibration(&fit.map, &z, 3, Head::Softmax);
        assert_eq!(accuracy(&p, 3, &[0, 1, 2, 1]), accuracy(&probabilities(&z, 3, Head::Softmax), 3, &[0, 1, 2, 1]));
    }

    #[test]
    fn degenerate_labels_warn_but_fit() {
        let labels = Labels::Classes { labels: vec![1, 1, 1], num_classes: 2 };
        let fit = fit_temperature(&[0.0, 1.0, 0.5, 0.2, -1.0, 2.0], &labels).unwrap();
        assert_eq!(fit.warnings.len(), 1);
        assert!(fit.t > 0.0);
    }

    #[test]
    fn too_few_examples() {
        let labels = Labels::Classes { labels: vec![0], num_classes: 2 };
        assert!(matches!(fit_temperature(&[0.0, 1.0], &labels), Err(CalibrationError::TooFewExamples { .. })));
        assert!(matches!(
            fit_platt(&[0.0, 1.0], &labels, &PlattConfig::default()),
            Err(CalibrationError::TooFewExamples { .. })
        ));
    }

    #[test]
    fn platt_near_identity_on_calibrated_logits() {
        let (z, labels) = calibrated(5000, 3, 21);
        let fit = fit_platt(&z, &labels, &PlattConfig::default()).unwrap();
        let CalibrationMap::Platt { weight, bias } = &fit.map else { panic!() };
        let eye = AffineMap::identity(3).weight;
        for (w, e) in weight.iter().zip(&eye) {
            assert!((w - e).abs() < 0.1, "{weight:?}");
        }
        assert!(bias.iter().all(|b| b.abs() < 0.1), "{bias:?}");
        assert!(fit.nll_after <= fit.nll_before + 1e-6);
    }

    #[test]
    fn platt_absorbs_constant_shift() {
        let (z, labels) = calibrated(3000, 3, 5);
        let delta = [0.8, -0.4, 0.1];
        let shifted: Vec<f64> = z.chunks(3).flat_map(|r| r.iter().zip(&delta).map(|(a, d)| a + d)).collect();
        let base = fit_platt(&z, &labels, &PlattConfig::default()).unwrap();
        let moved = fit_platt(&shifted, &labels, &PlattConfig::default()).unwrap();
        assert!((base.nll_after - moved.nll_after).abs() < 1e-4, "{} vs {}", base.nll_after, moved.nll_after);
        let CalibrationMap::Platt { bias, .. } = &moved.map else { panic!() };
        // bias differences undo the shift up to a common constant
        let d01 = (bias[0] - bias[1]) + (delta[0] - delta[1]);
        assert!(d01.abs() < 0.15, "{bias:?}");
    }

    #[test]
    fn per_class_single_label_is_binary_platt() {
        // labels ~ Bernoulli(sigmoid(2 z - 0.5)); fitted (a, b) should approach (2, -0.5)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut z = Vec::new();
        let mut rows = Vec::new();
        for _ in 0..4000 {
            let v: f64 = rng.gen_range(-2.0..2.0);
            let p = 1.0 / (1.0 + (-(2.0 * v - 0.5)).exp());
            z.push(v);
            rows.push(vec![rng.gen::<f64>() < p]);
        }
        let labels = Labels::MultiHot { labels: rows, num_classes: 1 };
        let cfg = PlattConfig { iterations: 1500, ..PlattConfig::default() };
        let fit = fit_platt(&z, &labels, &cfg).unwrap();
        let CalibrationMap::PerClassPlatt { scale, bias } = &fit.map else { panic!() };
        assert!((scale[0] - 2.0).abs() < 0.25, "{scale:?}");
        assert!((bias[0] + 0.5).abs() < 0.2, "{bias:?}");
        let p = apply_calibration(&fit.map, &[0.25], 1, Head::Sigmoid);
        let expected = 1.0 / (1.0 + (-(scale[0] * 0.25 + bias[0])).exp());
        assert!((p[0] - expected).abs() < 1e-15);
    }
}
