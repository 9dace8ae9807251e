//! Distillation losses as differentiable graph nodes.
//!
//! [`build_loss`] appends the per-example terms and their batch mean to a
//! graph. Teacher-side quantities are constants with respect to the student,
//! so they are computed in `f64` by [`loss_bindings`] and bound as inputs.

use super::{DistillLossConfig, KlDirection, LossError, LossMode, PROB_FLOOR};
use crate::diffcore::{kernels, Graph, GraphError, NodeId, Real, Tensor};
use crate::model::Head;

pub const TARGETS: &str = "loss.targets";
pub const TARGETS_COMPLEMENT: &str = "loss.targets_complement";
/// `−ln max(q, floor)` (student-first KL).
pub const TEACHER_NEG_LOG: &str = "loss.teacher_neg_log";
pub const TEACHER_NEG_LOG_COMPLEMENT: &str = "loss.teacher_neg_log_complement";
/// Teacher probabilities (teacher-first KL).
pub const TEACHER_PROBS: &str = "loss.teacher_probs";
pub const TEACHER_PROBS_COMPLEMENT: &str = "loss.teacher_probs_complement";
/// Per-row `Σ q ln q` (teacher-first KL).
pub const TEACHER_SELF: &str = "loss.teacher_self";

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// Per-example terms, shape `[m]`.
    pub per_example: NodeId,
    /// Batch mean, shape `[1]`.
    pub batch: NodeId,
}

fn transform<S: Real>(g: &mut Graph<S>, z: NodeId, cfg: &DistillLossConfig) -> NodeId {
    match &cfg.mode {
        LossMode::Temperature { t } => g.scale(z, 1.0 / t),
        LossMode::Platt { map } => {
            let c = map.classes();
            let wt = g.constant(Tensor::new(vec![c, c], map.weight_transposed().iter().map(|&v| S::from_f64(v)).collect()));
            let b = g.constant(Tensor::new(vec![c], map.bias.iter().map(|&v| S::from_f64(v)).collect()));
            let h = g.matmul(z, wt);
            g.add_bias(h, b)
        }
        LossMode::Plain => z,
    }
}

/// Appends the loss for `cfg` on top of the `[m, c]` student logits node.
pub fn build_loss<S: Real>(g: &mut Graph<S>, student: NodeId, cfg: &DistillLossConfig) -> Result<LossNodes, GraphError> {
    let floor = PROB_FLOOR.ln();
    let u = transform(g, student, cfg);
    let kl = match (cfg.head, cfg.kl_direction) {
        (Head::Softmax, KlDirection::AsWritten) => {
            let lp = g.log_softmax(u);
            let p = g.softmax(u);
            let nlq = g.input(TEACHER_NEG_LOG)?;
            let d = g.add(lp, nlq);
            let terms = g.mul(p, d);
            g.sum_rows(terms)
        }
        (Head::Softmax, KlDirection::TeacherFirst) => {
            let lp = g.log_softmax(u);
            let lp = g.clamp_min(lp, floor);
            let q = g.input(TEACHER_PROBS)?;
            let cross = g.mul(q, lp);
            let cross = g.sum_rows(cross);
            let cross = g.scale(cross, -1.0);
            let own = g.input(TEACHER_SELF)?;
            g.add(own, cross)
        }
        (Head::Sigmoid, KlDirection::AsWritten) => {
            let neg_u = g.scale(u, -1.0);
            let lp = g.log_sigmoid(u);
            let l1p = g.log_sigmoid(neg_u);
            let p = g.sigmoid(u);
            let p1 = g.sigmoid(neg_u);
            let nlq = g.input(TEACHER_NEG_LOG)?;
            let nl1q = g.input(TEACHER_NEG_LOG_COMPLEMENT)?;
            let d = g.add(lp, nlq);
            let d1 = g.add(l1p, nl1q);
            let a = g.mul(p, d);
            let b = g.mul(p1, d1);
            let terms = g.add(a, b);
            g.sum_rows(terms)
        }
        (Head::Sigmoid, KlDirection::TeacherFirst) => {
            let neg_u = g.scale(u, -1.0);
            let lp = g.log_sigmoid(u);
            let lp = g.clamp_min(lp, floor);
            let l1p = g.log_sigmoid(neg_u);
            let l1p = g.clamp_min(l1p, floor);
            let q = g.input(TEACHER_PROBS)?;
            let q1 = g.input(TEACHER_PROBS_COMPLEMENT)?;
            let a = g.mul(q, lp);
            let b = g.mul(q1, l1p);
            let cross = g.add(a, b);
            let cross = g.sum_rows(cross);
            let cross = g.scale(cross, -1.0);
            let own = g.input(TEACHER_SELF)?;
            g.add(own, cross)
        }
    };
    let y = g.input(TARGETS)?;
    let ce = match cfg.head {
        Head::Softmax => {
            let l = g.log_softmax(student);
            let l = g.clamp_min(l, floor);
            let t = g.mul(y, l);
            g.sum_rows(t)
        }
        Head::Sigmoid => {
            let neg = g.scale(student, -1.0);
            let l = g.log_sigmoid(student);
            let l = g.clamp_min(l, floor);
            let l1 = g.log_sigmoid(neg);
            let l1 = g.clamp_min(l1, floor);
            let y1 = g.input(TARGETS_COMPLEMENT)?;
            let a = g.mul(y, l);
            let b = g.mul(y1, l1);
            let t = g.add(a, b);
            g.sum_rows(t)
        }
    };
    let kl = g.scale(kl, cfg.kl_weight());
    let ce = g.scale(ce, -(1.0 - cfg.alpha));
    let per_example = g.add(kl, ce);
    let batch = g.mean(per_example);
    Ok(LossNodes { per_example, batch })
}

fn entropy_like(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Input values for one batch. `onehot` and `teacher_logits` are row-major
/// `[m, c]` buffers.
pub fn loss_bindings<S: Real>(
    cfg: &DistillLossConfig,
    onehot: &[f64],
    teacher_logits: &[f64],
    m: usize,
    c: usize,
) -> Result<Vec<(&'static str, Tensor<S>)>, LossError> {
    cfg.validate(c)?;
    if onehot.len() != m * c || teacher_logits.len() != m * c {
        return Err(LossError::RowLength { row: 0, expected: m * c, got: onehot.len().min(teacher_logits.len()) });
    }
    let to_t = |shape: Vec<usize>, v: Vec<f64>| Tensor::new(shape, v.into_iter().map(S::from_f64).collect());
    let mut q = Vec::with_capacity(m * c);
    for row in teacher_logits.chunks(c) {
        let u = cfg.transform(row);
        match cfg.head {
            Head::Softmax => q.extend(kernels::softmax_rows(&u, c)),
            Head::Sigmoid => q.extend(u.iter().map(|&v| kernels::sigmoid(v))),
        }
    }
    let mut out = vec![(TARGETS, to_t(vec![m, c], onehot.to_vec()))];
    if cfg.head == Head::Sigmoid {
        out.push((TARGETS_COMPLEMENT, to_t(vec![m, c], onehot.iter().map(|y| 1.0 - y).collect())));
    }
    let neg_log = |p: f64| -p.max(PROB_FLOOR).ln();
    match (cfg.head, cfg.kl_direction) {
        (Head::Softmax, KlDirection::AsWritten) => {
            out.push((TEACHER_NEG_LOG, to_t(vec![m, c], q.iter().map(|&p| neg_log(p)).collect())));
        }
        (Head::Sigmoid, KlDirection::AsWritten) => {
            out.push((TEACHER_NEG_LOG, to_t(vec![m, c], q.iter().map(|&p| neg_log(p)).collect())));
            out.push((TEACHER_NEG_LOG_COMPLEMENT, to_t(vec![m, c], q.iter().map(|&p| neg_log(1.0 - p)).collect())));
        }
        (Head::Softmax, KlDirection::TeacherFirst) => {
            let own = q.chunks(c).map(|r| r.iter().map(|&p| entropy_like(p)).sum()).collect();
            out.push((TEACHER_SELF, to_t(vec![m], own)));
            out.push((TEACHER_PROBS, to_t(vec![m, c], q)));
        }
        (Head::Sigmoid, KlDirection::TeacherFirst) => {
            let own = q
                .chunks(c)
                .map(|r| r.iter().map(|&p| entropy_like(p) + entropy_like(1.0 - p)).sum())
                .collect();
            out.push((TEACHER_SELF, to_t(vec![m], own)));
            out.push((TEACHER_PROBS_COMPLEMENT, to_t(vec![m, c], q.iter().map(|p| 1.0 - p).collect())));
            out.push((TEACHER_PROBS, to_t(vec![m, c], q)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use crate::loss::{example_loss, AffineMap, KdFactor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, m: usize, c: usize, head: Head) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let zs = (0..m * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let zt = (0..m * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut y = vec![0.0; m * c];
        for i in 0..m {
            match head {
                Head::Softmax => y[i * c + rng.gen_range(0..c)] = 1.0,
                Head::Sigmoid => {
                    for k in 0..c {
                        y[i * c + k] = f64::from(rng.gen_bool(0.3) as u8);
                    }
                }
            }
        }
        (zs, zt, y)
    }

    fn configs(rng: &mut ChaCha8Rng, c: usize, head: Head) -> Vec<DistillLossConfig> {
        let alpha = rng.gen_range(0.0..1.0);
        let t = rng.gen_range(0.5..8.0);
        let w: Vec<f64> = (0..c * c).map(|k| if k % (c + 1) == 0 { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.3..0.3) }).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut out = Vec::new();
        for dir in [KlDirection::AsWritten, KlDirection::TeacherFirst] {
            let base = [
                DistillLossConfig::temperature(alpha, t),
                DistillLossConfig::platt(alpha, AffineMap { weight: w.clone(), bias: b.clone() }),
                DistillLossConfig::plain(alpha),
            ];
            for mut cfg in base {
                cfg.kl_direction = dir;
                cfg.head = head;
                out.push(cfg);
            }
        }
        let mut conv = DistillLossConfig::temperature(alpha, t).with_head(head);
        conv.kd_factor = KdFactor::Conventional;
        out.push(conv);
        out
    }

    #[test]
    fn graph_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (m, c) = (3, 5);
        for head in [Head::Softmax, Head::Sigmoid] {
            for _ in 0..10 {
                let (zs, zt, y) = random_case(&mut rng, m, c, head);
                for cfg in configs(&mut rng, c, head) {
                    let mut g = Graph::<f64>::verification();
                    let s = g.input("student").unwrap();
                    let nodes = build_loss(&mut g, s, &cfg).unwrap();
                    g.bind("student", Tensor::new(vec![m, c], zs.clone())).unwrap();
                    for (name, t) in loss_bindings(&cfg, &y, &zt, m, c).unwrap() {
                        g.bind(name, t).unwrap();
                    }
                    let per = g.evaluate(nodes.per_example).unwrap().clone();
                    for i in 0..m {
                        let r = i * c..(i + 1) * c;
                        let expected = example_loss(&zs[r.clone()], &y[r.clone()], &zt[r], &cfg);
                        assert!((per.data()[i] - expected).abs() < 1e-10, "{cfg:?}: {} vs {expected}", per.data()[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, c) = (2, 8);
        for head in [Head::Softmax, Head::Sigmoid] {
            for _ in 0..5 {
                let (zs, zt, y) = random_case(&mut rng, m, c, head);
                for cfg in configs(&mut rng, c, head) {
                    let mut g = Graph::<f64>::verification();
                    let s = g.param("student", Tensor::new(vec![m, c], zs.clone())).unwrap();
                    let nodes = build_loss(&mut g, s, &cfg).unwrap();
                    for (name, t) in loss_bindings(&cfg, &y, &zt, m, c).unwrap() {
                        g.bind(name, t).unwrap();
                    }
                    let err = finite_diff_check(&mut g, s, nodes.batch, 1e-5).unwrap();
                    assert!(err < 1e-4, "{cfg:?}: {err}");
                }
            }
        }
    }
}
