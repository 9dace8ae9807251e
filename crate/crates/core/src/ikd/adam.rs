use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S = f32> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![S::zero(); n], vec![S::zero(); n])).unzip();
        Self { m, v, step: 0 }
    }

    pub fn for_tensors(params: &[Tensor<S>]) -> Self {
        Self::new(params.iter().map(Tensor::len))
    }
}

/// Per-step coefficients shared by every tensor in one update.
#[derive(Debug, Clone, Copy)]
pub struct AdamStep<S> {
    b1: S,
    b2: S,
    lr: S,
    inv_c1: S,
    inv_c2: S,
    eps: S,
}

impl<S: Real> AdamState<S> {
    /// Advances the step counter and returns its bias-corrected coefficients.
    pub fn advance(&mut self, cfg: &AdamConfig) -> AdamStep<S> {
        self.step += 1;
        let t = self.step as f64;
        AdamStep {
            b1: S::from_f64(cfg.beta1),
            b2: S::from_f64(cfg.beta2),
            lr: S::from_f64(cfg.learning_rate),
            inv_c1: S::from_f64(1.0 / (1.0 - cfg.beta1.powf(t))),
            inv_c2: S::from_f64(1.0 / (1.0 - cfg.beta2.powf(t))),
            eps: S::from_f64(cfg.epsilon),
        }
    }

    /// Updates parameter tensor `k` in place.
    pub fn apply(&mut self, k: usize, param: &mut Tensor<S>, grad: &Tensor<S>, c: &AdamStep<S>) {
        assert_eq!(param.len(), grad.len());
        let one = S::one();
        let (m, v) = (&mut self.m[k], &mut self.v[k]);
        for (((w, &g), mv), vv) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = c.b1 * *mv + (one - c.b1) * g;
            *vv = c.b2 * *vv + (one - c.b2) * g * g;
            let mhat = *mv * c.inv_c1;
            let vhat = *vv * c.inv_c2;
            *w = *w - c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
}

/// One bias-corrected Adam step applied in place to every parameter tensor.
pub fn adam_update<S: Real>(params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>], state: &mut AdamState<S>, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let coeffs = state.advance(cfg);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.apply(k, p, g, &coeffs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: &mut Tensor<f64>, g: &Tensor<f64>, s: &mut AdamState<f64>, cfg: &AdamConfig) {
        adam_update(&mut [p], &[g], s, cfg);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let g = Tensor::zeros(vec![3]);
        let mut s = AdamState::for_tensors(std::slice::from_ref(&p));
        for _ in 0..10 {
            step(&mut p, &g, &mut s, &cfg);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let cfg = AdamConfig { learning_rate: 1e-3, ..Default::default() };
        let mut p = Tensor::new(vec![3], vec![0.0; 3]);
        let g = Tensor::new(vec![3], vec![0.5, -3.0, 1e-2]);
        let mut s = AdamState::for_tensors(std::slice::from_ref(&p));
        step(&mut p, &g, &mut s, &cfg);
        for (&w, &gv) in p.data().iter().zip(g.data()) {
            assert!((w + 1e-3 * gv.signum()).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn constant_gradient_steady_state() {
        let cfg = AdamConfig { learning_rate: 1e-2, ..Default::default() };
        let mut p = Tensor::new(vec![2], vec![0.0; 2]);
        let g = Tensor::new(vec![2], vec![4.0, -0.25]);
        let mut s = AdamState::for_tensors(std::slice::from_ref(&p));
        let mut prev = p.clone();
        for _ in 0..2000 {
            prev = p.clone();
            step(&mut p, &g, &mut s, &cfg);
        }
        for ((&w, &w0), &gv) in p.data().iter().zip(prev.data()).zip(g.data()) {
            let delta = w - w0;
            assert!((delta + 1e-2 * gv.signum()).abs() < 1e-6, "{delta}");
        }
    }

    #[test]
    fn f32_update_matches_f64() {
        let cfg = AdamConfig::default();
        let mut p32 = Tensor::new(vec![2], vec![0.3f32, -0.1]);
        let mut p64: Tensor<f64> = p32.cast();
        let g32 = Tensor::new(vec![2], vec![0.2f32, 0.7]);
        let g64: Tensor<f64> = g32.cast();
        let mut s32 = AdamState::for_tensors(std::slice::from_ref(&p32));
        let mut s64 = AdamState::for_tensors(std::slice::from_ref(&p64));
        for _ in 0..5 {
            adam_update(&mut [&mut p32], &[&g32], &mut s32, &cfg);
            adam_update(&mut [&mut p64], &[&g64], &mut s64, &cfg);
        }
        for (a, b) in p32.data().iter().zip(p64.data()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}
