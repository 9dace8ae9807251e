//! Forward and backward kernels over flat row-major buffers.

use super::tensor::Real;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

/// Gradient w.r.t. the left operand: `g[m×n] · bᵀ`.
pub fn matmul_grad_lhs<S: Real>(g: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut ga = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            ga[i * k + p] = acc;
        }
    }
    ga
}

/// Gradient w.r.t. the right operand: `aᵀ · g[m×n]`.
pub fn matmul_grad_rhs<S: Real>(a: &[S], g: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut gb = vec![S::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (gbv, &gv) in gbrow.iter_mut().zip(grow) {
                *gbv = *gbv + aip * gv;
            }
        }
    }
    gb
}

/// Row-wise log-sum-exp with max subtraction.
pub fn log_sum_exp<S: Real>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    let sum = row.iter().fold(S::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

pub fn softmax_rows<S: Real>(x: &[S], width: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    out
}

pub fn log_softmax_rows<S: Real>(x: &[S], width: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln σ(x) = min(x, 0) − ln(1 + e^{−|x|})`
#[inline]
pub fn log_sigmoid<S: Real>(x: S) -> S {
    x.min(S::zero()) - (-x.abs()).exp().ln_1p()
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }
}

/// Stride-1, unpadded cross-correlation. `x[n,c,h,w]`, `k[f,c,kh,kw]`.
pub fn conv2d<S: Real>(x: &[S], k: &[S], d: &ConvDims) -> Vec<S> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![S::zero(); d.batch * d.filters * oh * ow];
    for n in 0..d.batch {
        for f in 0..d.filters {
            let obase = (n * d.filters + f) * oh * ow;
            for c in 0..d.in_ch {
                let xbase = (n * d.in_ch + c) * d.h * d.w;
                let kbase = (f * d.in_ch + c) * d.kh * d.kw;
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let kv = k[kbase + ki * d.kw + kj];
                        for i in 0..oh {
                            let orow = &mut out[obase + i * ow..obase + (i + 1) * ow];
                            let xrow = &x[xbase + (i + ki) * d.w + kj..xbase + (i + ki) * d.w + kj + ow];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o = *o + kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad wrt input, grad wrt kernel); the input gradient is skipped
/// when `need_input` is false.
pub fn conv2d_backward<S: Real>(
    x: &[S],
    k: &[S],
    g: &[S],
    d: &ConvDims,
    need_input: bool,
) -> (Option<Vec<S>>, Vec<S>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut gk = vec![S::zero(); k.len()];
    let mut gx = if need_input { Some(vec![S::zero(); x.len()]) } else { None };
    for n in 0..d.batch {
        for f in 0..d.filters {
            let gbase = (n * d.filters + f) * oh * ow;
            for c in 0..d.in_ch {
                let xbase = (n * d.in_ch + c) * d.h * d.w;
                let kbase = (f * d.in_ch + c) * d.kh * d.kw;
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let kv = k[kbase + ki * d.kw + kj];
                        let mut acc = S::zero();
                        for i in 0..oh {
                            let grow = &g[gbase + i * ow..gbase + (i + 1) * ow];
                            let xoff = xbase + (i + ki) * d.w + kj;
                            let xrow = &x[xoff..xoff + ow];
                            for (&gv, &xv) in grow.iter().zip(xrow) {
                                acc = acc + gv * xv;
                            }
                            if let Some(gx) = gx.as_mut() {
                                let gxrow = &mut gx[xoff..xoff + ow];
                                for (gxv, &gv) in gxrow.iter_mut().zip(grow) {
                                    *gxv = *gxv + kv * gv;
                                }
                            }
                        }
                        gk[kbase + ki * d.kw + kj] = gk[kbase + ki * d.kw + kj] + acc;
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// 2×2 max pool, stride 2, trailing odd row/column dropped. Returns the
/// pooled values and the flat source index of each maximum.
pub fn max_pool2<S: Real>(x: &[S], planes: usize, h: usize, w: usize) -> (Vec<S>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + di) * w + 2 * j + dj;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}
