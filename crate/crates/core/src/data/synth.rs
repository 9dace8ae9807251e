use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Dataset, Labels, SplitTag};

/// Side length of the generated digit-style images.
pub const DIGIT_SIDE: usize = 28;
const DIGIT_CLASSES: usize = 10;
// Class shapes are fixed so that independently generated train and test sets
// share them.
const STYLE_SEED: u64 = 0x1D_5EED;
const BUMPS_PER_CLASS: usize = 4;
const MIX_MAX: f64 = 0.6;
const MAX_SHIFT: f64 = 2.0;
const PIXEL_NOISE: f64 = 0.15;

#[derive(Debug, Clone, Copy)]
struct Bump {
    x: f64,
    y: f64,
    sx: f64,
    sy: f64,
}

fn class_styles() -> Vec<Vec<Bump>> {
    let mut rng = ChaCha8Rng::seed_from_u64(STYLE_SEED);
    (0..DIGIT_CLASSES)
        .map(|_| {
            (0..BUMPS_PER_CLASS)
                .map(|_| Bump {
                    x: rng.gen_range(6.0..22.0),
                    y: rng.gen_range(6.0..22.0),
                    sx: rng.gen_range(1.5..4.0),
                    sy: rng.gen_range(1.5..4.0),
                })
                .collect()
        })
        .collect()
}

fn render(bumps: &[Bump], dx: f64, dy: f64, out: &mut [f64], weight: f64) {
    for r in 0..DIGIT_SIDE {
        for c in 0..DIGIT_SIDE {
            let mut v = 0.0f64;
            for b in bumps {
                let ex = (c as f64 - b.x - dx) / b.sx;
                let ey = (r as f64 - b.y - dy) / b.sy;
                v = v.max((-0.5 * (ex * ex + ey * ey)).exp());
            }
            out[r * DIGIT_SIDE + c] += weight * v;
        }
    }
}

/// MNIST-format stand-in: 28x28 greyscale images over 10 classes. Each image
/// blends its class shape with a random other class, is shifted a couple of
/// pixels and carries pixel noise, so classes overlap somewhat. Pixels are
/// quantized to bytes.
pub fn synth_digits(n: usize, seed: u64) -> Dataset {
    let styles = class_styles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let px = DIGIT_SIDE * DIGIT_SIDE;
    let mut features = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    let mut canvas = vec![0.0f64; px];
    for _ in 0..n {
        let y = rng.gen_range(0..DIGIT_CLASSES);
        let other = (y + rng.gen_range(1..DIGIT_CLASSES)) % DIGIT_CLASSES;
        let mix = rng.gen_range(0.0..MIX_MAX);
        let dx = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT);
        let dy = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT);
        canvas.fill(0.0);
        render(&styles[y], dx, dy, &mut canvas, 1.0 - mix);
        render(&styles[other], dx, dy, &mut canvas, mix);
        for &v in &canvas {
            let q = ((v + noise.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round() as u8;
            features.push(f32::from(q) / 255.0);
        }
        labels.push(y);
    }
    Dataset {
        features,
        sample_shape: vec![DIGIT_SIDE, DIGIT_SIDE, 1],
        labels: Labels::Classes { labels, num_classes: DIGIT_CLASSES },
        split: SplitTag::Train,
    }
}

/// Per-class positive rates for synthetic multi-label data.
#[derive(Debug, Clone, PartialEq)]
pub enum PrevalenceProfile {
    Uniform(f64),
    /// Geometric interpolation from the first class's rate to the last's.
    Skewed { first: f64, last: f64 },
    Explicit(Vec<f64>),
}

impl PrevalenceProfile {
    pub fn rates(&self, classes: usize) -> Result<Vec<f64>, DataError> {
        let rates = match self {
            PrevalenceProfile::Uniform(p) => vec![*p; classes],
            PrevalenceProfile::Skewed { first, last } => (0..classes)
                .map(|c| {
                    let t = if classes > 1 { c as f64 / (classes - 1) as f64 } else { 0.0 };
                    first * (last / first).powf(t)
                })
                .collect(),
            PrevalenceProfile::Explicit(v) => {
                if v.len() != classes {
                    return Err(DataError::Invalid(format!("{} prevalences for {classes} classes", v.len())));
                }
                v.clone()
            }
        };
        if rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Invalid(format!("prevalences must lie in [0, 1]: {rates:?}")));
        }
        Ok(rates)
    }
}

/// Tabular multi-label data: each class owns a random direction in feature
/// space; an example's features are the sum of its active classes' directions
/// plus Gaussian noise, squashed into (0, 1).
pub fn synth_multilabel(n: usize, classes: usize, profile: &PrevalenceProfile, seed: u64) -> Result<Dataset, DataError> {
    if classes < 2 {
        return Err(DataError::Invalid(format!("multi-label data needs at least 2 classes, got {classes}")));
    }
    let rates = profile.rates(classes)?;
    let dim = (2 * classes).max(8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| 2.0 * unit.sample(&mut rng)).collect()).collect();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut x = vec![0.0f64; dim];
    for _ in 0..n {
        let row: Vec<bool> = rates.iter().map(|&p| rng.gen_bool(p)).collect();
        for v in x.iter_mut() {
            *v = unit.sample(&mut rng);
        }
        for (center, _) in centers.iter().zip(&row).filter(|(_, &b)| b) {
            for (v, m) in x.iter_mut().zip(center) {
                *v += m;
            }
        }
        features.extend(x.iter().map(|&v| (1.0 / (1.0 + (-v / 2.0).exp())) as f32));
        labels.push(row);
    }
    Dataset::new(features, vec![dim], Labels::MultiHot { labels, num_classes: classes }, SplitTag::Train)
}
