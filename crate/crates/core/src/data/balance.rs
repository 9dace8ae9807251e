use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::augment::{apply_transform, ImageShape, Transform};
use super::{DataError, Dataset, Labels};

/// Under-represented classes are topped up to this fraction of the reference
/// count (largest class, or median positives for multi-label data).
pub const DEFAULT_BALANCE_THRESHOLD: f64 = 0.5;

/// One synthesized example: the training row it came from and what was done.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentRecord {
    pub index: usize,
    pub source: usize,
    pub class: usize,
    pub transforms: Vec<Transform>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub target: usize,
    pub counts_before: Vec<usize>,
    pub counts_after: Vec<usize>,
    pub records: Vec<AugmentRecord>,
    pub warnings: Vec<String>,
}

fn random_transforms<R: Rng>(rng: &mut R, s: ImageShape, geometric: bool) -> Vec<Transform> {
    let mut out = Vec::new();
    if geometric {
        let mut options = vec![Transform::HFlip, Transform::VFlip, Transform::Rot180];
        if s.h == s.w {
            options.extend([Transform::Rot90, Transform::Rot270]);
        }
        out.push(*options.choose(rng).expect("non-empty"));
    }
    let (lo, hi) = (0.8f32, 1.2f32);
    out.push(Transform::Brightness(rng.gen_range(lo..=hi)));
    out.push(Transform::Contrast(rng.gen_range(lo..=hi)));
    out
}

fn median(v: &[usize]) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0
    }
}

/// Oversamples training examples of rare classes with random label-preserving
/// transforms until every class reaches `ceil(threshold * reference)`.
/// Image data may be flipped or rotated; tabular data only gets brightness and
/// contrast. New rows are appended after the originals.
pub fn balance_oversample(ds: &Dataset, threshold: f64, seed: u64) -> Result<(Dataset, BalanceReport), DataError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DataError::Invalid(format!("balance threshold {threshold} outside [0, 1]")));
    }
    let shape = ImageShape::from_sample_shape(&ds.sample_shape);
    let geometric = ds.is_image();
    let before = ds.labels.class_counts();
    let reference = match ds.labels {
        Labels::Classes { .. } => before.iter().copied().max().unwrap_or(0) as f64,
        Labels::MultiHot { .. } => median(&before),
    };
    let target = (threshold * reference).ceil() as usize;
    let mut out = ds.clone();
    let mut counts = before.clone();
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&c| (before[c], c));
    for class in order {
        if counts[class] >= target {
            continue;
        }
        let sources: Vec<usize> = (0..ds.len())
            .filter(|&i| match &ds.labels {
                Labels::Classes { labels, .. } => labels[i] == class,
                Labels::MultiHot { labels, .. } => labels[i][class],
            })
            .collect();
        if sources.is_empty() {
            let msg = format!("class {class} has no examples to oversample");
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        while counts[class] < target {
            let src = *sources.choose(&mut rng).expect("non-empty");
            let transforms = random_transforms(&mut rng, shape, geometric);
            let mut img = ds.row(src).to_vec();
            for &t in &transforms {
                img = apply_transform(&img, shape, t)?;
            }
            out.features.extend_from_slice(&img);
            out.labels.push_from(&ds.labels, src);
            match &ds.labels {
                Labels::Classes { .. } => counts[class] += 1,
                Labels::MultiHot { labels, .. } => {
                    for (c, &b) in counts.iter_mut().zip(&labels[src]) {
                        *c += usize::from(b);
                    }
                }
            }
            records.push(AugmentRecord { index: out.len() - 1, source: src, class, transforms });
        }
    }
    Ok((out, BalanceReport { target, counts_before: before, counts_after: counts, records, warnings }))
}
