//! Datasets: IDX and CSV ingestion, synthetic generators, stratified
//! splitting and class-balancing augmentation.

mod augment;
mod balance;
mod csv_io;
mod idx;
mod split;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, apply_transform, ImageShape, Transform, TransformSpec};
pub use balance::{balance_oversample, AugmentRecord, BalanceReport, DEFAULT_BALANCE_THRESHOLD};
pub use csv_io::{load_csv, parse_csv, CsvSchema};
pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, write_idx, IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
};
pub use split::{stratified_split, Splits};
pub use synth::{synth_digits, synth_multilabel, PrevalenceProfile, DIGIT_SIDE};

use crate::model::Head;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated { what: &'static str, expected: usize, found: usize },
    #[error("{0} trailing bytes after IDX payload")]
    TrailingBytes(usize),
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("row {row}: {detail}")]
    Csv { row: usize, detail: String },
    #[error("no rows")]
    NoRows,
    #[error("unknown transform `{0}`")]
    UnknownTransform(String),
    #[error("transform {transform:?} cannot apply to a {h}x{w} image")]
    Transform { transform: Transform, h: usize, w: usize },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Class indices (multi-class) or per-class membership (multi-label).
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes { labels: Vec<usize>, num_classes: usize },
    MultiHot { labels: Vec<Vec<bool>>, num_classes: usize },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { labels, .. } => labels.len(),
            Labels::MultiHot { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Labels::Classes { num_classes, .. } | Labels::MultiHot { num_classes, .. } => *num_classes,
        }
    }

    pub fn head(&self) -> Head {
        match self {
            Labels::Classes { .. } => Head::Softmax,
            Labels::MultiHot { .. } => Head::Sigmoid,
        }
    }

    /// Writes the one-hot (or multi-hot) row for example `i` into `out`.
    pub fn write_onehot(&self, i: usize, out: &mut [f64]) {
        out.fill(0.0);
        match self {
            Labels::Classes { labels, .. } => out[labels[i]] = 1.0,
            Labels::MultiHot { labels, .. } => {
                for (o, &b) in out.iter_mut().zip(&labels[i]) {
                    *o = if b { 1.0 } else { 0.0 };
                }
            }
        }
    }

    /// Row-major `[indices.len(), num_classes]` target buffer.
    pub fn onehot_rows(&self, indices: &[usize]) -> Vec<f64> {
        let c = self.num_classes();
        let mut out = vec![0.0; indices.len() * c];
        for (row, &i) in out.chunks_mut(c).zip(indices) {
            self.write_onehot(i, row);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Classes { labels, num_classes } => Labels::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Labels::MultiHot { labels, num_classes } => Labels::MultiHot {
                labels: indices.iter().map(|&i| labels[i].clone()).collect(),
                num_classes: *num_classes,
            },
        }
    }

    /// Examples per class (multi-class) or positives per class (multi-label).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        match self {
            Labels::Classes { labels, .. } => labels.iter().for_each(|&l| counts[l] += 1),
            Labels::MultiHot { labels, .. } => {
                for row in labels {
                    for (c, &b) in counts.iter_mut().zip(row) {
                        *c += usize::from(b);
                    }
                }
            }
        }
        counts
    }

    fn push_from(&mut self, other: &Labels, i: usize) {
        match (self, other) {
            (Labels::Classes { labels, .. }, Labels::Classes { labels: src, .. }) => labels.push(src[i]),
            (Labels::MultiHot { labels, .. }, Labels::MultiHot { labels: src, .. }) => labels.push(src[i].clone()),
            _ => panic!("label kinds differ"),
        }
    }
}

/// Examples stored row-major as flat `f32` features in `[0, 1]`.
/// `sample_shape` is `[height, width, channels]` for images and `[features]`
/// for tabular data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub sample_shape: Vec<usize>,
    pub labels: Labels,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(features: Vec<f32>, sample_shape: Vec<usize>, labels: Labels, split: SplitTag) -> Result<Self, DataError> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || features.len() != d * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} feature values do not form {} examples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { features, sample_shape, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn is_image(&self) -> bool {
        self.sample_shape.len() == 3
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.feature_len();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        let d = self.feature_len();
        let mut features = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset { features, sample_shape: self.sample_shape.clone(), labels: self.labels.subset(indices), split }
    }

    /// Widens the class count, e.g. so a test split shares the train split's.
    pub fn with_num_classes(mut self, n: usize) -> Self {
        match &mut self.labels {
            Labels::Classes { num_classes, .. } => *num_classes = (*num_classes).max(n),
            Labels::MultiHot { .. } => {}
        }
        self
    }

    /// Gathers the rows at `indices` in the layout a model with `input_shape`
    /// expects: images become channel-first when the model is convolutional.
    pub fn gather(&self, indices: &[usize], input_shape: &[usize], out: &mut Vec<f32>) {
        out.clear();
        let transpose = input_shape.len() == 3 && self.is_image() && self.sample_shape[2] > 1;
        for &i in indices {
            let row = self.row(i);
            if transpose {
                let (h, w, c) = (self.sample_shape[0], self.sample_shape[1], self.sample_shape[2]);
                for ch in 0..c {
                    for p in 0..h * w {
                        out.push(row[p * c + ch]);
                    }
                }
            } else {
                out.extend_from_slice(row);
            }
        }
    }

    /// Model input shape for a dense stack (`[features]`) or a conv stack
    /// (`[channels, height, width]`).
    pub fn input_shape(&self, convolutional: bool) -> Vec<usize> {
        if convolutional && self.is_image() {
            vec![self.sample_shape[2], self.sample_shape[0], self.sample_shape[1]]
        } else {
            vec![self.feature_len()]
        }
    }

    pub fn append(&mut self, other: &Dataset, i: usize) {
        self.features.extend_from_slice(other.row(i));
        self.labels.push_from(&other.labels, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_transposes_multichannel_images() {
        // one 1x2 image with 3 channels: pixels (a0 a1 a2) (b0 b1 b2)
        let ds = Dataset::new(
            vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            vec![1, 2, 3],
            Labels::Classes { labels: vec![0], num_classes: 2 },
            SplitTag::Train,
        )
        .unwrap();
        let mut out = Vec::new();
        ds.gather(&[0], &[3, 1, 2], &mut out);
        assert_eq!(out, vec![0.0, 0.3, 0.1, 0.4, 0.2, 0.5]);
        ds.gather(&[0], &[6], &mut out);
        assert_eq!(out, ds.features);
    }

    #[test]
    fn onehot_rows_for_both_kinds() {
        let l = Labels::Classes { labels: vec![2, 0], num_classes: 3 };
        assert_eq!(l.onehot_rows(&[0, 1]), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let m = Labels::MultiHot { labels: vec![vec![true, false, true]], num_classes: 3 };
        assert_eq!(m.onehot_rows(&[0]), vec![1.0, 0.0, 1.0]);
        assert_eq!(m.class_counts(), vec![1, 0, 1]);
    }
}
