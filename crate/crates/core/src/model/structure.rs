use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StructureError {
    #[error("block {index}: {detail}")]
    InvalidBlock { index: usize, detail: String },
    #[error("output layer: {0}")]
    InvalidHead(String),
    #[error("num_classes must be at least 1")]
    NoClasses,
    #[error("refinement fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Mutually exclusive classes.
    Softmax,
    /// Independent per-class probabilities (multi-label).
    Sigmoid,
}

/// One hidden block. Dense and conv blocks are followed by a rectified-linear
/// activation; the output projection to `num_classes` is implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockSpec {
    Dense { width: usize },
    Conv { filters: usize, kernel: usize },
    Pool,
    Flatten,
}

impl BlockSpec {
    pub fn width(&self) -> Option<usize> {
        match *self {
            BlockSpec::Dense { width } => Some(width),
            BlockSpec::Conv { filters, .. } => Some(filters),
            BlockSpec::Pool | BlockSpec::Flatten => None,
        }
    }
}

/// Network shape: hidden blocks, per-example input shape (`[features]` for
/// dense stacks, `[channels, height, width]` for conv stacks), class count
/// and output head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Structure {
    pub blocks: Vec<BlockSpec>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub head: Head,
}

/// Shape of one trainable layer: weight shape and bias length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub block: Option<usize>,
    pub weight: Vec<usize>,
    pub bias: usize,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.weight.iter().product::<usize>() + self.bias
    }

    pub fn fan_in(&self) -> usize {
        self.weight.iter().product::<usize>() / self.bias
    }
}

impl Structure {
    /// Dense stack: `input → widths… → num_classes`.
    pub fn dense(input: usize, widths: &[usize], num_classes: usize, head: Head) -> Self {
        Self {
            blocks: widths.iter().map(|&width| BlockSpec::Dense { width }).collect(),
            input_shape: vec![input],
            num_classes,
            head,
        }
    }

    /// Hidden widths (dense units and conv filters) in block order.
    pub fn widths(&self) -> Vec<usize> {
        self.blocks.iter().filter_map(BlockSpec::width).collect()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Trainable layers in parameter order, with the output projection last.
    /// Fails if the block shapes do not chain from `input_shape`.
    pub fn layers(&self) -> Result<Vec<LayerShape>, StructureError> {
        if self.num_classes == 0 {
            return Err(StructureError::NoClasses);
        }
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(StructureError::InvalidHead(format!("bad input shape {shape:?}")));
        }
        let mut out = Vec::new();
        for (index, block) in self.blocks.iter().enumerate() {
            let bad = |detail: String| StructureError::InvalidBlock { index, detail };
            match *block {
                BlockSpec::Dense { width } => {
                    if width == 0 {
                        return Err(bad("width must be >= 1".into()));
                    }
                    if shape.len() != 1 {
                        return Err(bad(format!("dense block needs flat input, got {shape:?}")));
                    }
                    out.push(LayerShape { block: Some(index), weight: vec![shape[0], width], bias: width });
                    shape = vec![width];
                }
                BlockSpec::Conv { filters, kernel } => {
                    if filters == 0 {
                        return Err(bad("filter count must be >= 1".into()));
                    }
                    if kernel == 0 || kernel % 2 == 0 {
                        return Err(bad(format!("kernel must be odd and >= 1, got {kernel}")));
                    }
                    if shape.len() != 3 || shape[1] < kernel || shape[2] < kernel {
                        return Err(bad(format!("conv {kernel}x{kernel} cannot apply to {shape:?}")));
                    }
                    out.push(LayerShape {
                        block: Some(index),
                        weight: vec![filters, shape[0], kernel, kernel],
                        bias: filters,
                    });
                    shape = vec![filters, shape[1] - kernel + 1, shape[2] - kernel + 1];
                }
                BlockSpec::Pool => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(bad(format!("pool needs [c, h>=2, w>=2], got {shape:?}")));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                BlockSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                }
            }
        }
        if shape.len() != 1 {
            return Err(StructureError::InvalidHead(format!(
                "output projection needs flat features, got {shape:?}; add a flatten block"
            )));
        }
        out.push(LayerShape { block: None, weight: vec![shape[0], self.num_classes], bias: self.num_classes });
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), StructureError> {
        self.layers().map(|_| ())
    }
}

/// Trainable parameter count: `in·out + out` per dense layer (including the
/// output projection), `kernel²·in_channels·filters + filters` per conv block.
pub fn param_count(structure: &Structure) -> Result<usize, StructureError> {
    Ok(structure.layers()?.iter().map(LayerShape::param_count).sum())
}

/// `max(1, ⌈(1 − p)·w⌉)`, robust to the rounding error in `(1 − p)·w`.
pub fn reduce_width(width: usize, p: f64) -> usize {
    let scaled = (1.0 - p) * width as f64;
    let nearest = scaled.round();
    let reduced = if (scaled - nearest).abs() < 1e-9 { nearest } else { scaled.ceil() };
    (reduced as usize).max(1)
}

/// Block-reduction refinement: every dense width and conv filter count
/// shrinks by fraction `p`. Block kinds, kernels, head and class count are
/// untouched.
pub fn refine(structure: &Structure, p: f64) -> Result<Structure, StructureError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(StructureError::BadFraction(p));
    }
    let blocks = structure
        .blocks
        .iter()
        .map(|b| match *b {
            BlockSpec::Dense { width } => BlockSpec::Dense { width: reduce_width(width, p) },
            BlockSpec::Conv { filters, kernel } => BlockSpec::Conv { filters: reduce_width(filters, p), kernel },
            other => other,
        })
        .collect();
    Ok(Structure { blocks, ..structure.clone() })
}
