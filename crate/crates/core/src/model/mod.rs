//! Network structures, parameters, forward inference and the
//! block-reduction refinement operator.

mod checkpoint;
mod network;
mod params;
mod structure;

use thiserror::Error;

pub use checkpoint::{checkpoint_load, checkpoint_save, decode, encode, CheckpointError};
pub use network::{build_network, forward, predict_logits, Network};
pub use params::{init_params, ParamSet};
pub use structure::{param_count, reduce_width, refine, BlockSpec, Head, LayerShape, Structure, StructureError};

use crate::diffcore::GraphError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error("parameters do not match the structure")]
    ParamMismatch,
    #[error("batch shape {got:?} does not match expected {expected:?}")]
    BatchShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A network: structure plus parameters, labelled `M0`, `M1`, ….
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub id: String,
    pub structure: Structure,
    pub params: ParamSet,
}

impl Model {
    pub fn new(id: impl Into<String>, structure: Structure, params: ParamSet) -> Result<Self, ModelError> {
        structure.validate()?;
        if !params.matches(&structure) {
            return Err(ModelError::ParamMismatch);
        }
        Ok(Self { id: id.into(), structure, params })
    }

    /// Freshly initialized model.
    pub fn init(id: impl Into<String>, structure: Structure, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&structure, seed)?;
        Ok(Self { id: id.into(), structure, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn zero_weights_zero_input() {
        let s = Structure::dense(4, &[3], 2, Head::Softmax);
        let mut m = Model::init("M0", s, 1).unwrap();
        for t in &mut m.params.tensors {
            t.data_mut().fill(0.0);
        }
        let out = forward(&m, &Tensor::zeros(vec![2, 4])).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_identical_logits() {
        let s = Structure::dense(5, &[7, 3], 4, Head::Softmax);
        let m = Model::init("M0", s, 9).unwrap();
        let row = [0.1f32, 0.9, 0.3, 0.0, 0.5];
        let batch = Tensor::new(vec![3, 5], row.repeat(3));
        let out = forward(&m, &batch).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn hand_set_two_layer_dense() {
        // x = (1, 2); h = relu(x·W1 + b1); z = h·W2 + b2
        let s = Structure::dense(2, &[2], 2, Head::Softmax);
        let params = ParamSet {
            tensors: vec![
                Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]),
                Tensor::new(vec![2], vec![0.0, -10.0]),
                Tensor::new(vec![2, 2], vec![2.0, 1.0, 3.0, -1.0]),
                Tensor::new(vec![2], vec![0.5, 0.25]),
            ],
            seed: 0,
        };
        let m = Model::new("M0", s, params).unwrap();
        let out = forward(&m, &Tensor::new(vec![1, 2], vec![1.0, 2.0])).unwrap();
        // pre-activation: (1 + 1, -1 + 4 - 10) = (2, -7) -> relu (2, 0)
        // logits: (2·2 + 0.5, 2·1 + 0.25) = (4.5, 2.25)
        assert_eq!(out.data(), &[4.5, 2.25]);
    }

    #[test]
    fn batch_shape_checked() {
        let m = Model::init("M0", Structure::dense(4, &[3], 2, Head::Softmax), 1).unwrap();
        assert!(matches!(forward(&m, &Tensor::zeros(vec![2, 5])), Err(ModelError::BatchShape { .. })));
    }

    #[test]
    fn conv_model_forward_runs() {
        let s = Structure {
            blocks: vec![
                BlockSpec::Conv { filters: 2, kernel: 3 },
                BlockSpec::Pool,
                BlockSpec::Flatten,
                BlockSpec::Dense { width: 4 },
            ],
            input_shape: vec![1, 6, 6],
            num_classes: 3,
            head: Head::Softmax,
        };
        let m = Model::init("M0", s, 5).unwrap();
        let batch = Tensor::new(vec![2, 1, 6, 6], (0..72).map(|i| (i % 5) as f32 / 5.0).collect());
        let out = forward(&m, &batch).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.all_finite());
    }

    #[test]
    fn logits_survive_checkpoint() {
        let s = Structure::dense(6, &[5], 3, Head::Softmax);
        let m = Model::init("M1", s, 4).unwrap();
        let back = decode(&encode(&m).unwrap()).unwrap();
        let batch = Tensor::new(vec![2, 6], (0..12).map(|i| i as f32 / 12.0).collect());
        assert_eq!(forward(&m, &batch).unwrap(), forward(&back, &batch).unwrap());
    }
}
