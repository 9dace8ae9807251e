use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::structure::{LayerShape, Structure, StructureError};
use crate::diffcore::Tensor;

/// Weights and biases for a [`Structure`], ordered weight, bias per
/// trainable layer with the output projection last.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<Tensor<f32>>,
    pub seed: u64,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks tensor count and shapes against `structure`.
    pub fn matches(&self, structure: &Structure) -> bool {
        let Ok(layers) = structure.layers() else { return false };
        if self.tensors.len() != layers.len() * 2 {
            return false;
        }
        layers.iter().zip(self.tensors.chunks(2)).all(|(l, pair)| {
            pair[0].shape() == l.weight.as_slice() && pair[1].shape() == [l.bias]
        })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// He-uniform weights, `U(−√(6/fan_in), √(6/fan_in))`, and zero biases.
/// Deterministic for a given seed.
pub fn init_params(structure: &Structure, seed: u64) -> Result<ParamSet, StructureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for layer in structure.layers()? {
        tensors.push(he_uniform(&layer, &mut rng));
        tensors.push(Tensor::zeros(vec![layer.bias]));
    }
    Ok(ParamSet { tensors, seed })
}

fn he_uniform(layer: &LayerShape, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let bound = (6.0 / layer.fan_in() as f64).sqrt() as f32;
    let n = layer.weight.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(layer.weight.clone(), data)
}
