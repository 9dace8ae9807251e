use super::structure::{BlockSpec, Structure};
use super::{Model, ModelError, ParamSet};
use crate::diffcore::{Graph, NodeId, Real, Tensor};

/// Appends the network for `structure` to `graph`, reading from `input`
/// (shape `[n] ++ input_shape`). Returns the logits node and the parameter
/// leaves in [`ParamSet`] order.
pub fn build_network<S: Real>(
    graph: &mut Graph<S>,
    structure: &Structure,
    params: &ParamSet,
    input: NodeId,
) -> Result<(NodeId, Vec<NodeId>), ModelError> {
    if !params.matches(structure) {
        return Err(ModelError::ParamMismatch);
    }
    let mut ids = Vec::with_capacity(params.tensors.len());
    let mut param = |g: &mut Graph<S>, t: &Tensor<f32>| -> Result<NodeId, ModelError> {
        let id = g.param(&format!("param{}", ids.len()), t.cast())?;
        ids.push(id);
        Ok(id)
    };
    let mut tensors = params.tensors.iter();
    let mut x = input;
    for block in &structure.blocks {
        match block {
            BlockSpec::Dense { .. } => {
                let w = param(graph, tensors.next().unwrap())?;
                let b = param(graph, tensors.next().unwrap())?;
                let h = graph.matmul(x, w);
                let h = graph.add_bias(h, b);
                x = graph.relu(h);
            }
            BlockSpec::Conv { .. } => {
                let k = param(graph, tensors.next().unwrap())?;
                let b = param(graph, tensors.next().unwrap())?;
                let h = graph.conv2d(x, k);
                let h = graph.add_channel_bias(h, b);
                x = graph.relu(h);
            }
            BlockSpec::Pool => x = graph.max_pool2(x),
            BlockSpec::Flatten => x = graph.flatten(x),
        }
    }
    let w = param(graph, tensors.next().unwrap())?;
    let b = param(graph, tensors.next().unwrap())?;
    let h = graph.matmul(x, w);
    let logits = graph.add_bias(h, b);
    Ok((logits, ids))
}

/// A model compiled into a reusable graph.
pub struct Network<S: Real = f32> {
    pub graph: Graph<S>,
    pub input: NodeId,
    pub logits: NodeId,
    pub params: Vec<NodeId>,
    structure: Structure,
}

impl<S: Real> Network<S> {
    pub fn new(structure: &Structure, params: &ParamSet) -> Result<Self, ModelError> {
        let mut graph = Graph::new();
        let input = graph.input("input")?;
        let (logits, params) = build_network(&mut graph, structure, params, input)?;
        Ok(Self { graph, input, logits, params, structure: structure.clone() })
    }

    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut shape = vec![n];
        shape.extend_from_slice(&self.structure.input_shape);
        shape
    }

    /// Logits for `n` flattened examples stored row-major in `rows`.
    pub fn logits_for(&mut self, rows: &[S], n: usize) -> Result<Tensor<S>, ModelError> {
        let shape = self.batch_shape(n);
        let batch = Tensor::try_new(shape.clone(), rows.to_vec())
            .ok_or(ModelError::BatchShape { expected: shape, got: vec![rows.len()] })?;
        self.graph.set_value(self.input, batch);
        Ok(self.graph.evaluate(self.logits)?.clone())
    }

    /// Copies parameter values out of the graph.
    pub fn param_set(&self, seed: u64) -> ParamSet {
        let tensors = self
            .params
            .iter()
            .map(|&id| self.graph.value(id).expect("parameter leaf always holds a value").cast())
            .collect();
        ParamSet { tensors, seed }
    }
}

/// Pre-head logits, shape `[batch, num_classes]`.
pub fn forward(model: &Model, batch: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
    let mut expected = vec![batch.rows()];
    expected.extend_from_slice(&model.structure.input_shape);
    if batch.shape() != expected.as_slice() {
        return Err(ModelError::BatchShape { expected, got: batch.shape().to_vec() });
    }
    let mut net = Network::<f32>::new(&model.structure, &model.params)?;
    net.graph.set_value(net.input, batch.clone());
    Ok(net.graph.evaluate(net.logits)?.clone())
}

/// Logits for a flat `[n × input_len]` feature buffer, evaluated in chunks.
pub fn predict_logits(model: &Model, features: &[f32], n: usize) -> Result<Tensor<f32>, ModelError> {
    const CHUNK: usize = 512;
    let d = model.structure.input_len();
    if features.len() != n * d {
        return Err(ModelError::BatchShape { expected: vec![n, d], got: vec![features.len()] });
    }
    let mut net = Network::<f32>::new(&model.structure, &model.params)?;
    let c = model.structure.num_classes;
    let mut out = Vec::with_capacity(n * c);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let logits = net.logits_for(&features[start * d..end * d], end - start)?;
        out.extend_from_slice(logits.data());
        start = end;
    }
    Ok(Tensor::new(vec![n, c], out))
}
