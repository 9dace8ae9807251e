use std::collections::HashMap;

use thiserror::Error;

use super::kernels::{self, ConvDims};
use super::tensor::{Real, Tensor};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch { node: NodeId, op: &'static str, detail: String },
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("no input named `{0}`")]
    UnknownInput(String),
    #[error("name `{0}` is already used in this graph")]
    DuplicateName(String),
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("backprop root {node} is not scalar (shape {shape:?})")]
    RootNotScalar { node: NodeId, shape: Vec<usize> },
    #[error("node {0} has not been evaluated")]
    NotEvaluated(NodeId),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExp(NodeId),
    ClampMin(NodeId, f64),
    Conv2d(NodeId, NodeId),
    MaxPool2(NodeId),
    Flatten(NodeId),
    SumRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::ClampMin(..) => "clamp_min",
            Op::Conv2d(..) => "conv2d",
            Op::MaxPool2(_) => "max_pool2",
            Op::Flatten(_) => "flatten",
            Op::SumRows(_) => "sum_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::AddChannelBias(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::Conv2d(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::ClampMin(a, _) => vec![a],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a)
            | Op::MaxPool2(a)
            | Op::Flatten(a)
            | Op::SumRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op,
    value: Option<Tensor<S>>,
    requires_grad: bool,
    /// Argmax positions recorded by max-pool for its backward pass.
    pool_index: Vec<usize>,
}

/// Static computation graph. Nodes are appended in topological order; leaves
/// are either bound inputs or trainable parameters.
#[derive(Debug, Clone)]
pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
    names: HashMap<String, NodeId>,
    verify: bool,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by node id.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl Graph<f64> {
    /// Double-precision graph that rejects non-finite intermediates.
    pub fn verification() -> Self {
        Self { verify: true, ..Self::new() }
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), names: HashMap::new(), verify: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match op {
            Op::Leaf { trainable } => trainable,
            ref other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node { op, value: None, requires_grad, pool_index: Vec::new() });
        self.nodes.len() - 1
    }

    fn register(&mut self, name: &str, id: NodeId) -> Result<(), GraphError> {
        if self.names.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        self.names.insert(name.to_string(), id);
        Ok(())
    }

    /// Named non-trainable leaf, bound before each evaluation.
    pub fn input(&mut self, name: &str) -> Result<NodeId, GraphError> {
        let id = self.push(Op::Leaf { trainable: false });
        self.register(name, id)?;
        Ok(id)
    }

    /// Fixed, unnamed leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        let id = self.push(Op::Leaf { trainable: false });
        self.nodes[id].value = Some(value);
        id
    }

    /// Trainable leaf with an initial value.
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Result<NodeId, GraphError> {
        let id = self.push(Op::Leaf { trainable: true });
        self.nodes[id].value = Some(value);
        self.register(name, id)?;
        Ok(id)
    }

    pub fn id_of(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn bind(&mut self, name: &str, value: Tensor<S>) -> Result<(), GraphError> {
        let id = self.id_of(name).ok_or_else(|| GraphError::UnknownInput(name.to_string()))?;
        self.set_value(id, value);
        Ok(())
    }

    /// Replace a leaf value. Panics if `id` is not a leaf.
    pub fn set_value(&mut self, id: NodeId, value: Tensor<S>) {
        assert!(matches!(self.nodes[id].op, Op::Leaf { .. }), "node {id} is not a leaf");
        self.nodes[id].value = Some(value);
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes.get(id).and_then(|n| n.value.as_ref())
    }

    /// Mutable access to a leaf value, for in-place parameter updates.
    pub fn leaf_mut(&mut self, id: NodeId) -> Option<&mut Tensor<S>> {
        let node = self.nodes.get_mut(id)?;
        match node.op {
            Op::Leaf { .. } => node.value.as_mut(),
            _ => None,
        }
    }

    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { trainable: true }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    /// Adds a length-`m` vector to every row of an `[n, m]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(x, bias))
    }
    /// Adds a per-channel bias to an `[n, f, h, w]` tensor.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddChannelBias(x, bias))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSigmoid(a))
    }
    /// Softmax over the last axis of an `[n, c]` tensor.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }
    /// Row-wise log-sum-exp: `[n, c]` to `[n]`.
    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExp(a))
    }
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.push(Op::ClampMin(a, floor))
    }
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> NodeId {
        self.push(Op::Conv2d(x, kernel))
    }
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2(x))
    }
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten(x))
    }
    /// `[n, ...]` to `[n]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumRows(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut live = vec![false; root + 1];
        live[root] = true;
        for id in (0..=root).rev() {
            if live[id] {
                for i in self.nodes[id].op.inputs() {
                    live[i] = true;
                }
            }
        }
        live
    }

    fn input_value(&self, id: NodeId) -> Result<&Tensor<S>, GraphError> {
        self.nodes[id].value.as_ref().ok_or(GraphError::NotEvaluated(id))
    }

    /// Forward pass over every ancestor of `root`; returns the root value.
    pub fn evaluate(&mut self, root: NodeId) -> Result<&Tensor<S>, GraphError> {
        let live = self.ancestors(root);
        for id in 0..=root {
            if !live[id] {
                continue;
            }
            if let Op::Leaf { .. } = self.nodes[id].op {
                if self.nodes[id].value.is_none() {
                    let name = self
                        .names
                        .iter()
                        .find(|(_, &v)| v == id)
                        .map(|(k, _)| k.clone())
                        .unwrap_or_else(|| format!("#{id}"));
                    return Err(GraphError::Unbound(name));
                }
                continue;
            }
            let (value, pool_index) = self.forward_node(id)?;
            if self.verify && !value.all_finite() {
                return Err(GraphError::NonFinite { node: id, op: self.nodes[id].op.name() });
            }
            self.nodes[id].value = Some(value);
            self.nodes[id].pool_index = pool_index;
        }
        self.input_value(root)
    }

    /// Bind the given inputs, then evaluate `root`.
    pub fn run(
        &mut self,
        inputs: impl IntoIterator<Item = (&'static str, Tensor<S>)>,
        root: NodeId,
    ) -> Result<&Tensor<S>, GraphError> {
        for (name, t) in inputs {
            self.bind(name, t)?;
        }
        self.evaluate(root)
    }

    fn mismatch(&self, id: NodeId, detail: String) -> GraphError {
        GraphError::ShapeMismatch { node: id, op: self.nodes[id].op.name(), detail }
    }

    fn forward_node(&self, id: NodeId) -> Result<(Tensor<S>, Vec<usize>), GraphError> {
        let op = self.nodes[id].op.clone();
        let unary = |a: NodeId, f: &dyn Fn(S) -> S| -> Result<Tensor<S>, GraphError> {
            let x = self.input_value(a)?;
            Ok(Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()))
        };
        let t = match op {
            Op::Leaf { .. } => unreachable!(),
            Op::MatMul(a, b) => {
                let (x, y) = (self.input_value(a)?, self.input_value(b)?);
                if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
                    return Err(self.mismatch(id, format!("{:?} x {:?}", x.shape(), y.shape())));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                Tensor::new(vec![m, n], kernels::matmul(x.data(), y.data(), m, k, n))
            }
            Op::AddBias(a, b) => {
                let (x, bias) = (self.input_value(a)?, self.input_value(b)?);
                if x.shape().len() != 2 || bias.len() != x.shape()[1] {
                    return Err(self.mismatch(id, format!("{:?} + bias {:?}", x.shape(), bias.shape())));
                }
                let w = x.shape()[1];
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(w) {
                    for (o, &bv) in row.iter_mut().zip(bias.data()) {
                        *o = *o + bv;
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::AddChannelBias(a, b) => {
                let (x, bias) = (self.input_value(a)?, self.input_value(b)?);
                if x.shape().len() != 4 || bias.len() != x.shape()[1] {
                    return Err(self.mismatch(id, format!("{:?} + bias {:?}", x.shape(), bias.shape())));
                }
                let plane = x.shape()[2] * x.shape()[3];
                let f = x.shape()[1];
                let mut out = x.data().to_vec();
                for (p, chunk) in out.chunks_mut(plane).enumerate() {
                    let bv = bias.data()[p % f];
                    for o in chunk {
                        *o = *o + bv;
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (x, y) = (self.input_value(a)?, self.input_value(b)?);
                if x.shape() != y.shape() {
                    return Err(self.mismatch(id, format!("{:?} vs {:?}", x.shape(), y.shape())));
                }
                let is_add = matches!(op, Op::Add(..));
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| if is_add { p + q } else { p * q })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Op::Scale(a, c) => {
                let c = S::from_f64(c);
                unary(a, &|v| v * c)?
            }
            Op::Relu(a) => unary(a, &|v| v.max(S::zero()))?,
            Op::Sigmoid(a) => unary(a, &kernels::sigmoid)?,
            Op::LogSigmoid(a) => unary(a, &kernels::log_sigmoid)?,
            Op::ClampMin(a, c) => {
                let c = S::from_f64(c);
                unary(a, &|v| v.max(c))?
            }
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let x = self.input_value(a)?;
                if x.shape().len() != 2 {
                    return Err(self.mismatch(id, format!("expected [n, c], got {:?}", x.shape())));
                }
                let w = x.shape()[1];
                let data = if matches!(op, Op::Softmax(_)) {
                    kernels::softmax_rows(x.data(), w)
                } else {
                    kernels::log_softmax_rows(x.data(), w)
                };
                Tensor::new(x.shape().to_vec(), data)
            }
            Op::LogSumExp(a) => {
                let x = self.input_value(a)?;
                if x.shape().len() != 2 {
                    return Err(self.mismatch(id, format!("expected [n, c], got {:?}", x.shape())));
                }
                let w = x.shape()[1];
                let data = x.data().chunks(w).map(kernels::log_sum_exp).collect();
                Tensor::new(vec![x.shape()[0]], data)
            }
            Op::Conv2d(a, b) => {
                let (x, k) = (self.input_value(a)?, self.input_value(b)?);
                let d = self.conv_dims(id, x, k)?;
                let out = kernels::conv2d(x.data(), k.data(), &d);
                Tensor::new(vec![d.batch, d.filters, d.out_h(), d.out_w()], out)
            }
            Op::MaxPool2(a) => {
                let x = self.input_value(a)?;
                let s = x.shape();
                if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                    return Err(self.mismatch(id, format!("expected [n, c, h>=2, w>=2], got {s:?}")));
                }
                let (out, idx) = kernels::max_pool2(x.data(), s[0] * s[1], s[2], s[3]);
                return Ok((Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out), idx));
            }
            Op::Flatten(a) => {
                let x = self.input_value(a)?;
                Tensor::new(vec![x.rows(), x.row_len()], x.data().to_vec())
            }
            Op::SumRows(a) => {
                let x = self.input_value(a)?;
                let w = x.row_len().max(1);
                let data = x.data().chunks(w).map(|r| r.iter().fold(S::zero(), |s, &v| s + v)).collect();
                Tensor::new(vec![x.rows()], data)
            }
            Op::Sum(a) | Op::Mean(a) => {
                let x = self.input_value(a)?;
                if x.is_empty() {
                    return Err(self.mismatch(id, "reduction over an empty tensor".into()));
                }
                let s = x.data().iter().fold(S::zero(), |s, &v| s + v);
                let v = if matches!(op, Op::Mean(_)) { s / S::from_f64(x.len() as f64) } else { s };
                Tensor::scalar(v)
            }
        };
        Ok((t, Vec::new()))
    }

    fn conv_dims(&self, id: NodeId, x: &Tensor<S>, k: &Tensor<S>) -> Result<ConvDims, GraphError> {
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] > xs[2] || ks[3] > xs[3] {
            return Err(self.mismatch(id, format!("input {xs:?} with kernel {ks:?}")));
        }
        Ok(ConvDims {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            filters: ks[0],
            kh: ks[2],
            kw: ks[3],
        })
    }

    /// Reverse pass from a scalar `root`. Gradients are returned for every
    /// node that requires one (trainable leaves and their dependents).
    pub fn backprop(&self, root: NodeId) -> Result<Gradients<S>, GraphError> {
        let rv = self.input_value(root)?;
        if !rv.is_scalar() {
            return Err(GraphError::RootNotScalar { node: root, shape: rv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::new(rv.shape().to_vec(), vec![S::one()]));
        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.backward_node(id, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match grads[input].as_mut() {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a = *a + v;
                        }
                    }
                    None => grads[input] = Some(gi),
                }
            }
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: NodeId, g: &Tensor<S>) -> Result<Vec<(NodeId, Tensor<S>)>, GraphError> {
        let node = &self.nodes[id];
        let out = self.input_value(id)?;
        let needs = |i: NodeId| self.nodes[i].requires_grad;
        let shaped = |like: &Tensor<S>, data: Vec<S>| Tensor::new(like.shape().to_vec(), data);
        let elementwise = |a: NodeId, f: &dyn Fn(S, S, S) -> S| -> Result<Vec<(NodeId, Tensor<S>)>, GraphError> {
            let x = self.input_value(a)?;
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect();
            Ok(vec![(a, shaped(x, data))])
        };
        let res = match node.op {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) => {
                let (x, y) = (self.input_value(a)?, self.input_value(b)?);
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let mut r = Vec::new();
                if needs(a) {
                    r.push((a, shaped(x, kernels::matmul_grad_lhs(g.data(), y.data(), m, k, n))));
                }
                if needs(b) {
                    r.push((b, shaped(y, kernels::matmul_grad_rhs(x.data(), g.data(), m, k, n))));
                }
                r
            }
            Op::AddBias(a, b) => {
                let bias = self.input_value(b)?;
                let w = bias.len();
                let mut gb = vec![S::zero(); w];
                for row in g.data().chunks(w) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                vec![(a, g.clone()), (b, shaped(bias, gb))]
            }
            Op::AddChannelBias(a, b) => {
                let bias = self.input_value(b)?;
                let x = self.input_value(a)?;
                let f = bias.len();
                let plane = x.shape()[2] * x.shape()[3];
                let mut gb = vec![S::zero(); f];
                for (p, chunk) in g.data().chunks(plane).enumerate() {
                    gb[p % f] = chunk.iter().fold(gb[p % f], |s, &v| s + v);
                }
                vec![(a, g.clone()), (b, shaped(bias, gb))]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Mul(a, b) => {
                let (x, y) = (self.input_value(a)?, self.input_value(b)?);
                let mut r = Vec::new();
                if needs(a) {
                    let d = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                    r.push((a, shaped(x, d)));
                }
                if needs(b) {
                    let d = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv * xv).collect();
                    r.push((b, shaped(y, d)));
                }
                r
            }
            Op::Scale(a, c) => {
                let c = S::from_f64(c);
                elementwise(a, &|_, _, gv| gv * c)?
            }
            Op::Relu(a) => elementwise(a, &|x, _, gv| if x > S::zero() { gv } else { S::zero() })?,
            Op::Sigmoid(a) => elementwise(a, &|_, y, gv| gv * y * (S::one() - y))?,
            Op::LogSigmoid(a) => elementwise(a, &|x, _, gv| gv * kernels::sigmoid(-x))?,
            Op::ClampMin(a, c) => {
                let c = S::from_f64(c);
                elementwise(a, &|x, _, gv| if x > c { gv } else { S::zero() })?
            }
            Op::Softmax(a) => {
                let x = self.input_value(a)?;
                let w = x.shape()[1];
                let mut d = Vec::with_capacity(x.len());
                for (srow, grow) in out.data().chunks(w).zip(g.data().chunks(w)) {
                    let dot = srow.iter().zip(grow).fold(S::zero(), |acc, (&s, &gv)| acc + s * gv);
                    d.extend(srow.iter().zip(grow).map(|(&s, &gv)| s * (gv - dot)));
                }
                vec![(a, shaped(x, d))]
            }
            Op::LogSoftmax(a) => {
                let x = self.input_value(a)?;
                let w = x.shape()[1];
                let mut d = Vec::with_capacity(x.len());
                for (lrow, grow) in out.data().chunks(w).zip(g.data().chunks(w)) {
                    let gsum = grow.iter().fold(S::zero(), |acc, &v| acc + v);
                    d.extend(lrow.iter().zip(grow).map(|(&l, &gv)| gv - l.exp() * gsum));
                }
                vec![(a, shaped(x, d))]
            }
            Op::LogSumExp(a) => {
                let x = self.input_value(a)?;
                let w = x.shape()[1];
                let mut d = Vec::with_capacity(x.len());
                for ((xrow, &lse), &gv) in x.data().chunks(w).zip(out.data()).zip(g.data()) {
                    d.extend(xrow.iter().map(|&v| gv * (v - lse).exp()));
                }
                vec![(a, shaped(x, d))]
            }
            Op::Conv2d(a, b) => {
                let (x, k) = (self.input_value(a)?, self.input_value(b)?);
                let d = self.conv_dims(id, x, k)?;
                let (gx, gk) = kernels::conv2d_backward(x.data(), k.data(), g.data(), &d, needs(a));
                let mut r = vec![(b, shaped(k, gk))];
                if let Some(gx) = gx {
                    r.push((a, shaped(x, gx)));
                }
                r
            }
            Op::MaxPool2(a) => {
                let x = self.input_value(a)?;
                let mut d = vec![S::zero(); x.len()];
                for (&src, &gv) in node.pool_index.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                vec![(a, shaped(x, d))]
            }
            Op::Flatten(a) => {
                let x = self.input_value(a)?;
                vec![(a, shaped(x, g.data().to_vec()))]
            }
            Op::SumRows(a) => {
                let x = self.input_value(a)?;
                let w = x.row_len().max(1);
                let d = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, w)).collect();
                vec![(a, shaped(x, d))]
            }
            Op::Sum(a) | Op::Mean(a) => {
                let x = self.input_value(a)?;
                let mut gv = g.data()[0];
                if matches!(node.op, Op::Mean(_)) {
                    gv = gv / S::from_f64(x.len() as f64);
                }
                vec![(a, Tensor::full(x.shape().to_vec(), gv))]
            }
        };
        Ok(res)
    }
}
