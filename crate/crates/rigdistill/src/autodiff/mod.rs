//! Reverse-mode differentiation over the fixed operator set the student
//! architecture needs, plus the Adam optimizer and a finite-difference
//! gradient checker.
//!
//! A [`Graph`] is a flat arena of op records; insertion order is the
//! topological order, and `backward` replays it in reverse. One graph is
//! built per training step and dropped afterwards.

pub mod adam;
pub mod gradcheck;
pub mod kernels;

use thiserror::Error;

use crate::tensor::{Real, Tensor, TensorError};
pub use kernels::ConvSpec;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: {dim} mismatch, expected {expected}, got {actual}")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: channels {channels} not divisible by groups {groups}")]
    ChannelsNotDivisible {
        op: &'static str,
        channels: usize,
        groups: usize,
    },
    #[error("conv1d: padded length {padded_len} shorter than kernel {kernel}")]
    WindowShorterThanKernel { padded_len: usize, kernel: usize },
    #[error("{op}: expected a rank-2 [len, channels] input, got shape {shape:?}")]
    NotAFeatureMap { op: &'static str, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got {numel} values")]
    NonScalarLoss { numel: usize },
    #[error("{op} produced a non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1d(ConvSpec),
    GroupNorm { groups: usize, eps: f64 },
    LayerNorm { eps: f64 },
    Linear { m: usize, n: usize },
    Gelu,
    Tanh,
    Add,
    Sub,
    AddN,
    Scale(f64),
    SumAll,
    SqNorm,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d(_) => "conv1d",
            Op::GroupNorm { .. } => "group_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Linear { .. } => "linear",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::AddN => "add_n",
            Op::Scale(_) => "scale",
            Op::SumAll => "sum_all",
            Op::SqNorm => "sq_norm",
        }
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads[id.0].take()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        debug_assert!(inputs.iter().all(|i| i.0 < id.0), "graph must stay acyclic");
        self.nodes.push(Node { op, inputs, value });
        id
    }

    fn push_checked(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> Result<NodeId, GraphError> {
        let name = op.name();
        let value = Tensor::new(shape, data).map_err(|e| match e {
            TensorError::NonFinite { index } => GraphError::NonFinite { op: name, index },
            other => GraphError::Tensor(other),
        })?;
        Ok(self.push(op, inputs, value))
    }

    /// Insert a constant or parameter leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    fn feature_map_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), GraphError> {
        let shape = self.value(id).shape();
        match shape {
            [l, c] => Ok((*l, *c)),
            _ => Err(GraphError::NotAFeatureMap { op, shape: shape.to_vec() }),
        }
    }

    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    ) -> Result<NodeId, GraphError> {
        let (l_in, c_in) = self.feature_map_dims(input, "conv1d")?;
        if c_in != spec.c_in {
            return Err(GraphError::DimMismatch {
                op: "conv1d",
                dim: "input channels",
                expected: spec.c_in,
                actual: c_in,
            });
        }
        if spec.groups == 0 || spec.c_in % spec.groups != 0 {
            return Err(GraphError::ChannelsNotDivisible {
                op: "conv1d",
                channels: spec.c_in,
                groups: spec.groups,
            });
        }
        if spec.c_out % spec.groups != 0 {
            return Err(GraphError::ChannelsNotDivisible {
                op: "conv1d",
                channels: spec.c_out,
                groups: spec.groups,
            });
        }
        let padded = l_in + spec.pad_left + spec.pad_right;
        if padded < spec.kernel {
            return Err(GraphError::WindowShorterThanKernel { padded_len: padded, kernel: spec.kernel });
        }
        if self.value(weight).numel() != spec.weight_len() {
            return Err(GraphError::DimMismatch {
                op: "conv1d",
                dim: "weight size",
                expected: spec.weight_len(),
                actual: self.value(weight).numel(),
            });
        }
        if self.value(bias).numel() != spec.c_out {
            return Err(GraphError::DimMismatch {
                op: "conv1d",
                dim: "bias size",
                expected: spec.c_out,
                actual: self.value(bias).numel(),
            });
        }
        let out = kernels::conv1d_forward(
            self.value(input).data(),
            l_in,
            &spec,
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let l_out = spec.output_len(l_in);
        self.push_checked(Op::Conv1d(spec), vec![input, weight, bias], vec![l_out, spec.c_out], out)
    }

    pub fn group_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId, GraphError> {
        let (l, c) = self.feature_map_dims(input, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(GraphError::ChannelsNotDivisible { op: "group_norm", channels: c, groups });
        }
        self.check_len("group_norm", "gamma size", gamma, c)?;
        self.check_len("group_norm", "beta size", beta, c)?;
        let out = kernels::group_norm_forward(
            self.value(input).data(),
            l,
            c,
            groups,
            eps,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        self.push_checked(Op::GroupNorm { groups, eps }, vec![input, gamma, beta], vec![l, c], out)
    }

    pub fn layer_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, GraphError> {
        let (l, c) = self.feature_map_dims(input, "layer_norm")?;
        self.check_len("layer_norm", "gamma size", gamma, c)?;
        self.check_len("layer_norm", "beta size", beta, c)?;
        let out = kernels::layer_norm_forward(
            self.value(input).data(),
            l,
            c,
            eps,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        self.push_checked(Op::LayerNorm { eps }, vec![input, gamma, beta], vec![l, c], out)
    }

    /// Fully-connected layer on a flattened input.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let n = self.value(input).numel();
        let wshape = self.value(weight).shape();
        let (m, wn) = match wshape {
            [m, n] => (*m, *n),
            _ => {
                return Err(GraphError::NotAFeatureMap { op: "linear", shape: wshape.to_vec() });
            }
        };
        if wn != n {
            return Err(GraphError::DimMismatch {
                op: "linear",
                dim: "input size",
                expected: wn,
                actual: n,
            });
        }
        self.check_len("linear", "bias size", bias, m)?;
        let out = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            m,
            n,
        );
        self.push_checked(Op::Linear { m, n }, vec![input, weight, bias], vec![m], out)
    }

    pub fn gelu(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.value(input).shape().to_vec();
        let out = kernels::gelu_forward(self.value(input).data());
        self.push_checked(Op::Gelu, vec![input], shape, out)
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.value(input).shape().to_vec();
        let out = kernels::tanh_forward(self.value(input).data());
        self.push_checked(Op::Tanh, vec![input], shape, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise_pair(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise_pair(Op::Sub, a, b, |x, y| x - y)
    }

    fn elementwise_pair(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId, GraphError> {
        let name = op.name();
        let na = self.value(a).numel();
        let nb = self.value(b).numel();
        if na != nb {
            return Err(GraphError::DimMismatch { op: name, dim: "element count", expected: na, actual: nb });
        }
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push_checked(op, vec![a, b], shape, data)
    }

    /// N-ary elementwise sum; used to accumulate per-frame loss terms.
    pub fn add_n(&mut self, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        assert!(!inputs.is_empty(), "add_n needs at least one input");
        let n0 = self.value(inputs[0]).numel();
        for &i in inputs {
            if self.value(i).numel() != n0 {
                return Err(GraphError::DimMismatch {
                    op: "add_n",
                    dim: "element count",
                    expected: n0,
                    actual: self.value(i).numel(),
                });
            }
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut data = self.value(inputs[0]).data().to_vec();
        for &i in &inputs[1..] {
            for (d, &v) in data.iter_mut().zip(self.value(i).data()) {
                *d += v;
            }
        }
        self.push_checked(Op::AddN, inputs.to_vec(), shape, data)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        let shape = self.value(input).shape().to_vec();
        let c = T::from_f64(factor);
        let data = self.value(input).data().iter().map(|&v| v * c).collect();
        self.push_checked(Op::Scale(factor), vec![input], shape, data)
    }

    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let mut s = T::ZERO;
        for &v in self.value(input).data() {
            s += v;
        }
        self.push_checked(Op::SumAll, vec![input], vec![], vec![s])
    }

    /// Squared L2 norm of a tensor, as a scalar node.
    pub fn sq_norm(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let mut s = T::ZERO;
        for &v in self.value(input).data() {
            s = v.fma(v, s);
        }
        self.push_checked(Op::SqNorm, vec![input], vec![], vec![s])
    }

    fn check_len(
        &self,
        op: &'static str,
        dim: &'static str,
        id: NodeId,
        expected: usize,
    ) -> Result<(), GraphError> {
        let actual = self.value(id).numel();
        if actual != expected {
            return Err(GraphError::DimMismatch { op, dim, expected, actual });
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss. Every node that contributes to the
    /// loss — in particular every reachable trainable leaf — ends up with a
    /// gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, GraphError> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(GraphError::NonScalarLoss { numel });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv1d(spec) => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let w = &self.nodes[node.inputs[1].0].value;
                    let l_in = x.shape()[0];
                    let (dx, dw, db) = kernels::conv1d_backward(x.data(), l_in, spec, w.data(), &g);
                    self.acc(&mut grads, node.inputs[0], dx);
                    self.acc(&mut grads, node.inputs[1], dw);
                    self.acc(&mut grads, node.inputs[2], db);
                }
                Op::GroupNorm { groups, eps } => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let gamma = &self.nodes[node.inputs[1].0].value;
                    let (l, c) = (x.shape()[0], x.shape()[1]);
                    let (dx, dgamma, dbeta) =
                        kernels::group_norm_backward(x.data(), l, c, *groups, *eps, gamma.data(), &g);
                    self.acc(&mut grads, node.inputs[0], dx);
                    self.acc(&mut grads, node.inputs[1], dgamma);
                    self.acc(&mut grads, node.inputs[2], dbeta);
                }
                Op::LayerNorm { eps } => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let gamma = &self.nodes[node.inputs[1].0].value;
                    let (l, c) = (x.shape()[0], x.shape()[1]);
                    let (dx, dgamma, dbeta) =
                        kernels::layer_norm_backward(x.data(), l, c, *eps, gamma.data(), &g);
                    self.acc(&mut grads, node.inputs[0], dx);
                    self.acc(&mut grads, node.inputs[1], dgamma);
                    self.acc(&mut grads, node.inputs[2], dbeta);
                }
                Op::Linear { m, n } => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let w = &self.nodes[node.inputs[1].0].value;
                    let (dx, dw, db) = kernels::linear_backward(x.data(), w.data(), *m, *n, &g);
                    self.acc(&mut grads, node.inputs[0], dx);
                    self.acc(&mut grads, node.inputs[1], dw);
                    self.acc(&mut grads, node.inputs[2], db);
                }
                Op::Gelu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    self.acc(&mut grads, node.inputs[0], kernels::gelu_backward(x.data(), &g));
                }
                Op::Tanh => {
                    let y = &node.value;
                    self.acc(&mut grads, node.inputs[0], kernels::tanh_backward(y.data(), &g));
                }
                Op::Add => {
                    self.acc(&mut grads, node.inputs[0], g.clone());
                    self.acc(&mut grads, node.inputs[1], g);
                }
                Op::Sub => {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.acc(&mut grads, node.inputs[0], g);
                    self.acc(&mut grads, node.inputs[1], neg);
                }
                Op::AddN => {
                    for &i in &node.inputs {
                        self.acc(&mut grads, i, g.clone());
                    }
                }
                Op::Scale(c) => {
                    let c = T::from_f64(*c);
                    let dg: Vec<T> = g.iter().map(|&v| v * c).collect();
                    self.acc(&mut grads, node.inputs[0], dg);
                }
                Op::SumAll => {
                    let n = self.nodes[node.inputs[0].0].value.numel();
                    self.acc(&mut grads, node.inputs[0], vec![g[0]; n]);
                }
                Op::SqNorm => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let two_g = g[0] * T::from_f64(2.0);
                    let dg: Vec<T> = x.data().iter().map(|&v| two_g * v).collect();
                    self.acc(&mut grads, node.inputs[0], dg);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], id: NodeId, contribution: Vec<T>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }
}
