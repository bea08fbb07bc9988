//! Minimal dense-tensor computation graph with reverse-mode differentiation.
//!
//! Graphs are built once (shapes are inferred and checked at construction),
//! frozen, and then evaluated against named input bindings. Evaluation
//! produces an [`Evaluation`] holding every node value; [`Graph::backward`]
//! replays the graph in reverse to accumulate gradients for every
//! grad-required input. A central-difference oracle ([`finite_diff_check`])
//! verifies the backward pass independently.
//!
//! Graphs and tensors are immutable after construction and safe to share
//! across worker threads; each evaluation owns its own scratch state, and all
//! reductions run in a fixed order so repeated runs are bit-identical.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("unbound input `{name}`")]
    UnboundInput { name: String },
    #[error("binding `{name}` has shape {got:?}, graph declares {expected:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("duplicate input name `{name}`")]
    DuplicateInput { name: String },
    #[error("unknown output `{name}`")]
    UnknownOutput { name: String },
    #[error("backward without explicit seed requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("seed shape {got:?} does not match output shape {expected:?}")]
    SeedShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("domain error at {node}: {detail}")]
    Domain { node: String, detail: String },
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input { name: String, grad: bool },
    Value(Tensor<T>),
    MatMul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Log { x: NodeId },
    Abs { x: NodeId },
    Square { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    AddConst { x: NodeId, c: T },
    MulConst { x: NodeId, c: T },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    ChanSum { x: NodeId },
    GlobalAvgPool { x: NodeId },
    ChannelMul { x: NodeId, g: NodeId },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    NormStats { x: NodeId, gamma: NodeId, beta: NodeId, mean: NodeId, var: NodeId, eps: T },
    SliceChan { x: NodeId, from: usize, to: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Value(_) => "value",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softplus { .. } => "softplus",
            Op::Log { .. } => "log",
            Op::Abs { .. } => "abs",
            Op::Square { .. } => "square",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::AddConst { .. } => "add_const",
            Op::MulConst { .. } => "mul_const",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::ChanSum { .. } => "chan_sum",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::ChannelMul { .. } => "channel_mul",
            Op::BatchNorm { .. } => "batch_norm",
            Op::NormStats { .. } => "norm_stats",
            Op::SliceChan { .. } => "slice_chan",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Batch statistics captured by a train-mode normalization node.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    inv_std: Vec<T>,
}

/// Immutable operation graph in topological order.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Named tensors bound to a graph's free inputs for one evaluation.
#[derive(Debug, Default)]
pub struct Bindings<'a, T> {
    map: BTreeMap<String, &'a Tensor<T>>,
}

impl<'a, T: Scalar> Bindings<'a, T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn bind(&mut self, name: impl Into<String>, tensor: &'a Tensor<T>) -> &mut Self {
        self.map.insert(name.into(), tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.map.get(name).copied()
    }
}

/// All node values produced by one forward pass.
#[derive(Debug)]
pub struct Evaluation<T> {
    values: Vec<Tensor<T>>,
    stats: Vec<Option<BatchStats<T>>>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Batch statistics of a train-mode normalization node, if `id` is one.
    pub fn batch_stats(&self, id: NodeId) -> Option<&BatchStats<T>> {
        self.stats[id.0].as_ref()
    }
}

fn node_label<T>(idx: usize, op: &Op<T>) -> String {
    match op {
        Op::Input { name, .. } => format!("node #{idx} (input `{name}`)"),
        other => format!("node #{idx} ({})", other.kind()),
    }
}

// ── Builder ──────────────────────────────────────────────────────────

/// Incrementally constructs a [`Graph`], checking shapes at every step.
#[derive(Debug, Default)]
pub struct GraphBuilder<T> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Input { grad, .. } => *grad,
            Op::Value(_) => false,
            _ => self.op_inputs(&op).iter().any(|id| self.nodes[id.0].needs_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, needs_grad });
        id
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Input { .. } | Op::Value(_) => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => {
                vec![*a, *b]
            }
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Softplus { x }
            | Op::Log { x }
            | Op::Abs { x }
            | Op::Square { x }
            | Op::AddConst { x, .. }
            | Op::MulConst { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::ChanSum { x }
            | Op::GlobalAvgPool { x }
            | Op::SliceChan { x, .. } => vec![*x],
            Op::ChannelMul { x, g } => vec![*x, *g],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::NormStats { x, gamma, beta, mean, var, .. } => vec![*x, *gamma, *beta, *mean, *var],
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn mismatch(&self, op: &Op<T>, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: format!("new node #{} ({})", self.nodes.len(), op.kind()),
            detail,
        }
    }

    /// Declare a named free input with a fixed shape.
    pub fn input(&mut self, name: &str, shape: &[usize], grad: bool) -> Result<NodeId, GraphError> {
        if self.inputs.contains_key(name) {
            return Err(GraphError::DuplicateInput { name: name.to_string() });
        }
        let id = self.push(
            Op::Input { name: name.to_string(), grad },
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Embed a constant tensor.
    pub fn value(&mut self, t: Tensor<T>) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Value(t), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let op = Op::MatMul { a, b };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch(&op, format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(op, shape))
    }

    /// `x + b`, broadcasting `b` along axis 1 (rows of a 2-d tensor, channels
    /// of a 4-d tensor).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let op = Op::AddBias { x, b };
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let ok = sb.len() == 1 && (sx.len() == 2 || sx.len() == 4) && sx[1] == sb[0];
        if !ok {
            return Err(self.mismatch(&op, format!("bias {sb:?} does not broadcast over {sx:?}")));
        }
        let shape = sx;
        Ok(self.push(op, shape))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId, GraphError> {
        let op = Op::Conv2d { x, w, stride, pad };
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(self.mismatch(&op, format!("expected 4-d input and weight, got {sx:?} and {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(self.mismatch(&op, format!("input channels {} != weight channels {}", sx[1], sw[1])));
        }
        if sw[2] != sw[3] {
            return Err(self.mismatch(&op, format!("kernel must be square, got {:?}", &sw[2..])));
        }
        let k = sw[2];
        if stride == 0 || sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(self.mismatch(&op, format!("kernel {k} exceeds padded input {sx:?} (pad {pad})")));
        }
        let ho = (sx[2] + 2 * pad - k) / stride + 1;
        let wo = (sx[3] + 2 * pad - k) / stride + 1;
        let shape = vec![sx[0], sw[0], ho, wo];
        Ok(self.push(op, shape))
    }

    fn unary(&mut self, op: Op<T>, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(op, shape)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu { x }, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sigmoid { x }, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Softplus { x }, x)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Log { x }, x)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Abs { x }, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Square { x }, x)
    }

    pub fn add_const(&mut self, x: NodeId, c: T) -> NodeId {
        self.unary(Op::AddConst { x, c }, x)
    }

    pub fn mul_const(&mut self, x: NodeId, c: T) -> NodeId {
        self.unary(Op::MulConst { x, c }, x)
    }

    fn binary(&mut self, op: Op<T>, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(self.mismatch(&op, format!("elementwise operands differ: {sa:?} vs {sb:?}")));
        }
        Ok(self.push(op, sa))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Add { a, b }, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Sub { a, b }, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Mul { a, b }, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(Op::Div { a, b }, a, b)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll { x }, vec![1])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanAll { x }, vec![1])
    }

    /// Sum over the channel axis: `(N, C, H, W) -> (N, 1, H, W)`.
    pub fn chan_sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let op = Op::ChanSum { x };
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(self.mismatch(&op, format!("expected 4-d input, got {sx:?}")));
        }
        let shape = vec![sx[0], 1, sx[2], sx[3]];
        Ok(self.push(op, shape))
    }

    /// Spatial mean per channel: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let op = Op::GlobalAvgPool { x };
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(self.mismatch(&op, format!("expected 4-d input, got {sx:?}")));
        }
        let shape = vec![sx[0], sx[1]];
        Ok(self.push(op, shape))
    }

    /// `(N, C, H, W) * (N, C)` with the gate broadcast over space.
    pub fn channel_mul(&mut self, x: NodeId, g: NodeId) -> Result<NodeId, GraphError> {
        let op = Op::ChannelMul { x, g };
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(g).to_vec());
        let ok = sx.len() == 4 && sg.len() == 2 && sg[0] == sx[0] && sg[1] == sx[1];
        if !ok {
            return Err(self.mismatch(&op, format!("gate {sg:?} does not broadcast over {sx:?}")));
        }
        let shape = sx;
        Ok(self.push(op, shape))
    }

    /// Train-mode normalization: statistics computed over `(N, H, W)` per
    /// channel, then per-channel scale/shift. Gradients flow through the
    /// batch statistics.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId, GraphError> {
        let op = Op::BatchNorm { x, gamma, beta, eps };
        self.check_norm_shapes(&op, x, gamma, beta)?;
        let shape = self.shape(x).to_vec();
        Ok(self.push(op, shape))
    }

    /// Eval-mode normalization with externally supplied statistics; no
    /// gradient flows into `mean`/`var`.
    pub fn norm_stats(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: T,
    ) -> Result<NodeId, GraphError> {
        let op = Op::NormStats { x, gamma, beta, mean, var, eps };
        self.check_norm_shapes(&op, x, gamma, beta)?;
        let c = self.shape(x)[1];
        for (label, id) in [("mean", mean), ("var", var)] {
            if self.shape(id) != [c] {
                let got = self.shape(id).to_vec();
                return Err(self.mismatch(&op, format!("{label} shape {got:?}, expected [{c}]")));
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(op, shape))
    }

    fn check_norm_shapes(&self, op: &Op<T>, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(), GraphError> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(self.mismatch(op, format!("expected 4-d input, got {sx:?}")));
        }
        let c = sx[1];
        for (label, id) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(id) != [c] {
                let got = self.shape(id).to_vec();
                return Err(self.mismatch(op, format!("{label} shape {got:?}, expected [{c}]")));
            }
        }
        Ok(())
    }

    /// Channel slice `x[:, from..to]` of a 4-d tensor.
    pub fn slice_chan(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId, GraphError> {
        let op = Op::SliceChan { x, from, to };
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || from >= to || to > sx[1] {
            return Err(self.mismatch(&op, format!("slice {from}..{to} invalid for {sx:?}")));
        }
        let shape = vec![sx[0], to - from, sx[2], sx[3]];
        Ok(self.push(op, shape))
    }

    /// Register a node as a named output.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        self.shape(id)
    }

    pub fn finish(self) -> Graph<T> {
        Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }
}

// ── Evaluation ───────────────────────────────────────────────────────

impl<T: Scalar> Graph<T> {
    pub fn input_names(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.inputs.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn output(&self, name: &str) -> Result<NodeId, GraphError> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownOutput { name: name.to_string() })
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Whether any gradient path reaches `id`.
    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Forward pass: computes every node value in topological order.
    pub fn evaluate(&self, bindings: &Bindings<'_, T>) -> Result<Evaluation<T>, GraphError> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut stats: Vec<Option<BatchStats<T>>> = vec![None; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            let label = || node_label(idx, &node.op);
            let value = match &node.op {
                Op::Input { name, .. } => {
                    let bound = bindings
                        .get(name)
                        .ok_or_else(|| GraphError::UnboundInput { name: name.clone() })?;
                    if bound.shape() != node.shape {
                        return Err(GraphError::BindingShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            got: bound.shape().to_vec(),
                        });
                    }
                    bound.clone()
                }
                Op::Value(t) => t.clone(),
                Op::MatMul { a, b } => {
                    let (va, vb) = (&values[a.0], &values[b.0]);
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    let mut out = vec![T::zero(); m * n];
                    T::gemm(false, false, m, k, n, T::one(), va.data(), vb.data(), T::zero(), &mut out);
                    Tensor::new(node.shape.clone(), out).expect("matmul shape")
                }
                Op::AddBias { x, b } => {
                    let (vx, vb) = (&values[x.0], &values[b.0]);
                    let mut out = vx.data().to_vec();
                    let c = vx.shape()[1];
                    let inner: usize = vx.shape()[2..].iter().product();
                    let outer = vx.shape()[0];
                    for o in 0..outer {
                        for ch in 0..c {
                            let bias = vb.data()[ch];
                            let base = (o * c + ch) * inner;
                            for v in &mut out[base..base + inner] {
                                *v += bias;
                            }
                        }
                    }
                    Tensor::new(node.shape.clone(), out).expect("add_bias shape")
                }
                Op::Conv2d { x, w, stride, pad } => {
                    conv2d_forward(&values[x.0], &values[w.0], *stride, *pad, &node.shape)
                }
                Op::Relu { x } => map_unary(&values[x.0], |v| if v > T::zero() { v } else { T::zero() }),
                Op::Sigmoid { x } => map_unary(&values[x.0], sigmoid),
                Op::Softplus { x } => map_unary(&values[x.0], softplus),
                Op::Log { x } => {
                    let vx = &values[x.0];
                    if vx.data().iter().any(|v| *v <= T::zero()) {
                        return Err(GraphError::Domain {
                            node: label(),
                            detail: "log of non-positive value".to_string(),
                        });
                    }
                    map_unary(vx, |v| v.ln())
                }
                Op::Abs { x } => map_unary(&values[x.0], |v| v.abs()),
                Op::Square { x } => map_unary(&values[x.0], |v| v * v),
                Op::Add { a, b } => zip_binary(&values[a.0], &values[b.0], |u, v| u + v),
                Op::Sub { a, b } => zip_binary(&values[a.0], &values[b.0], |u, v| u - v),
                Op::Mul { a, b } => zip_binary(&values[a.0], &values[b.0], |u, v| u * v),
                Op::Div { a, b } => zip_binary(&values[a.0], &values[b.0], |u, v| u / v),
                Op::AddConst { x, c } => map_unary(&values[x.0], |v| v + *c),
                Op::MulConst { x, c } => map_unary(&values[x.0], |v| v * *c),
                Op::SumAll { x } => {
                    let s = values[x.0].data().iter().fold(T::zero(), |acc, v| acc + *v);
                    Tensor::scalar(s)
                }
                Op::MeanAll { x } => {
                    let vx = &values[x.0];
                    let s = vx.data().iter().fold(T::zero(), |acc, v| acc + *v);
                    Tensor::scalar(s / T::of(vx.numel() as f64))
                }
                Op::ChanSum { x } => {
                    let vx = &values[x.0];
                    let [n, c, h, w] = dims4(vx.shape());
                    let mut out = vec![T::zero(); n * h * w];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            let obase = ni * h * w;
                            for i in 0..h * w {
                                out[obase + i] += vx.data()[base + i];
                            }
                        }
                    }
                    Tensor::new(node.shape.clone(), out).expect("chan_sum shape")
                }
                Op::GlobalAvgPool { x } => {
                    let vx = &values[x.0];
                    let [n, c, h, w] = dims4(vx.shape());
                    let scale = T::one() / T::of((h * w) as f64);
                    let mut out = vec![T::zero(); n * c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            let mut s = T::zero();
                            for i in 0..h * w {
                                s += vx.data()[base + i];
                            }
                            out[ni * c + ci] = s * scale;
                        }
                    }
                    Tensor::new(node.shape.clone(), out).expect("gap shape")
                }
                Op::ChannelMul { x, g } => {
                    let (vx, vg) = (&values[x.0], &values[g.0]);
                    let [n, c, h, w] = dims4(vx.shape());
                    let mut out = vx.data().to_vec();
                    for ni in 0..n {
                        for ci in 0..c {
                            let gate = vg.data()[ni * c + ci];
                            let base = (ni * c + ci) * h * w;
                            for v in &mut out[base..base + h * w] {
                                *v *= gate;
                            }
                        }
                    }
                    Tensor::new(node.shape.clone(), out).expect("channel_mul shape")
                }
                Op::BatchNorm { x, gamma, beta, eps } => {
                    let (t, st) = batch_norm_forward(&values[x.0], &values[gamma.0], &values[beta.0], *eps);
                    stats[idx] = Some(st);
                    t
                }
                Op::NormStats { x, gamma, beta, mean, var, eps } => norm_stats_forward(
                    &values[x.0],
                    &values[gamma.0],
                    &values[beta.0],
                    &values[mean.0],
                    &values[var.0],
                    *eps,
                ),
                Op::SliceChan { x, from, to } => {
                    let vx = &values[x.0];
                    let [n, c, h, w] = dims4(vx.shape());
                    let cs = to - from;
                    let mut out = vec![T::zero(); n * cs * h * w];
                    for ni in 0..n {
                        for ci in 0..cs {
                            let src = (ni * c + from + ci) * h * w;
                            let dst = (ni * cs + ci) * h * w;
                            out[dst..dst + h * w].copy_from_slice(&vx.data()[src..src + h * w]);
                        }
                    }
                    Tensor::new(node.shape.clone(), out).expect("slice shape")
                }
            };
            values.push(value);
        }
        Ok(Evaluation { values, stats })
    }

    /// Named outputs of an evaluation, per the builder's `mark_output` calls.
    pub fn outputs<'e>(&self, eval: &'e Evaluation<T>) -> BTreeMap<String, &'e Tensor<T>> {
        self.outputs
            .iter()
            .map(|(name, id)| (name.clone(), eval.value(*id)))
            .collect()
    }

    /// Reverse accumulation from `output` back to every grad-required input.
    ///
    /// `seed` defaults to 1 for scalar outputs; a non-scalar output requires
    /// an explicit seed of matching shape. Returns one gradient tensor per
    /// grad-required input (zero-filled when no path reaches it).
    pub fn backward(
        &self,
        eval: &Evaluation<T>,
        output: NodeId,
        seed: Option<&Tensor<T>>,
    ) -> Result<BTreeMap<String, Tensor<T>>, GraphError> {
        let out_shape = &self.nodes[output.0].shape;
        let seed_data: Vec<T> = match seed {
            Some(s) => {
                if s.shape() != out_shape.as_slice() {
                    return Err(GraphError::SeedShape {
                        expected: out_shape.clone(),
                        got: s.shape().to_vec(),
                    });
                }
                s.data().to_vec()
            }
            None => {
                if out_shape.iter().product::<usize>() != 1 {
                    return Err(GraphError::NonScalarOutput { shape: out_shape.clone() });
                }
                vec![T::one()]
            }
        };

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed_data);

        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                if matches!(node.op, Op::Input { .. }) {
                    grads[idx] = Some(gy);
                }
                continue;
            }
            match &node.op {
                Op::Input { .. } => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Value(_) => continue,
                Op::MatMul { a, b } => {
                    let (va, vb) = (eval.value(*a), eval.value(*b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if self.nodes[a.0].needs_grad {
                        let ga = grads[a.0].get_or_insert_with(|| vec![T::zero(); m * k]);
                        T::gemm(false, true, m, n, k, T::one(), &gy, vb.data(), T::one(), ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = grads[b.0].get_or_insert_with(|| vec![T::zero(); k * n]);
                        T::gemm(true, false, k, m, n, T::one(), va.data(), &gy, T::one(), gb);
                    }
                }
                Op::AddBias { x, b } => {
                    let vx = eval.value(*x);
                    let c = vx.shape()[1];
                    let inner: usize = vx.shape()[2..].iter().product();
                    let outer = vx.shape()[0];
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut grads[x.0], &gy);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = grads[b.0].get_or_insert_with(|| vec![T::zero(); c]);
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                let mut s = T::zero();
                                for v in &gy[base..base + inner] {
                                    s += *v;
                                }
                                gb[ch] += s;
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (gx, gw) = conv2d_backward(
                        eval.value(*x),
                        eval.value(*w),
                        *stride,
                        *pad,
                        &node.shape,
                        &gy,
                        self.nodes[x.0].needs_grad,
                        self.nodes[w.0].needs_grad,
                    );
                    if let Some(g) = gx {
                        accumulate_owned(&mut grads[x.0], g);
                    }
                    if let Some(g) = gw {
                        accumulate_owned(&mut grads[w.0], g);
                    }
                }
                Op::Relu { x } => {
                    let vx = eval.value(*x);
                    let gx = grads_slot(&mut grads, *x, vx.numel());
                    for (i, v) in vx.data().iter().enumerate() {
                        if *v > T::zero() {
                            gx[i] += gy[i];
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let vy = eval.value(NodeId(idx));
                    let gx = grads_slot(&mut grads, *x, vy.numel());
                    for (i, y) in vy.data().iter().enumerate() {
                        gx[i] += gy[i] * *y * (T::one() - *y);
                    }
                }
                Op::Softplus { x } => {
                    let vx = eval.value(*x);
                    let gx = grads_slot(&mut grads, *x, vx.numel());
                    for (i, v) in vx.data().iter().enumerate() {
                        gx[i] += gy[i] * sigmoid(*v);
                    }
                }
                Op::Log { x } => {
                    let vx = eval.value(*x);
                    let gx = grads_slot(&mut grads, *x, vx.numel());
                    for (i, v) in vx.data().iter().enumerate() {
                        gx[i] += gy[i] / *v;
                    }
                }
                Op::Abs { x } => {
                    let vx = eval.value(*x);
                    let gx = grads_slot(&mut grads, *x, vx.numel());
                    for (i, v) in vx.data().iter().enumerate() {
                        gx[i] += gy[i] * sign(*v);
                    }
                }
                Op::Square { x } => {
                    let vx = eval.value(*x);
                    let gx = grads_slot(&mut grads, *x, vx.numel());
                    let two = T::of(2.0);
                    for (i, v) in vx.data().iter().enumerate() {
                        gx[i] += gy[i] * two * *v;
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads[a.0], &gy);
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads[b.0], &gy);
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads[a.0], &gy);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = grads_slot(&mut grads, *b, gy.len());
                        for (g, v) in gb.iter_mut().zip(&gy) {
                            *g -= *v;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (eval.value(*a), eval.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let ga = grads_slot(&mut grads, *a, gy.len());
                        for i in 0..gy.len() {
                            ga[i] += gy[i] * vb.data()[i];
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = grads_slot(&mut grads, *b, gy.len());
                        for i in 0..gy.len() {
                            gb[i] += gy[i] * va.data()[i];
                        }
                    }
                }
                Op::Div { a, b } => {
                    let (va, vb) = (eval.value(*a), eval.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let ga = grads_slot(&mut grads, *a, gy.len());
                        for i in 0..gy.len() {
                            ga[i] += gy[i] / vb.data()[i];
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = grads_slot(&mut grads, *b, gy.len());
                        for i in 0..gy.len() {
                            let bb = vb.data()[i];
                            gb[i] -= gy[i] * va.data()[i] / (bb * bb);
                        }
                    }
                }
                Op::AddConst { x, .. } => {
                    accumulate(&mut grads[x.0], &gy);
                }
                Op::MulConst { x, c } => {
                    let gx = grads_slot(&mut grads, *x, gy.len());
                    for (g, v) in gx.iter_mut().zip(&gy) {
                        *g += *v * *c;
                    }
                }
                Op::SumAll { x } => {
                    let n = eval.value(*x).numel();
                    let gx = grads_slot(&mut grads, *x, n);
                    for g in gx.iter_mut() {
                        *g += gy[0];
                    }
                }
                Op::MeanAll { x } => {
                    let n = eval.value(*x).numel();
                    let gx = grads_slot(&mut grads, *x, n);
                    let s = gy[0] / T::of(n as f64);
                    for g in gx.iter_mut() {
                        *g += s;
                    }
                }
                Op::ChanSum { x } => {
                    let vx = eval.value(*x);
                    let [n, c, h, w] = dims4(vx.shape());
                    let gx = grads_slot(&mut grads, *x, vx.numel());
                    for ni in 0..n {
                        let obase = ni * h * w;
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            for i in 0..h * w {
                                gx[base + i] += gy[obase + i];
                            }
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let vx = eval.value(*x);
                    let [n, c, h, w] = dims4(vx.shape());
                    let gx = grads_slot(&mut grads, *x, vx.numel());
                    let scale = T::one() / T::of((h * w) as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = gy[ni * c + ci] * scale;
                            let base = (ni * c + ci) * h * w;
                            for v in &mut gx[base..base + h * w] {
                                *v += g;
                            }
                        }
                    }
                }
                Op::ChannelMul { x, g } => {
                    let (vx, vg) = (eval.value(*x), eval.value(*g));
                    let [n, c, h, w] = dims4(vx.shape());
                    if self.nodes[x.0].needs_grad {
                        let gx = grads_slot(&mut grads, *x, vx.numel());
                        for ni in 0..n {
                            for ci in 0..c {
                                let gate = vg.data()[ni * c + ci];
                                let base = (ni * c + ci) * h * w;
                                for i in 0..h * w {
                                    gx[base + i] += gy[base + i] * gate;
                                }
                            }
                        }
                    }
                    if self.nodes[g.0].needs_grad {
                        let gg = grads_slot(&mut grads, *g, vg.numel());
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * h * w;
                                let mut s = T::zero();
                                for i in 0..h * w {
                                    s += gy[base + i] * vx.data()[base + i];
                                }
                                gg[ni * c + ci] += s;
                            }
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, .. } => {
                    let st = eval.batch_stats(NodeId(idx)).expect("batch stats saved in forward");
                    let (gx, gg, gb) = batch_norm_backward(
                        eval.value(*x),
                        eval.value(*gamma),
                        st,
                        &gy,
                        self.nodes[x.0].needs_grad,
                        self.nodes[gamma.0].needs_grad,
                        self.nodes[beta.0].needs_grad,
                    );
                    if let Some(g) = gx {
                        accumulate_owned(&mut grads[x.0], g);
                    }
                    if let Some(g) = gg {
                        accumulate_owned(&mut grads[gamma.0], g);
                    }
                    if let Some(g) = gb {
                        accumulate_owned(&mut grads[beta.0], g);
                    }
                }
                Op::NormStats { x, gamma, beta, mean, var, eps } => {
                    let (gx, gg, gb) = norm_stats_backward(
                        eval.value(*x),
                        eval.value(*gamma),
                        eval.value(*mean),
                        eval.value(*var),
                        *eps,
                        &gy,
                        self.nodes[x.0].needs_grad,
                        self.nodes[gamma.0].needs_grad,
                        self.nodes[beta.0].needs_grad,
                    );
                    if let Some(g) = gx {
                        accumulate_owned(&mut grads[x.0], g);
                    }
                    if let Some(g) = gg {
                        accumulate_owned(&mut grads[gamma.0], g);
                    }
                    if let Some(g) = gb {
                        accumulate_owned(&mut grads[beta.0], g);
                    }
                }
                Op::SliceChan { x, from, to } => {
                    let vx = eval.value(*x);
                    let [n, c, h, w] = dims4(vx.shape());
                    let cs = to - from;
                    let gx = grads_slot(&mut grads, *x, vx.numel());
                    for ni in 0..n {
                        for ci in 0..cs {
                            let dst = (ni * c + from + ci) * h * w;
                            let src = (ni * cs + ci) * h * w;
                            for i in 0..h * w {
                                gx[dst + i] += gy[src + i];
                            }
                        }
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.inputs {
            let node = &self.nodes[id.0];
            let Op::Input { grad, .. } = &node.op else { unreachable!() };
            if !*grad {
                continue;
            }
            let data = grads[id.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.shape.iter().product()]);
            out.insert(
                name.clone(),
                Tensor::new(node.shape.clone(), data).expect("grad shape matches input"),
            );
        }
        Ok(out)
    }
}

fn grads_slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], id: NodeId, len: usize) -> &'g mut Vec<T> {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, gy: &[T]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(gy) {
                *a += *b;
            }
        }
        None => *slot = Some(gy.to_vec()),
    }
}

fn accumulate_owned<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

fn map_unary<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let data = x.data().iter().map(|v| f(*v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("unary preserves shape")
}

fn zip_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(u, v)| f(*u, *v)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("binary preserves shape")
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|)) is stable for large |x|.
    let m = if x > T::zero() { x } else { T::zero() };
    m + (-x.abs()).exp().ln_1p()
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

// ── Convolution kernels ──────────────────────────────────────────────

fn im2col<T: Scalar>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    // col is (c_in*k*k) x (ho*wo), row-major.
    let mut row = 0usize;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let base = row * ho * wo;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let obase = base + oh * wo;
                    if ih < 0 || ih >= h as isize {
                        for v in &mut col[obase..obase + wo] {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let xbase = (c * h + ih as usize) * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        col[obase + ow] = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            x[xbase + iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_accumulate<T: Scalar>(
    col: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    gx: &mut [T],
) {
    let mut row = 0usize;
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let base = row * ho * wo;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xbase = (c * h + ih as usize) * w;
                    let obase = base + oh * wo;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            gx[xbase + iw as usize] += col[obase + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    let [n, c_in, h, wi] = dims4(x.shape());
    let c_out = w.shape()[0];
    let k = w.shape()[2];
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let ckk = c_in * k * k;
    let mut col = vec![T::zero(); ckk * ho * wo];
    let mut out = vec![T::zero(); n * c_out * ho * wo];
    for ni in 0..n {
        let xs = &x.data()[ni * c_in * h * wi..(ni + 1) * c_in * h * wi];
        im2col(xs, c_in, h, wi, k, stride, pad, ho, wo, &mut col);
        let os = &mut out[ni * c_out * ho * wo..(ni + 1) * c_out * ho * wo];
        T::gemm(false, false, c_out, ckk, ho * wo, T::one(), w.data(), &col, T::zero(), os);
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv shape")
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
    gy: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [n, c_in, h, wi] = dims4(x.shape());
    let c_out = w.shape()[0];
    let k = w.shape()[2];
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let ckk = c_in * k * k;
    let mut col = vec![T::zero(); ckk * ho * wo];
    let mut gcol = vec![T::zero(); ckk * ho * wo];
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.numel()]);
    for ni in 0..n {
        let gys = &gy[ni * c_out * ho * wo..(ni + 1) * c_out * ho * wo];
        if let Some(gw) = gw.as_deref_mut() {
            let xs = &x.data()[ni * c_in * h * wi..(ni + 1) * c_in * h * wi];
            im2col(xs, c_in, h, wi, k, stride, pad, ho, wo, &mut col);
            // gw += gy_s (c_out x howo) * col^T (howo x ckk)
            T::gemm(false, true, c_out, ho * wo, ckk, T::one(), gys, &col, T::one(), gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            // gcol = w^T (ckk x c_out) * gy_s (c_out x howo)
            T::gemm(true, false, ckk, c_out, ho * wo, T::one(), w.data(), gys, T::zero(), &mut gcol);
            let gxs = &mut gx[ni * c_in * h * wi..(ni + 1) * c_in * h * wi];
            col2im_accumulate(&gcol, c_in, h, wi, k, stride, pad, ho, wo, gxs);
        }
    }
    (gx, gw)
}

// ── Normalization kernels ────────────────────────────────────────────

fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, BatchStats<T>) {
    let [n, c, h, w] = dims4(x.shape());
    let m = T::of((n * h * w) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                s += x.data()[base + i];
            }
        }
        mean[ci] = s / m;
    }
    for ci in 0..c {
        let mu = mean[ci];
        let mut s = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                let d = x.data()[base + i] - mu;
                s += d * d;
            }
        }
        var[ci] = s / m;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                out[base + i] = (x.data()[base + i] - mu) * is * g + b;
            }
        }
    }
    let t = Tensor::new(x.shape().to_vec(), out).expect("bn shape");
    (t, BatchStats { mean, var, inv_std })
}

#[allow(clippy::too_many_arguments)]
fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    st: &BatchStats<T>,
    gy: &[T],
    need_x: bool,
    need_gamma: bool,
    need_beta: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let [n, c, h, w] = dims4(x.shape());
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut ggamma = need_gamma.then(|| vec![T::zero(); c]);
    let mut gbeta = need_beta.then(|| vec![T::zero(); c]);
    let m = T::of((n * h * w) as f64);
    for ci in 0..c {
        let (mu, is) = (st.mean[ci], st.inv_std[ci]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                let xhat = (x.data()[base + i] - mu) * is;
                sum_dy += gy[base + i];
                sum_dy_xhat += gy[base + i] * xhat;
            }
        }
        if let Some(gg) = ggamma.as_deref_mut() {
            gg[ci] += sum_dy_xhat;
        }
        if let Some(gb) = gbeta.as_deref_mut() {
            gb[ci] += sum_dy;
        }
        if let Some(gx) = gx.as_deref_mut() {
            let g = gamma.data()[ci];
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    let xhat = (x.data()[base + i] - mu) * is;
                    gx[base + i] += g * is * (gy[base + i] - mean_dy - xhat * mean_dy_xhat);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

fn norm_stats_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let [n, c, h, w] = dims4(x.shape());
    let mut out = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let is = T::one() / (var.data()[ci] + eps).sqrt();
            let mu = mean.data()[ci];
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                out[base + i] = (x.data()[base + i] - mu) * is * g + b;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("norm shape")
}

#[allow(clippy::too_many_arguments)]
fn norm_stats_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
    gy: &[T],
    need_x: bool,
    need_gamma: bool,
    need_beta: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let [n, c, h, w] = dims4(x.shape());
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut ggamma = need_gamma.then(|| vec![T::zero(); c]);
    let mut gbeta = need_beta.then(|| vec![T::zero(); c]);
    for ci in 0..c {
        let is = T::one() / (var.data()[ci] + eps).sqrt();
        let mu = mean.data()[ci];
        let g = gamma.data()[ci];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                let xhat = (x.data()[base + i] - mu) * is;
                sum_dy += gy[base + i];
                sum_dy_xhat += gy[base + i] * xhat;
            }
        }
        if let Some(gg) = ggamma.as_deref_mut() {
            gg[ci] += sum_dy_xhat;
        }
        if let Some(gb) = gbeta.as_deref_mut() {
            gb[ci] += sum_dy;
        }
        if let Some(gx) = gx.as_deref_mut() {
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in 0..h * w {
                    gx[base + i] += gy[base + i] * g * is;
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

// ── Finite-difference oracle ─────────────────────────────────────────

/// Central-difference check of `backward` for a scalar-valued graph.
///
/// Perturbs every element of every grad-required input by `±step`, compares
/// `(f(x+h) - f(x-h)) / 2h` against the analytic gradient, and returns the
/// worst relative error, where the error is scaled by
/// `max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<T: Scalar>(
    graph: &Graph<T>,
    bindings: &BTreeMap<String, Tensor<T>>,
    output: NodeId,
    step: f64,
) -> Result<f64, GraphError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval_scalar = |map: &BTreeMap<String, Tensor<T>>| -> Result<f64, GraphError> {
        let mut b = Bindings::new();
        for (k, v) in map.iter() {
            b.bind(k, v);
        }
        let eval = graph.evaluate(&b)?;
        let out = eval.value(output);
        let v = out.item().ok_or_else(|| GraphError::NonScalarOutput {
            shape: out.shape().to_vec(),
        })?;
        let v = v.to_f64c();
        if !v.is_finite() {
            return Err(GraphError::NonFinite {
                node: format!("output node #{}", output.0),
            });
        }
        Ok(v)
    };

    // Analytic gradients once, at the unperturbed point.
    let analytic = {
        let mut b = Bindings::new();
        for (k, v) in bindings.iter() {
            b.bind(k, v);
        }
        let eval = graph.evaluate(&b)?;
        graph.backward(&eval, output, None)?
    };

    let mut worst = 0.0f64;
    let mut work: BTreeMap<String, Tensor<T>> = bindings.clone();
    let names: Vec<String> = analytic.keys().cloned().collect();
    for name in names {
        let n = work[&name].numel();
        for i in 0..n {
            let orig = work[&name].data()[i];
            let h = T::of(step);
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let fp = eval_scalar(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let fm = eval_scalar(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[&name].data()[i].to_f64c();
            let scale = 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}
