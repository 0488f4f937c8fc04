//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Nodes live in an arena and are created in topological order, so the
//! backward pass is a single reverse sweep. Backward is itself expressed as
//! a graph-to-graph transformation: differentiating a node builds new nodes,
//! which is what makes the gradient penalty's second-order term possible —
//! [`Graph::input_gradient_node`] returns a node that can be differentiated
//! again with respect to upstream parameters.
//!
//! Convolution, bilinear sampling and the fused softmax cross-entropy carry
//! first-order gradients only; their backward nodes refuse further
//! differentiation. The critic path (matmul, bias add, leaky rectifier,
//! flatten) is fully twice-differentiable, with the rectifier's derivative
//! entering the outer graph as a piecewise-constant mask.

pub mod adam;
pub mod kernels;

use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{format_shape, numel, Tensor};

pub use adam::{adam_step, adam_update, AdamState};

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid attribute: {detail}")]
    BadAttr { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0}")]
    NonScalarRoot(String),
    #[error("op `{op}` does not support second-order differentiation")]
    NotTwiceDifferentiable { op: &'static str },
    #[error("unknown op kind `{0}`")]
    UnknownOpKind(String),
    #[error("missing gradient on parameter node {0}")]
    MissingGradient(usize),
    #[error("node {wrt} does not require grad or does not feed the root node {root}")]
    NotOnPath { root: usize, wrt: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

// Some attribute fields are only consulted at node-build time but stay in
// the record so a Debug dump of the graph names every op completely.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = mul * x + add, elementwise.
    AffineConst { x: NodeId, mul: f64, add: f64 },
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    BiasAdd { x: NodeId, bias: NodeId },
    ColSum(NodeId),
    RowSum(NodeId),
    BroadcastRow { v: NodeId, rows: usize },
    BroadcastCol { v: NodeId, cols: usize },
    BroadcastScalar { s: NodeId, n: usize },
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Abs(NodeId),
    MaxZero(NodeId),
    LeakyRelu { x: NodeId, slope: f64 },
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    SliceVec { x: NodeId, start: usize },
    ScatterVec { x: NodeId, start: usize },
    RowOf { x: NodeId, row: usize },
    RowScatter { x: NodeId, row: usize },
    StackRows(Vec<NodeId>),
    Crop2d { x: NodeId, top: usize, left: usize },
    PadImage { x: NodeId, top: usize, left: usize },
    MeanHw(NodeId),
    BroadcastHw { x: NodeId, h: usize, w: usize },
    Conv2d { x: NodeId, k: NodeId, bias: NodeId, stride: usize },
    Conv2dGradX { gout: NodeId, k: NodeId, stride: usize },
    Conv2dGradK { gout: NodeId, x: NodeId, stride: usize },
    Bilinear { img: NodeId, u: NodeId, v: NodeId },
    BilinearGradImg { gout: NodeId, u: NodeId, v: NodeId },
    BilinearGradU { gout: NodeId, img: NodeId, u: NodeId, v: NodeId },
    BilinearGradV { gout: NodeId, img: NodeId, u: NodeId, v: NodeId },
    SoftmaxXent { logits: NodeId, labels: Arc<Vec<usize>> },
    SoftmaxXentGrad { gout: NodeId, logits: NodeId, labels: Arc<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AffineConst { .. } => "affine_const",
            Op::MatMul { .. } => "matmul",
            Op::BiasAdd { .. } => "bias_add",
            Op::ColSum(..) => "col_sum",
            Op::RowSum(..) => "row_sum",
            Op::BroadcastRow { .. } => "broadcast_row",
            Op::BroadcastCol { .. } => "broadcast_col",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Abs(..) => "abs",
            Op::MaxZero(..) => "max_zero",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::SliceVec { .. } => "slice",
            Op::ScatterVec { .. } => "scatter",
            Op::RowOf { .. } => "row_of",
            Op::RowScatter { .. } => "row_scatter",
            Op::StackRows(..) => "stack_rows",
            Op::Crop2d { .. } => "crop",
            Op::PadImage { .. } => "pad_image",
            Op::MeanHw(..) => "mean_hw",
            Op::BroadcastHw { .. } => "broadcast_hw",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dGradX { .. } => "conv2d_grad_input",
            Op::Conv2dGradK { .. } => "conv2d_grad_kernel",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::BilinearGradImg { .. } => "bilinear_grad_image",
            Op::BilinearGradU { .. } => "bilinear_grad_u",
            Op::BilinearGradV { .. } => "bilinear_grad_v",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::SoftmaxXentGrad { .. } => "softmax_cross_entropy_grad",
        }
    }

    fn inputs_into(&self, buf: &mut Vec<NodeId>) {
        buf.clear();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => buf.extend([*a, *b]),
            Op::AffineConst { x, .. }
            | Op::ColSum(x)
            | Op::RowSum(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::Recip(x)
            | Op::Abs(x)
            | Op::MaxZero(x)
            | Op::LeakyRelu { x, .. }
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Reshape(x)
            | Op::SliceVec { x, .. }
            | Op::ScatterVec { x, .. }
            | Op::RowOf { x, .. }
            | Op::RowScatter { x, .. }
            | Op::Crop2d { x, .. }
            | Op::PadImage { x, .. }
            | Op::MeanHw(x)
            | Op::BroadcastHw { x, .. } => buf.push(*x),
            Op::BroadcastRow { v, .. } => buf.push(*v),
            Op::BroadcastCol { v, .. } => buf.push(*v),
            Op::BroadcastScalar { s, .. } => buf.push(*s),
            Op::MatMul { a, b, .. } => buf.extend([*a, *b]),
            Op::BiasAdd { x, bias } => buf.extend([*x, *bias]),
            Op::Concat(parts) | Op::StackRows(parts) => buf.extend(parts.iter().copied()),
            Op::Conv2d { x, k, bias, .. } => buf.extend([*x, *k, *bias]),
            Op::Conv2dGradX { gout, k, .. } => buf.extend([*gout, *k]),
            Op::Conv2dGradK { gout, x, .. } => buf.extend([*gout, *x]),
            Op::Bilinear { img, u, v } => buf.extend([*img, *u, *v]),
            Op::BilinearGradImg { gout, u, v } => buf.extend([*gout, *u, *v]),
            Op::BilinearGradU { gout, img, u, v } | Op::BilinearGradV { gout, img, u, v } => {
                buf.extend([*gout, *img, *u, *v])
            }
            Op::SoftmaxXent { logits, .. } => buf.push(*logits),
            Op::SoftmaxXentGrad { gout, logits, .. } => buf.extend([*gout, *logits]),
        }
    }

    fn second_order_ok(&self) -> bool {
        !matches!(
            self,
            Op::Conv2d { .. }
                | Op::Conv2dGradX { .. }
                | Op::Conv2dGradK { .. }
                | Op::Bilinear { .. }
                | Op::BilinearGradImg { .. }
                | Op::BilinearGradU { .. }
                | Op::BilinearGradV { .. }
                | Op::SoftmaxXent { .. }
                | Op::SoftmaxXentGrad { .. }
        )
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Dynamically built computation graph. One graph instance is confined to a
/// single worker; independent graphs may run in parallel.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn values_mut(&mut self, id: NodeId) -> &mut [f64] {
        &mut self.nodes[id.0].values
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self, id: NodeId) {
        self.nodes[id.0].grad = None;
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(numel(&shape), values.len());
        let mut buf = Vec::new();
        op.inputs_into(&mut buf);
        let requires_grad =
            !matches!(op, Op::Leaf) && buf.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            values,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable input node.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            values,
            grad: None,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input node that never accumulates gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            values,
            grad: None,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(vec![], vec![v])
    }

    pub fn leaf_tensor(&mut self, t: &Tensor, trainable: bool) -> NodeId {
        if trainable {
            self.leaf(t.shape.clone(), t.values.clone())
        } else {
            self.constant(t.shape.clone(), t.values.clone())
        }
    }

    /// Copy of a node's current values as a gradient-free input.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let shape = self.nodes[id.0].shape.clone();
        let values = self.nodes[id.0].values.clone();
        self.constant(shape, values)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_same_shape(&mut self, op_name: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op_name,
                format!(
                    "{} vs {}",
                    format_shape(self.shape(a)),
                    format_shape(self.shape(b))
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a, b), shape, values))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub(a, b), shape, values))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a, b), shape, values))
    }

    /// y = mul * x + add, elementwise with constants.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let values: Vec<f64> = self.values(x).iter().map(|v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::AffineConst { x, mul, add }, shape, values)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 0.0)
    }

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let values: Vec<f64> = self.values(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, shape, values)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Square(x), x, |v| v * v)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sqrt(x), x, f64::sqrt)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Recip(x), x, f64::recip)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Abs(x), x, f64::abs)
    }

    /// max(0, x). The derivative at exactly 0 takes the positive branch.
    pub fn max_zero(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::MaxZero(x), x, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        if !(slope > 0.0) {
            return Err(Error::BadAttr {
                op: "leaky_relu",
                detail: format!("slope must be > 0, got {slope}"),
            });
        }
        Ok(self.unary(Op::LeakyRelu { x, slope }, x, |v| {
            if v >= 0.0 {
                v
            } else {
                slope * v
            }
        }))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh(x), x, f64::tanh)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp(x), x, f64::exp)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Log(x), x, f64::ln)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Sin(x), x, f64::sin)
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Cos(x), x, f64::cos)
    }

    /// clamp to [0,1] as max_zero(x) - max_zero(x - 1); gradient conventions
    /// follow max_zero.
    pub fn clamp01(&mut self, x: NodeId) -> Result<NodeId> {
        let lo = self.max_zero(x);
        let shifted = self.affine(x, 1.0, -1.0);
        let hi = self.max_zero(shifted);
        self.sub(lo, hi)
    }

    // ---- linear algebra --------------------------------------------------

    fn mat_dims(&self, op: &'static str, m: NodeId, t: bool) -> Result<(usize, usize)> {
        let s = self.shape(m);
        if s.len() != 2 {
            return Err(mismatch(op, format!("expected matrix, got {}", format_shape(s))));
        }
        Ok(if t { (s[1], s[0]) } else { (s[0], s[1]) })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let (m, ka) = self.mat_dims("matmul", a, ta)?;
        let (kb, n) = self.mat_dims("matmul", b, tb)?;
        if ka != kb {
            return Err(mismatch(
                "matmul",
                format!(
                    "{} vs {} (inner dims {ka} and {kb})",
                    format_shape(self.shape(a)),
                    format_shape(self.shape(b))
                ),
            ));
        }
        let mut values = vec![0.0; m * n];
        kernels::matmul(ta, tb, m, ka, n, self.values(a), self.values(b), &mut values);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, vec![m, n], values))
    }

    /// [r,c] + [c] broadcast over rows.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(mismatch(
                "bias_add",
                format!("{} vs {}", format_shape(&xs), format_shape(&bs)),
            ));
        }
        let (r, c) = (xs[0], xs[1]);
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] = self.values(x)[i * c + j] + self.values(bias)[j];
            }
        }
        Ok(self.push(Op::BiasAdd { x, bias }, xs, values))
    }

    pub fn col_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch("col_sum", format!("expected matrix, got {}", format_shape(&s))));
        }
        let (r, c) = (s[0], s[1]);
        let mut values = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                values[j] += self.values(x)[i * c + j];
            }
        }
        Ok(self.push(Op::ColSum(x), vec![c], values))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch("row_sum", format!("expected matrix, got {}", format_shape(&s))));
        }
        let (r, c) = (s[0], s[1]);
        let mut values = vec![0.0; r];
        for i in 0..r {
            let row = &self.values(x)[i * c..(i + 1) * c];
            values[i] = row.iter().sum();
        }
        Ok(self.push(Op::RowSum(x), vec![r], values))
    }

    pub fn broadcast_row(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        let s = self.shape(v).to_vec();
        if s.len() != 1 {
            return Err(mismatch(
                "broadcast_row",
                format!("expected vector, got {}", format_shape(&s)),
            ));
        }
        let c = s[0];
        let mut values = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            values.extend_from_slice(self.values(v));
        }
        Ok(self.push(Op::BroadcastRow { v, rows }, vec![rows, c], values))
    }

    pub fn broadcast_col(&mut self, v: NodeId, cols: usize) -> Result<NodeId> {
        let s = self.shape(v).to_vec();
        if s.len() != 1 {
            return Err(mismatch(
                "broadcast_col",
                format!("expected vector, got {}", format_shape(&s)),
            ));
        }
        let r = s[0];
        let mut values = Vec::with_capacity(r * cols);
        for i in 0..r {
            let x = self.values(v)[i];
            values.extend(std::iter::repeat(x).take(cols));
        }
        Ok(self.push(Op::BroadcastCol { v, cols }, vec![r, cols], values))
    }

    pub fn broadcast_scalar(&mut self, s: NodeId, n: usize) -> Result<NodeId> {
        if !self.shape(s).is_empty() {
            return Err(mismatch(
                "broadcast_scalar",
                format!("expected scalar, got {}", format_shape(self.shape(s))),
            ));
        }
        let v = self.values(s)[0];
        Ok(self.push(Op::BroadcastScalar { s, n }, vec![n], vec![v; n]))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.values(x).iter().sum();
        self.push(Op::Sum(x), vec![], vec![total])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.values(x).len() as f64;
        let total: f64 = self.values(x).iter().sum();
        self.push(Op::Mean(x), vec![], vec![total / n])
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.values(x).len() {
            return Err(mismatch(
                "reshape",
                format!(
                    "{} cannot be viewed as {}",
                    format_shape(self.shape(x)),
                    format_shape(&shape)
                ),
            ));
        }
        let values = self.values(x).to_vec();
        Ok(self.push(Op::Reshape(x), shape, values))
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let n = self.values(x).len();
        self.reshape(x, vec![n]).expect("flatten preserves numel")
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no inputs".to_string()));
        }
        let mut values = Vec::new();
        for p in parts {
            if self.shape(*p).len() > 1 {
                return Err(mismatch(
                    "concat",
                    format!("expected vectors, got {}", format_shape(self.shape(*p))),
                ));
            }
            values.extend_from_slice(self.values(*p));
        }
        let n = values.len();
        Ok(self.push(Op::Concat(parts.to_vec()), vec![n], values))
    }

    pub fn slice_vec(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let n = self.values(x).len();
        if self.shape(x).len() != 1 || start + len > n {
            return Err(mismatch(
                "slice",
                format!("[{start}..{}] of {}", start + len, format_shape(self.shape(x))),
            ));
        }
        let values = self.values(x)[start..start + len].to_vec();
        Ok(self.push(Op::SliceVec { x, start }, vec![len], values))
    }

    fn scatter_vec(&mut self, x: NodeId, start: usize, full_len: usize) -> NodeId {
        let mut values = vec![0.0; full_len];
        let src = self.values(x).to_vec();
        values[start..start + src.len()].copy_from_slice(&src);
        self.push(Op::ScatterVec { x, start }, vec![full_len], values)
    }

    pub fn row_of(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || row >= s[0] {
            return Err(mismatch(
                "row_of",
                format!("row {row} of {}", format_shape(&s)),
            ));
        }
        let c = s[1];
        let values = self.values(x)[row * c..(row + 1) * c].to_vec();
        Ok(self.push(Op::RowOf { x, row }, vec![c], values))
    }

    fn row_scatter(&mut self, x: NodeId, row: usize, rows: usize) -> NodeId {
        let c = self.values(x).len();
        let mut values = vec![0.0; rows * c];
        let src = self.values(x).to_vec();
        values[row * c..(row + 1) * c].copy_from_slice(&src);
        self.push(Op::RowScatter { x, row }, vec![rows, c], values)
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(mismatch("stack_rows", "no inputs".to_string()));
        }
        let c = self.values(parts[0]).len();
        let mut values = Vec::with_capacity(parts.len() * c);
        for p in parts {
            if self.shape(*p).len() != 1 || self.values(*p).len() != c {
                return Err(mismatch(
                    "stack_rows",
                    format!(
                        "expected vectors of length {c}, got {}",
                        format_shape(self.shape(*p))
                    ),
                ));
            }
            values.extend_from_slice(self.values(*p));
        }
        Ok(self.push(Op::StackRows(parts.to_vec()), vec![parts.len(), c], values))
    }

    // ---- image ops ---------------------------------------------------------

    /// Crop [c,h,w] to [c,oh,ow] starting at (top,left).
    pub fn crop2d(
        &mut self,
        x: NodeId,
        top: usize,
        left: usize,
        oh: usize,
        ow: usize,
    ) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(mismatch("crop", format!("expected [c,h,w], got {}", format_shape(&s))));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if top + oh > h || left + ow > w || oh == 0 || ow == 0 {
            return Err(mismatch(
                "crop",
                format!("window {oh}x{ow}+({top},{left}) exceeds {}", format_shape(&s)),
            ));
        }
        let mut values = vec![0.0; c * oh * ow];
        kernels::crop(self.values(x), c, h, w, top, left, oh, ow, &mut values);
        Ok(self.push(Op::Crop2d { x, top, left }, vec![c, oh, ow], values))
    }

    fn pad_image(&mut self, x: NodeId, top: usize, left: usize, h: usize, w: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        let (c, oh, ow) = (s[0], s[1], s[2]);
        let mut values = vec![0.0; c * h * w];
        let src = self.values(x).to_vec();
        kernels::pad_scatter(&src, c, oh, ow, top, left, h, w, &mut values);
        self.push(Op::PadImage { x, top, left }, vec![c, h, w], values)
    }

    /// Valid 2D convolution: x [n,ci,h,w] * k [co,ci,kh,kw] + bias [co].
    /// First-order gradients only.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(mismatch(
                "conv2d",
                format!(
                    "expected x [n,ci,h,w], k [co,ci,kh,kw], bias [co]; got {}, {}, {}",
                    format_shape(&xs),
                    format_shape(&ks),
                    format_shape(&bs)
                ),
            ));
        }
        if xs[1] != ks[1] || bs[0] != ks[0] || xs[2] < ks[2] || xs[3] < ks[3] || stride == 0 {
            return Err(mismatch(
                "conv2d",
                format!("x {} incompatible with k {}", format_shape(&xs), format_shape(&ks)),
            ));
        }
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let mut values = vec![0.0; n * co * oh * ow];
        kernels::conv2d(
            self.values(x),
            self.values(k),
            self.values(bias),
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            &mut values,
        );
        Ok(self.push(Op::Conv2d { x, k, bias, stride }, vec![n, co, oh, ow], values))
    }

    /// Global average pool over the two trailing spatial dims.
    pub fn mean_hw(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("mean_hw", format!("expected [n,c,h,w], got {}", format_shape(&s))));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let mut values = vec![0.0; n * c];
        for i in 0..n * c {
            let chunk = &self.values(x)[i * hw..(i + 1) * hw];
            values[i] = chunk.iter().sum::<f64>() / hw as f64;
        }
        Ok(self.push(Op::MeanHw(x), vec![n, c], values))
    }

    fn broadcast_hw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        let mut values = Vec::with_capacity(n * c * h * w);
        for i in 0..n * c {
            let v = self.values(x)[i];
            values.extend(std::iter::repeat(v).take(h * w));
        }
        self.push(Op::BroadcastHw { x, h, w }, vec![n, c, h, w], values)
    }

    /// Bilinear sampling of img [c,h,w] at pixel-space coordinates u,v
    /// (length oh*ow each); zero outside the source extent. First-order
    /// gradients flow to the image and to both coordinate arrays.
    pub fn bilinear_sample(
        &mut self,
        img: NodeId,
        u: NodeId,
        v: NodeId,
        oh: usize,
        ow: usize,
    ) -> Result<NodeId> {
        let is = self.shape(img).to_vec();
        if is.len() != 3 {
            return Err(mismatch(
                "bilinear_sample",
                format!("expected image [c,h,w], got {}", format_shape(&is)),
            ));
        }
        let npix = oh * ow;
        if self.values(u).len() != npix || self.values(v).len() != npix {
            return Err(mismatch(
                "bilinear_sample",
                format!(
                    "grid {} / {} vs output {oh}x{ow}",
                    format_shape(self.shape(u)),
                    format_shape(self.shape(v))
                ),
            ));
        }
        let (c, h, w) = (is[0], is[1], is[2]);
        let mut values = vec![0.0; c * npix];
        kernels::bilinear_sample(self.values(img), c, h, w, self.values(u), self.values(v), &mut values);
        Ok(self.push(Op::Bilinear { img, u, v }, vec![c, oh, ow], values))
    }

    /// Mean cross-entropy of softmax(logits [n,k]) against integer labels.
    /// First-order gradients only.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Arc<Vec<usize>>) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("logits {} vs {} labels", format_shape(&s), labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(Error::BadAttr {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        let mut loss = 0.0;
        for i in 0..n {
            let row = &self.values(logits)[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += logsum - row[labels[i]];
        }
        loss /= n as f64;
        Ok(self.push(Op::SoftmaxXent { logits, labels }, vec![], vec![loss]))
    }

    // ---- generic op constructor -------------------------------------------

    /// String-keyed op constructor. `attrs` supplies op attributes where the
    /// kind needs them (slope, reshape target, crop window, stride).
    pub fn forward_primitive(
        &mut self,
        kind: &str,
        inputs: &[NodeId],
        attrs: &OpAttrs,
    ) -> Result<NodeId> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::BadAttr {
                    op: "forward_primitive",
                    detail: format!("kind `{kind}` expects {n} inputs, got {}", inputs.len()),
                });
            }
            Ok(())
        };
        match kind {
            "matmul" => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            "bias_add" => {
                want(2)?;
                self.bias_add(inputs[0], inputs[1])
            }
            "add" => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            "sub" => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            "mul" => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            "leaky_relu" => {
                want(1)?;
                let slope = attrs.slope.ok_or(Error::BadAttr {
                    op: "leaky_relu",
                    detail: "missing slope".to_string(),
                })?;
                self.leaky_relu(inputs[0], slope)
            }
            "tanh" => {
                want(1)?;
                Ok(self.tanh(inputs[0]))
            }
            "mean" => {
                want(1)?;
                Ok(self.mean(inputs[0]))
            }
            "sum" => {
                want(1)?;
                Ok(self.sum(inputs[0]))
            }
            "square" => {
                want(1)?;
                Ok(self.square(inputs[0]))
            }
            "sqrt" => {
                want(1)?;
                Ok(self.sqrt(inputs[0]))
            }
            "abs" => {
                want(1)?;
                Ok(self.abs(inputs[0]))
            }
            "max_zero" => {
                want(1)?;
                Ok(self.max_zero(inputs[0]))
            }
            "flatten" => {
                want(1)?;
                Ok(self.flatten(inputs[0]))
            }
            "crop" => {
                want(1)?;
                let (top, left, oh, ow) = attrs.crop.ok_or(Error::BadAttr {
                    op: "crop",
                    detail: "missing crop window".to_string(),
                })?;
                self.crop2d(inputs[0], top, left, oh, ow)
            }
            "conv2d" => {
                want(3)?;
                let stride = attrs.stride.unwrap_or(1);
                self.conv2d(inputs[0], inputs[1], inputs[2], stride)
            }
            other => Err(Error::UnknownOpKind(other.to_string())),
        }
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar root; every requires-grad node reachable
    /// from the root receives its gradient, accumulating additively across
    /// consumers and across successive backward calls.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.shape(root).is_empty() {
            return Err(Error::NonScalarRoot(format_shape(self.shape(root))));
        }
        let snapshot = self.nodes.len();
        let active = self.ancestors(root, |n| n.requires_grad);
        let seed = self.scalar(1.0);
        let grads = self.build_grads(root, seed, &active, snapshot, false, None)?;
        for (idx, g) in grads.iter().enumerate() {
            if let Some(gid) = g {
                if self.nodes[idx].requires_grad {
                    let gv = self.nodes[gid.0].values.clone();
                    match &mut self.nodes[idx].grad {
                        Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(gv),
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of a scalar root with respect to `wrt`, returned as a node
    /// that is itself differentiable with respect to upstream parameters.
    /// Fails if any op between `wrt` and the root lacks second-order support.
    pub fn input_gradient_node(&mut self, root: NodeId, wrt: NodeId) -> Result<NodeId> {
        if !self.shape(root).is_empty() {
            return Err(Error::NonScalarRoot(format_shape(self.shape(root))));
        }
        if !self.nodes[wrt.0].requires_grad {
            return Err(Error::NotOnPath { root: root.0, wrt: wrt.0 });
        }
        let snapshot = self.nodes.len();
        // Active set: nodes on a path root -> wrt.
        let above = self.ancestors(root, |_| true);
        let mut active = vec![false; snapshot];
        self.mark_depending_on(wrt, &above, &mut active);
        if !active[root.0] || !active[wrt.0] {
            return Err(Error::NotOnPath { root: root.0, wrt: wrt.0 });
        }
        // Every op strictly between wrt and root must be twice differentiable.
        for (idx, is_active) in active.iter().enumerate() {
            if *is_active && idx != wrt.0 && !self.nodes[idx].op.second_order_ok() {
                return Err(Error::NotTwiceDifferentiable {
                    op: self.nodes[idx].op.name(),
                });
            }
        }
        let seed = self.scalar(1.0);
        let grads = self.build_grads(root, seed, &active, snapshot, true, Some(wrt))?;
        match grads[wrt.0] {
            Some(g) => Ok(g),
            // Root does not depend on wrt numerically (e.g. masked away):
            // the gradient is identically zero.
            None => {
                let shape = self.nodes[wrt.0].shape.clone();
                let n = numel(&shape);
                Ok(self.constant(shape, vec![0.0; n]))
            }
        }
    }

    /// Nodes from which `root` is reachable... more precisely: ancestors of
    /// `root` through parent edges, restricted to nodes satisfying `keep`
    /// transitively (a node is kept if it satisfies `keep` or feeds one).
    fn ancestors(&self, root: NodeId, keep: impl Fn(&Node) -> bool) -> Vec<bool> {
        let mut active = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        let mut buf = Vec::new();
        active[root.0] = true;
        while let Some(id) = stack.pop() {
            self.nodes[id.0].op.inputs_into(&mut buf);
            for inp in &buf {
                if !active[inp.0] && keep(&self.nodes[inp.0]) {
                    active[inp.0] = true;
                    stack.push(*inp);
                }
            }
            buf.clear();
        }
        active
    }

    /// Restrict `above` (ancestors of root) to nodes that depend on `wrt`.
    fn mark_depending_on(&self, wrt: NodeId, above: &[bool], out: &mut [bool]) {
        let mut buf = Vec::new();
        out[wrt.0] = above[wrt.0];
        for idx in wrt.0 + 1..out.len() {
            if !above[idx] {
                continue;
            }
            self.nodes[idx].op.inputs_into(&mut buf);
            if buf.iter().any(|i| out[i.0]) {
                out[idx] = true;
            }
        }
    }

    /// Core reverse sweep: builds gradient nodes for every active node, in
    /// deterministic reverse-topological (descending id) order.
    fn build_grads(
        &mut self,
        root: NodeId,
        seed: NodeId,
        active: &[bool],
        snapshot: usize,
        second_order: bool,
        stop: Option<NodeId>,
    ) -> Result<Vec<Option<NodeId>>> {
        let mut grads: Vec<Option<NodeId>> = vec![None; snapshot];
        grads[root.0] = Some(seed);
        let mut buf = Vec::new();
        for idx in (0..=root.0).rev() {
            if !active[idx] || stop == Some(NodeId(idx)) {
                continue;
            }
            let gout = match grads[idx] {
                Some(g) => g,
                None => continue,
            };
            if second_order && !self.nodes[idx].op.second_order_ok() {
                return Err(Error::NotTwiceDifferentiable {
                    op: self.nodes[idx].op.name(),
                });
            }
            let op = self.nodes[idx].op.clone();
            op.inputs_into(&mut buf);
            let inputs = buf.clone();
            let contributions = self.vjp(NodeId(idx), &op, gout)?;
            for (slot, contrib) in contributions.into_iter().enumerate() {
                let Some(contrib) = contrib else { continue };
                let inp = inputs[slot];
                if !active[inp.0] {
                    continue;
                }
                grads[inp.0] = Some(match grads[inp.0] {
                    Some(existing) => self.add(existing, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(grads)
    }

    /// Per-op vector-Jacobian products, expressed as new graph nodes. The
    /// returned vector is aligned with the op's input list; `None` means no
    /// gradient flows to that input (constants, integer-like inputs).
    fn vjp(&mut self, out: NodeId, op: &Op, g: NodeId) -> Result<Vec<Option<NodeId>>> {
        let skip = |graph: &Graph, id: NodeId| !graph.nodes[id.0].requires_grad;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                let ga = if skip(self, *a) { None } else { Some(g) };
                let gb = if skip(self, *b) { None } else { Some(g) };
                vec![ga, gb]
            }
            Op::Sub(a, b) => {
                let ga = if skip(self, *a) { None } else { Some(g) };
                let gb = if skip(self, *b) { None } else { Some(self.neg(g)) };
                vec![ga, gb]
            }
            Op::Mul(a, b) => {
                let ga = if skip(self, *a) { None } else { Some(self.mul(g, *b)?) };
                let gb = if skip(self, *b) { None } else { Some(self.mul(g, *a)?) };
                vec![ga, gb]
            }
            Op::AffineConst { x, mul, .. } => {
                let gx = if skip(self, *x) { None } else { Some(self.affine(g, *mul, 0.0)) };
                vec![gx]
            }
            Op::MatMul { a, b, ta, tb } => {
                let ga = if skip(self, *a) {
                    None
                } else if !*ta {
                    Some(self.matmul_t(g, false, *b, !*tb)?)
                } else {
                    Some(self.matmul_t(*b, *tb, g, true)?)
                };
                let gb = if skip(self, *b) {
                    None
                } else if !*tb {
                    Some(self.matmul_t(*a, !*ta, g, false)?)
                } else {
                    Some(self.matmul_t(g, true, *a, *ta)?)
                };
                vec![ga, gb]
            }
            Op::BiasAdd { x, bias } => {
                let gx = if skip(self, *x) { None } else { Some(g) };
                let gb = if skip(self, *bias) { None } else { Some(self.col_sum(g)?) };
                vec![gx, gb]
            }
            Op::ColSum(x) => {
                let rows = self.shape(*x)[0];
                vec![Some(self.broadcast_row(g, rows)?)]
            }
            Op::RowSum(x) => {
                let cols = self.shape(*x)[1];
                vec![Some(self.broadcast_col(g, cols)?)]
            }
            Op::BroadcastRow { .. } => vec![Some(self.col_sum(g)?)],
            Op::BroadcastCol { .. } => vec![Some(self.row_sum(g)?)],
            Op::BroadcastScalar { .. } => vec![Some(self.sum(g))],
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                let b = self.broadcast_scalar(g, numel(&shape))?;
                vec![Some(self.reshape(b, shape)?)]
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = numel(&shape);
                let scaled = self.affine(g, 1.0 / n as f64, 0.0);
                let b = self.broadcast_scalar(scaled, n)?;
                vec![Some(self.reshape(b, shape)?)]
            }
            Op::Square(x) => {
                let two_x = self.affine(*x, 2.0, 0.0);
                vec![Some(self.mul(g, two_x)?)]
            }
            Op::Sqrt(_) => {
                let r = self.recip(out);
                let half_r = self.affine(r, 0.5, 0.0);
                vec![Some(self.mul(g, half_r)?)]
            }
            Op::Recip(_) => {
                let y2 = self.square(out);
                let neg = self.affine(y2, -1.0, 0.0);
                vec![Some(self.mul(g, neg)?)]
            }
            Op::Abs(x) => {
                // Piecewise-constant sign mask, treated as constant upstream.
                let mask: Vec<f64> = self
                    .values(*x)
                    .iter()
                    .map(|v| if *v >= 0.0 { 1.0 } else { -1.0 })
                    .collect();
                let shape = self.shape(*x).to_vec();
                let m = self.constant(shape, mask);
                vec![Some(self.mul(g, m)?)]
            }
            Op::MaxZero(x) => {
                let mask: Vec<f64> = self
                    .values(*x)
                    .iter()
                    .map(|v| if *v >= 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let shape = self.shape(*x).to_vec();
                let m = self.constant(shape, mask);
                vec![Some(self.mul(g, m)?)]
            }
            Op::LeakyRelu { x, slope } => {
                let slope = *slope;
                let mask: Vec<f64> = self
                    .values(*x)
                    .iter()
                    .map(|v| if *v >= 0.0 { 1.0 } else { slope })
                    .collect();
                let shape = self.shape(*x).to_vec();
                let m = self.constant(shape, mask);
                vec![Some(self.mul(g, m)?)]
            }
            Op::Tanh(_) => {
                let y2 = self.square(out);
                let one_minus = self.affine(y2, -1.0, 1.0);
                vec![Some(self.mul(g, one_minus)?)]
            }
            Op::Exp(_) => vec![Some(self.mul(g, out)?)],
            Op::Log(x) => {
                let r = self.recip(*x);
                vec![Some(self.mul(g, r)?)]
            }
            Op::Sin(x) => {
                let c = self.cos(*x);
                vec![Some(self.mul(g, c)?)]
            }
            Op::Cos(x) => {
                let s = self.sin(*x);
                let neg = self.affine(s, -1.0, 0.0);
                vec![Some(self.mul(g, neg)?)]
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                vec![Some(self.reshape(g, shape)?)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out_grads = Vec::with_capacity(parts.len());
                for p in parts {
                    let len = self.values(*p).len();
                    if skip(self, *p) {
                        out_grads.push(None);
                    } else {
                        out_grads.push(Some(self.slice_vec(g, offset, len)?));
                    }
                    offset += len;
                }
                out_grads
            }
            Op::SliceVec { x, start } => {
                let full = self.values(*x).len();
                vec![Some(self.scatter_vec(g, *start, full))]
            }
            Op::ScatterVec { x, start } => {
                let len = self.values(*x).len();
                vec![Some(self.slice_vec(g, *start, len)?)]
            }
            Op::RowOf { x, row } => {
                let rows = self.shape(*x)[0];
                vec![Some(self.row_scatter(g, *row, rows))]
            }
            Op::RowScatter { x: _, row } => vec![Some(self.row_of(g, *row)?)],
            Op::StackRows(parts) => {
                let mut out_grads = Vec::with_capacity(parts.len());
                for (i, p) in parts.iter().enumerate() {
                    if skip(self, *p) {
                        out_grads.push(None);
                    } else {
                        out_grads.push(Some(self.row_of(g, i)?));
                    }
                }
                out_grads
            }
            Op::Crop2d { x, top, left } => {
                let s = self.shape(*x).to_vec();
                vec![Some(self.pad_image(g, *top, *left, s[1], s[2]))]
            }
            Op::PadImage { x, top, left } => {
                let s = self.shape(*x).to_vec();
                vec![Some(self.crop2d(g, *top, *left, s[1], s[2])?)]
            }
            Op::MeanHw(x) => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let scaled = self.affine(g, 1.0 / (h * w) as f64, 0.0);
                vec![Some(self.broadcast_hw(scaled, h, w))]
            }
            Op::BroadcastHw { x: _, h, w } => {
                let m = self.mean_hw(g)?;
                vec![Some(self.affine(m, (*h * *w) as f64, 0.0))]
            }
            Op::Conv2d { x, k, bias, stride } => {
                let gx = if skip(self, *x) {
                    None
                } else {
                    Some(self.conv2d_grad_x(g, *k, *x, *stride))
                };
                let gk = if skip(self, *k) {
                    None
                } else {
                    Some(self.conv2d_grad_k(g, *x, *k, *stride))
                };
                let gb = if skip(self, *bias) {
                    None
                } else {
                    // Sum of gout over batch and spatial dims, per channel.
                    let gs = self.shape(g).to_vec();
                    let (n, co, oh, ow) = (gs[0], gs[1], gs[2], gs[3]);
                    let flat = self.reshape(g, vec![n * co, oh * ow])?;
                    let per_map = self.row_sum(flat)?;
                    let as_mat = self.reshape(per_map, vec![n, co])?;
                    Some(self.col_sum(as_mat)?)
                };
                vec![gx, gk, gb]
            }
            Op::Bilinear { img, u, v } => {
                let gimg = if skip(self, *img) {
                    None
                } else {
                    Some(self.bilinear_grad_img(g, *img, *u, *v))
                };
                let gu = if skip(self, *u) {
                    None
                } else {
                    Some(self.bilinear_grad_coord(g, *img, *u, *v, false))
                };
                let gv = if skip(self, *v) {
                    None
                } else {
                    Some(self.bilinear_grad_coord(g, *img, *u, *v, true))
                };
                vec![gimg, gu, gv]
            }
            Op::SoftmaxXent { logits, labels } => {
                let gl = self.softmax_xent_grad(g, *logits, labels.clone());
                vec![Some(gl)]
            }
            Op::Conv2dGradX { .. }
            | Op::Conv2dGradK { .. }
            | Op::BilinearGradImg { .. }
            | Op::BilinearGradU { .. }
            | Op::BilinearGradV { .. }
            | Op::SoftmaxXentGrad { .. } => {
                return Err(Error::NotTwiceDifferentiable { op: op.name() })
            }
        })
    }

    fn conv2d_grad_x(&mut self, gout: NodeId, k: NodeId, x: NodeId, stride: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        let mut values = vec![0.0; n * ci * h * w];
        kernels::conv2d_grad_input(
            self.values(gout),
            self.values(k),
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            &mut values,
        );
        self.push(Op::Conv2dGradX { gout, k, stride }, xs, values)
    }

    fn conv2d_grad_k(&mut self, gout: NodeId, x: NodeId, k: NodeId, stride: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        let mut values = vec![0.0; co * ci * kh * kw];
        kernels::conv2d_grad_kernel(
            self.values(gout),
            self.values(x),
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            &mut values,
        );
        self.push(Op::Conv2dGradK { gout, x, stride }, ks, values)
    }

    fn bilinear_grad_img(&mut self, gout: NodeId, img: NodeId, u: NodeId, v: NodeId) -> NodeId {
        let is = self.shape(img).to_vec();
        let (c, h, w) = (is[0], is[1], is[2]);
        let mut values = vec![0.0; c * h * w];
        kernels::bilinear_grad_image(
            self.values(gout),
            c,
            h,
            w,
            self.values(u),
            self.values(v),
            &mut values,
        );
        self.push(Op::BilinearGradImg { gout, u, v }, is, values)
    }

    fn bilinear_grad_coord(
        &mut self,
        gout: NodeId,
        img: NodeId,
        u: NodeId,
        v: NodeId,
        wrt_v: bool,
    ) -> NodeId {
        let is = self.shape(img).to_vec();
        let (c, h, w) = (is[0], is[1], is[2]);
        let npix = self.values(u).len();
        let mut gu = vec![0.0; npix];
        let mut gv = vec![0.0; npix];
        kernels::bilinear_grad_coords(
            self.values(gout),
            self.values(img),
            c,
            h,
            w,
            self.values(u),
            self.values(v),
            &mut gu,
            &mut gv,
        );
        if wrt_v {
            self.push(Op::BilinearGradV { gout, img, u, v }, vec![npix], gv)
        } else {
            self.push(Op::BilinearGradU { gout, img, u, v }, vec![npix], gu)
        }
    }

    fn softmax_xent_grad(&mut self, gout: NodeId, logits: NodeId, labels: Arc<Vec<usize>>) -> NodeId {
        let s = self.shape(logits).to_vec();
        let (n, k) = (s[0], s[1]);
        let gscale = self.values(gout)[0] / n as f64;
        let mut values = vec![0.0; n * k];
        for i in 0..n {
            let row = &self.values(logits)[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..k {
                let p = exps[j] / denom;
                let target = if labels[i] == j { 1.0 } else { 0.0 };
                values[i * k + j] = gscale * (p - target);
            }
        }
        self.push(Op::SoftmaxXentGrad { gout, logits, labels }, s, values)
    }
}

/// Attributes for [`Graph::forward_primitive`].
#[derive(Debug, Default, Clone)]
pub struct OpAttrs {
    pub slope: Option<f64>,
    pub stride: Option<usize>,
    /// (top, left, out_h, out_w)
    pub crop: Option<(usize, usize, usize, usize)>,
}
