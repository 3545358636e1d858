//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Tape`] records every primitive applied to its nodes, in order. Values
//! are computed eagerly; [`Tape::backward`] walks the record in exact reverse
//! order and accumulates adjoints into per-node gradient buffers.
//!
//! ```
//! use conceptda::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.param(Tensor::scalar(3.0));
//! let loss = tape.mul(w, w).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[6.0]);
//! ```

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, GradCheckReport};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense numeric array. `grad` is populated when the tensor is read back from
/// a tape after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data, grad: None, node: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n], grad: None, node: None }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None, node: None }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None, node: None }
    }

    /// Build a `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("tensor", "ragged rows"));
        }
        Self::new(vec![r, c], rows.iter().flatten().copied().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Rows and columns when viewed as a matrix whose column count is the last dim.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = if cols == 0 { 0 } else { self.data.len() / cols };
        (rows, cols)
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        let (_, cols) = self.as_matrix();
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, cols) = self.as_matrix();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            node: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            grad: None,
            node: None,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    MeanAxis { input: NodeId, axis: usize },
    MeanAll(NodeId),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    SliceLast { input: NodeId, start: usize, end: usize },
    Mix { weights: NodeId, pos: NodeId, neg: NodeId, d: usize },
    SoftmaxCrossEntropy { logits: NodeId, target: Vec<T>, probs: Vec<T> },
    BinaryCrossEntropy { p: NodeId, target: Vec<T> },
    MinConst { input: NodeId, passthrough: bool },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MeanAll(_) => "mean",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::SliceLast { .. } => "slice",
            Op::Mix { .. } => "assemble_embedding",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
            Op::MinConst { .. } => "scalar_min_const",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::MeanAll(a) | Op::Reshape(a) => vec![*a],
            Op::MeanAxis { input, .. } | Op::SliceLast { input, .. } | Op::MinConst { input, .. } => {
                vec![*input]
            }
            Op::Concat(xs) => xs.clone(),
            Op::Mix { weights, pos, neg, .. } => vec![*weights, *pos, *neg],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::BinaryCrossEntropy { p, .. } => vec![*p],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t, true)
    }

    /// Record a constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { shape: t.shape, value: t.data, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient, or zeros when nothing reached the node.
    pub fn grad_or_zero(&self, id: NodeId) -> Vec<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.nodes[id.0].value.len()],
        }
    }

    /// Snapshot of a node as a standalone tensor, including its gradient.
    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: self.grads[id.0].clone(),
            node: Some(id),
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// First recorded node whose value contains NaN, else the first holding
    /// an infinity.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        let find = |bad: fn(&T) -> bool| {
            self.nodes
                .iter()
                .enumerate()
                .find(|(_, n)| n.value.iter().any(bad))
                .map(|(i, n)| (NodeId(i), n.op.name()))
        };
        find(|v| v.is_nan()).or_else(|| find(|v| v.is_infinite()))
    }

    /// Accumulate d`loss`/d(node) into every reachable differentiable node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        // Adjoints for this pass only; accumulated into `grads` at the end so
        // repeated passes add up.
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            ops::propagate(&self.nodes, i, &g, &mut adj);
            let slot = &mut self.grads[i];
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

pub(crate) fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], id: NodeId, len: usize, f: impl Fn(&mut [T])) {
    let slot = &mut adj[id.0];
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

#[cfg(test)]
mod tests;
