//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; the backward pass walks it from the loss down to index
//! zero and accumulates input gradients in that fixed order.

use crate::error::{DiffError, Result};
use crate::ops::{elementwise, linalg, nn, shape};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    /// Tanh approximation: `0.5·x·(1 + tanh(0.7978845608·(x + 0.044715·x³)))`.
    Gelu,
    /// `elu(x) + 1`, strictly positive; the linear-attention feature map.
    EluPlusOne,
    Exp,
    Square,
    Sqrt,
}

/// Recorded provenance of a node: which operation produced it and what the
/// backward rule needs to replay the chain rule.
#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Unary(UnaryOp, Var),
    ScaleGrad(Var, T),
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax { x: Var, axis: usize },
    NormalizeL2 { x: Var, axis: usize, eps: T, norms: Vec<T> },
    LayerNorm(nn::NormSaved<T>),
    BatchNorm(nn::NormSaved<T>),
    Conv2d { x: Var, w: Var, b: Option<Var>, k: usize },
    Conv2dHwc { x: Var, w: Var, b: Option<Var> },
    Upsample { x: Var, factor: usize },
    CrossEntropy { logits: Var, labels: Vec<u8>, probs: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single computation graph. Single-threaded by construction; build one per
/// forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (parameter or input whose gradient is wanted).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(DiffError::NonScalarLoss(out.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(out.dims().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.backward_node(node, g)?;
            for (v, gv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary(kind, a, b) => elementwise::binary_backward(*kind, *a, val(*a), *b, val(*b), &g),
            Op::AddScalar(x) => vec![(*x, g)],
            Op::MulScalar(x, s) => vec![(*x, g.map(|v| v * *s))],
            Op::Unary(kind, x) => vec![(*x, elementwise::unary_backward(*kind, val(*x), y, &g))],
            Op::ScaleGrad(x, s) => vec![(*x, g.map(|v| v * *s))],
            Op::SumAxis { x, axis } => vec![(*x, shape::sum_axis_backward(val(*x).dims(), *axis, &g))],
            Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).dims().to_vec(), g.item()))],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).dims().to_vec())?)],
            Op::Permute { x, perm } => vec![(*x, g.permute(&shape::inverse_perm(perm))?)],
            Op::Narrow { x, axis, start } => {
                vec![(*x, shape::narrow_backward(val(*x).dims(), *axis, *start, &g))]
            }
            Op::Concat { xs, axis } => shape::concat_backward(xs, |v| val(v).dims(), *axis, &g)?,
            Op::Matmul(a, b) => linalg::matmul_backward(*a, val(*a), *b, val(*b), &g),
            Op::Linear { x, w, b } => linalg::linear_backward(*x, val(*x), *w, val(*w), *b, &g),
            Op::Softmax { x, axis } => vec![(*x, nn::softmax_backward(y, *axis, &g))],
            Op::NormalizeL2 { x, axis, eps, norms } => {
                vec![(*x, nn::normalize_backward(y, *axis, *eps, norms, &g))]
            }
            Op::LayerNorm(saved) => nn::layernorm_backward(saved, val(saved.gamma), &g),
            Op::BatchNorm(saved) => nn::batchnorm_backward(saved, val(saved.gamma), &g),
            Op::Conv2d { x, w, b, k } => nn::conv2d_backward(*x, val(*x), *w, val(*w), *b, *k, &g),
            Op::Conv2dHwc { x, w, b } => nn::conv2d_hwc_backward(*x, val(*x), *w, val(*w), *b, &g),
            Op::Upsample { x, factor } => vec![(*x, nn::upsample_backward(val(*x).dims(), *factor, &g))],
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => vec![(
                *logits,
                nn::cross_entropy_backward(val(*logits).dims(), labels, probs, *count, &g),
            )],
        })
    }
}
