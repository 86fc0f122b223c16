//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation executed through it. Node ids are
//! handed out in execution order, so the record is already topologically
//! sorted and [`Graph::backward`] simply walks it in reverse.
//!
//! ```
//! use grassflow::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64([3], &[1.0, -2.0, 0.5])?);
//! let sq = g.mul(x, x)?;
//! let loss = g.sum(sq)?;
//! g.backward(loss)?;
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! # Ok::<(), grassflow::Error>(())
//! ```

mod gradcheck;
pub(crate) mod ops;

pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use ops::{Activation, BinaryOp};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written vector-Jacobian product.
///
/// Used for fused kernels (Plücker features, causal attention) that would be
/// wasteful to express through the primitive op set.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradient with respect to each input, in input order. `None` means the
    /// input receives no gradient from this op.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

pub(crate) enum Op<T: Element> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Binary { kind: BinaryOp, a: Var, b: Var },
    Scale { a: Var, factor: T },
    Concat { parts: Vec<Var> },
    Activation { kind: Activation, a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    Dropout { a: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Sum { a: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Element> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } => std::iter::once(*x).chain(Some(*w)).chain(*b).collect(),
            Op::Scale { a, .. }
            | Op::Activation { a, .. }
            | Op::Dropout { a, .. }
            | Op::Sum { a } => vec![*a],
            Op::Concat { parts } => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Embedding { table, .. } => vec![*table],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Binary { kind, .. } => kind.name(),
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Activation { kind, .. } => kind.name(),
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Embedding { .. } => "embedding",
            Op::Sum { .. } => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    /// Per-op forward byproducts reused by backward (row statistics, CDFs).
    aux: Vec<T>,
}

/// Record of executed operations, owning every intermediate value.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a differentiable input whose gradient is kept after backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, op: Op<T>) -> Result<Var> {
        let (value, aux) = self.eval(&op)?;
        value.ensure_finite(op.name())?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            aux,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn custom(&mut self, inputs: &[Var], op: impl CustomOp<T> + 'static) -> Result<Var> {
        self.push(Op::Custom {
            inputs: inputs.to_vec(),
            op: Box::new(op),
        })
    }

    /// Recomputes every recorded op from its recorded inputs and reports the
    /// first node whose output differs bitwise from the stored value.
    pub fn replay_mismatch(&self) -> Result<Option<Var>> {
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let (value, _) = self.eval(&node.op)?;
            if !value.bit_eq(&node.value) {
                return Ok(Some(Var(i)));
            }
        }
        Ok(None)
    }

    /// Reverse-mode sweep from a scalar output. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *d;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            let contributions = self.vjp(i, g)?;
            for (var, grad) in contributions {
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&grad) {
                            *a = *a + *d;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
