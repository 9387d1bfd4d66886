//! Reverse-mode automatic differentiation over a flat, append-only tape.
//!
//! Every value computed through a [`Tape`] is a node; node order is the
//! recording order and therefore a valid topological order. Nodes whose
//! inputs carry no gradient are stored as constants, so evaluation without
//! parameters that require gradients records nothing to differentiate.

use std::cell::{Cell, Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::op::{self, Op};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
pub struct TapeNode<T> {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub value: Tensor<T>,
    pub requires_grad: bool,
}

pub struct Tape<T> {
    id: Cell<u64>,
    nodes: RefCell<Vec<TapeNode<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.idx >= self.grads.len() {
            return Err(Error::Tape("variable does not belong to this backward pass".into()));
        }
        let shape = self.shapes[v.idx].clone();
        match &self.grads[v.idx] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reached(&self, v: Var) -> bool {
        v.tape == self.tape && self.grads.get(v.idx).is_some_and(|g| g.is_some())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: Cell::new(fresh_id()),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Drops every node. Handles issued before the reset become invalid.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.id.set(fresh_id());
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: TapeNode<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self.id.get(),
            idx: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id.get() || v.idx >= self.len() {
            return Err(Error::Tape(format!(
                "variable #{} is not on this tape",
                v.idx
            )));
        }
        Ok(())
    }

    /// Records a tensor as an input. Its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.push(TapeNode {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        let mut value = value;
        value.set_requires_grad(false);
        self.leaf(value)
    }

    pub fn param(&self, value: &Tensor<T>) -> Var {
        let mut v = value.clone();
        v.clear_grad();
        v.set_requires_grad(true);
        self.leaf(v)
    }

    pub fn value(&self, v: Var) -> Result<Ref<'_, Tensor<T>>> {
        self.check(v)?;
        Ok(Ref::map(self.nodes.borrow(), |n| &n[v.idx].value))
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes.borrow()[v.idx].requires_grad)
    }

    /// Applies a primitive and records the result. Non-finite outputs are an
    /// error rather than a silent value.
    pub fn apply(&self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.idx].value).collect();
            let value = op::forward(&op, &xs)?;
            let rg = inputs.iter().any(|v| nodes[v.idx].requires_grad);
            (value, rg)
        };
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().to_string(),
            });
        }
        let (op, inputs) = if requires_grad {
            (op, inputs.iter().map(|v| v.idx).collect())
        } else {
            (Op::Leaf, vec![])
        };
        Ok(self.push(TapeNode {
            op,
            inputs,
            value,
            requires_grad,
        }))
    }

    /// Reverse sweep from a scalar loss. Returns fresh gradients; nothing is
    /// accumulated across calls.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![T::one()]);
        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            let need: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let local = op::backward(&node.op, &xs, &node.value, &g, &need)?;
            for ((&i, gi), needed) in node.inputs.iter().zip(local).zip(need) {
                let (Some(gi), true) = (gi, needed) else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(gi),
                }
            }
            // keep the loss gradient and leaf gradients; interior ones are consumed
            if idx == loss.idx {
                grads[idx] = Some(g);
            }
        }
        let shapes = nodes[..=loss.idx]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            tape: self.id.get(),
            grads,
            shapes,
        })
    }

    // -- convenience wrappers -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn matmul(&self, a: Var, w: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, w])
    }
    pub fn exp(&self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[a])
    }
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn silu(&self, a: Var) -> Result<Var> {
        self.apply(Op::Silu, &[a])
    }
    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn neg(&self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[a])
    }
    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSoftmax { axis }, &[a])
    }
    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[a])
    }
    pub fn sum(&self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Sum { axis }, &[a])
    }
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[a])
    }
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn transpose(&self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Transpose { perm: perm.to_vec() }, &[a])
    }
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Narrow { axis, start, len }, &[a])
    }
    pub fn gather(&self, a: Var, axis: usize, indices: Arc<[usize]>) -> Result<Var> {
        self.apply(Op::Gather { axis, indices }, &[a])
    }
    pub fn scatter_inverse(&self, a: Var, axis: usize, indices: Arc<[usize]>) -> Result<Var> {
        self.apply(Op::ScatterInverse { axis, indices }, &[a])
    }
    pub fn causal_conv1d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Op::CausalConv1d, &[x, w, b])
    }
    pub fn layernorm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { eps: 1e-5 }, &[x, gamma, beta])
    }
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::BroadcastTo { shape: shape.to_vec() }, &[a])
    }
}
