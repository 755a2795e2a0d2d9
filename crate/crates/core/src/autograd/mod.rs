//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation appends one record
//! holding its output value, the indices of its inputs and whatever the
//! backward rule needs. Because inputs always exist before their consumers,
//! record order is a topological order and [`Graph::backward`] is a single
//! reverse sweep.
//!
//! Precision is a property of the whole graph: `Graph<f32>` for training,
//! `Graph<f64>` for gradient verification.

mod conv;
mod gradcheck;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub use conv::{conv2d_reference, ConvScratch};
pub use gradcheck::{finite_difference_grad, relative_error, DEFAULT_FD_STEP};
pub use ops::{BatchNormMode, RunningStats, BCE_CLAMP, BN_EPSILON, BN_MOMENTUM};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Concat,
    MaxPool2,
    Upsample2,
    BatchNorm,
    Relu,
    Sigmoid,
    Add,
    Mul,
    ScaleChannels,
    Sum,
    Bce,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Concat => "concat",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::Upsample2 => "upsample2",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::ScaleChannels => "scale_channels",
            OpKind::Sum => "sum",
            OpKind::Bce => "bce",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        ALL_OPS.iter().copied().find(|op| op.name() == name)
    }
}

const ALL_OPS: [OpKind; 13] = [
    OpKind::Leaf,
    OpKind::Conv2d,
    OpKind::Concat,
    OpKind::MaxPool2,
    OpKind::Upsample2,
    OpKind::BatchNorm,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Add,
    OpKind::Mul,
    OpKind::ScaleChannels,
    OpKind::Sum,
    OpKind::Bce,
];

/// Saved state for the backward rule of one record.
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    ScaleChannels {
        x: usize,
        alpha: usize,
    },
    Sum {
        input: usize,
    },
    Bce {
        probs: usize,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Concat { .. } => OpKind::Concat,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2 { .. } => OpKind::Upsample2,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::Sum { .. } => OpKind::Sum,
            Op::Bce { .. } => OpKind::Bce,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => vec![*input, *kernel, *bias],
            Op::Concat { parts } => parts.clone(),
            Op::MaxPool2 { input, .. }
            | Op::Upsample2 { input }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Sum { input } => vec![*input],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ScaleChannels { x, alpha } => vec![*x, *alpha],
            Op::Bce { probs, .. } => vec![*probs],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Public view of one tape record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub op: OpKind,
    pub inputs: Vec<usize>,
    pub output: usize,
    pub output_shape: Vec<usize>,
}

pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    scratch: ConvScratch<T>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            scratch: ConvScratch::default(),
            fault: None,
        }
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Leaf that does not require a gradient (input data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that requires a gradient (a parameter or probed input).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[self.index_of(var).expect("var belongs to this graph")].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[self.index_of(var).expect("var belongs to this graph")].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to
    /// `var`, if `var` requires a gradient and the root depends on it.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        let i = self.index_of(var).ok()?;
        self.grads.get(i).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Tensor<T>> {
        let i = self.index_of(var).ok()?;
        self.grads.get_mut(i).and_then(Option::take)
    }

    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| Record {
                op: n.op.kind(),
                inputs: n.op.inputs(),
                output: i,
                output_shape: n.value.shape().to_vec(),
            })
            .collect()
    }

    /// Makes the backward rule of every `op` record scale its upstream
    /// gradient by 1.5. Only for exercising the gradient checker.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: OpKind) {
        self.fault = Some(op);
    }

    fn index_of(&self, var: Var) -> Result<usize> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "tensor {} is not recorded on this tape",
                var.index
            )));
        }
        Ok(var.index)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    /// Appends a computed record after checking its value is finite.
    fn record(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        let kind = op.kind();
        value.check_finite(kind.name())?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    /// Computes gradients of the scalar `loss` with respect to every recorded
    /// value that requires one. Gradients from earlier calls are discarded;
    /// within one call contributions from fan-out are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.index_of(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        self.grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));
        for i in (0..=root).rev() {
            let Some(mut upstream) = self.grads[i].take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                if self.fault == Some(self.nodes[i].op.kind()) {
                    let bump = T::from_f64(1.5);
                    upstream.data_mut().iter_mut().for_each(|g| *g *= bump);
                }
                ops::backward_rule(
                    &self.nodes,
                    &mut self.grads,
                    &mut self.scratch,
                    i,
                    &upstream,
                )?;
            }
            self.grads[i] = Some(upstream);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                g.check_finite(&format!(
                    "gradient of {} record {i}",
                    self.nodes[i].op.kind().name()
                ))?;
            }
        }
        Ok(())
    }
}

/// Zero-initialized gradient buffer for record `index`.
fn grad_slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    index: usize,
) -> Option<&'a mut [T]> {
    if !nodes[index].requires_grad {
        return None;
    }
    let slot = &mut grads[index];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[index].value.shape()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

/// `(batch, h, w, c)` of a rank-3 or rank-4 image tensor.
pub(crate) fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::dim(format!(
            "expected an (h,w,c) or (b,h,w,c) tensor, got {shape:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(relu(x)) + sum(x ⊙ x): two consumers of x.
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[-1.0, 2.0, 3.0]));
        let r = g.relu(x).unwrap();
        let a = g.sum(r).unwrap();
        let sq = g.mul(x, x).unwrap();
        let b = g.sum(sq).unwrap();
        let loss = g.add(a, b).unwrap();
        g.backward(loss).unwrap();
        // relu branch: [0,1,1]; square branch: [-2,4,6]
        assert_eq!(g.grad(x).unwrap().data(), &[-2.0, 5.0, 7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
        let mut other = Graph::<f64>::new();
        let y = other.variable(t(&[1], &[1.0]));
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
        assert!(matches!(g.relu(y), Err(Error::Graph(_))));
    }

    #[test]
    fn records_are_topological_and_visited_once() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.max_pool2(x).unwrap();
        let u = g.upsample2(p).unwrap();
        let s = g.sum(u).unwrap();
        let recs = g.records();
        assert_eq!(recs.len(), 4);
        for r in &recs {
            assert!(r.inputs.iter().all(|&i| i < r.output));
        }
        assert_eq!(
            recs.iter().map(|r| r.op).collect::<Vec<_>>(),
            vec![OpKind::Leaf, OpKind::MaxPool2, OpKind::Upsample2, OpKind::Sum]
        );
        g.backward(s).unwrap();
        // Only the argmax cell receives the 4 replicated gradients.
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.variable(t(&[2], &[3.0, 4.0]));
        let m = g.mul(c, x).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for op in ALL_OPS {
            assert_eq!(OpKind::parse(op.name()), Some(op));
        }
    }
}
