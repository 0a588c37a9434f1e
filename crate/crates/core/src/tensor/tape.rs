//! Define-by-run tape. Every operation appends a node holding its output value and
//! the inputs it was computed from; `backward` replays the nodes in reverse.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use super::ops::{self, Axis, GatePattern, Op, PoolMode};
use super::{numel, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Hash of every branch taken by a piecewise op: the sign of each ReLU
    /// input and each max-pool argmax. Two evaluations with equal signatures
    /// lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { x } => {
                    i.hash(&mut h);
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::PoolGlobal {
                    argmax: Some(a), ..
                }
                | Op::PoolChannels {
                    argmax: Some(a), ..
                } => {
                    i.hash(&mut h);
                    a.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let node = self.nodes.len();
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// `x` flattened per sample to `C*H*W` features; `w` is `(out, in, 1, 1)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(out, Op::Linear { x, w, b })
    }

    /// Batched matrix product over the trailing two axes, one matrix per `(n, c)`.
    /// An operand whose leading axes are `(1, 1)` is shared across every group.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b), trans_a, trans_b)?;
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
        )
    }

    pub fn pool_global(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (out, argmax) = ops::pool_global(self.value(x), mode)?;
        self.push(out, Op::PoolGlobal { x, argmax })
    }

    /// Averages over `axis` (`Width` gives `(N,C,H,1)`, `Height` gives `(N,C,1,W)`).
    pub fn pool_directional(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let out = ops::pool_directional(self.value(x), axis)?;
        self.push(out, Op::PoolDirectional { x, axis })
    }

    pub fn pool_across_channels(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let (out, argmax) = ops::pool_across_channels(self.value(x), mode)?;
        self.push(out, Op::PoolChannels { x, argmax })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ops::map(self.value(x), ops::sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::map(self.value(x), |v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add { a, b })
    }

    /// Elementwise product. `b` may instead be a gate whose shape matches one of
    /// the [`GatePattern`]s, in which case its singleton axes are broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let pattern = GatePattern::detect(self.shape(a), self.shape(b))?;
        let out = ops::mul(self.value(a), self.value(b), pattern);
        self.push(out, Op::Mul { a, b, pattern })
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values, axis)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice(self.value(x), axis, start, len)?;
        self.push(out, Op::Slice { x, axis, start })
    }

    /// Inverse of [`Tape::concat`]: consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: Axis, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self.shape(x)[axis.dim()];
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not add up to extent {extent}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape { x })
    }

    /// Nearest-neighbour upsampling by two in both spatial axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(x));
        self.push(out, Op::Upsample2x { x })
    }

    /// Softmax along the last axis. `mask`, when given, has `H*W` entries and
    /// excludes positions (weight exactly 0) in every `(n, c)` group.
    pub fn softmax_last(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let out = ops::softmax_last(self.value(x), mask.as_deref().map(|m| m.as_slice()))?;
        self.push(out, Op::Softmax { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let out = Tensor::scalar(self.value(x).sum() / n);
        self.push(out, Op::Mean { x })
    }

    /// `w_bce * BCE + w_dice * Dice` with Dice averaged per sample, as a scalar.
    pub fn seg_loss(&mut self, prob: Var, target: Var, w_bce: f64, w_dice: f64) -> Result<Var> {
        let value = ops::seg_loss_value(self.value(prob), self.value(target), w_bce, w_dice)?;
        self.push(
            Tensor::scalar(value),
            Op::SegLoss {
                prob,
                target,
                w_bce,
                w_dice,
            },
        )
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be (1,1,1,1), got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in ops::backward(self, Var(i), &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if contribution.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: node.op.name(),
                        node: i,
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        // Requires-grad leaves that the loss never reached get explicit zeros.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if slot.is_none() && node.requires_grad && matches!(node.op, Op::Leaf) {
                *slot = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a requires-grad leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.shape())
}

pub(crate) fn check_same(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    debug_assert_eq!(numel(a), numel(b));
    Ok(())
}
