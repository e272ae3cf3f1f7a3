//! Reverse-mode differentiation on a recorded tape.
//!
//! A [`Graph`] is a Wengert list: forward builders append one [`Node`] per
//! operation (eagerly computing its value) and [`Graph::backward`] walks the
//! tape in reverse, accumulating gradients into every reachable parameter.
//! The layer set is exactly what the dual-path model needs: convolution,
//! pooling, ReLU, batch normalisation, fully-connected, dropout, embedding
//! lookup, softmax cross-entropy and a handful of elementwise/reduction ops
//! for the ranking objective.
//!
//! A graph is single-threaded during forward/backward; distinct graphs share
//! no state and may run in parallel.

mod batchnorm;
mod conv;
pub mod gradcheck;
mod loss;
mod ops;

pub use batchnorm::BnState;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Train/eval switch threaded through layers with mode-dependent behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-edge spatial padding. Asymmetric so the 1x2 text filter can pad
/// zero columns on the left and one on the right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad2 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2 {
    pub fn none() -> Self {
        Pad2 { top: 0, bottom: 0, left: 0, right: 0 }
    }

    /// Same amount on both edges of each axis.
    pub fn symmetric(h: usize, w: usize) -> Self {
        Pad2 { top: h, bottom: h, left: w, right: w }
    }

    /// Length padding for the 1x2 text filter: none left, one right.
    pub fn length_right() -> Self {
        Pad2 { top: 0, bottom: 0, left: 0, right: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Saved batch-norm context for the backward pass.
#[derive(Debug)]
pub(crate) struct BnCtx {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, mul: f64 },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Matmul { x: Var, w: Var },
    Conv2d { x: Var, k: Var, pad: Pad2, stride: (usize, usize) },
    Pool2d { x: Var, window: (usize, usize), kind: PoolKind, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, ctx: BnCtx },
    Dropout { x: Var, mask: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Lookup { table: Var, slots: Vec<Option<usize>> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    RowDot { a: Var, b: Var },
    SelectRows { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_leaves: Vec<(usize, ParamId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Leaf that collects a gradient (for probing and gradient checks).
    pub fn input_grad(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf holding a copy of a parameter's current value. After
    /// [`Graph::backward`] the parameter's gradient slot receives this
    /// leaf's gradient. Frozen parameters join as constants.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let p = params.get(id);
        let mut value = p.value.clone();
        value.zero_grad();
        value.set_requires_grad(false);
        let v = self.push(value, !p.frozen, Op::Leaf);
        self.param_leaves.push((v.0, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient computed for a node by the most recent backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse pass from a scalar root. Gradients of parameter leaves are
    /// accumulated into `params`, which must be the set the graph's
    /// [`Graph::param`] calls drew from; calling twice without
    /// [`ParamSet::zero_grads`] sums the two contributions.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        self.backward_values(loss)?;
        for &(node_idx, pid) in &self.param_leaves {
            if let Some(g) = &self.grads[node_idx] {
                params.get_mut(pid).value.accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Reverse pass that only fills node gradients (readable through
    /// [`Graph::grad`]) without touching any parameter set.
    pub fn backward_values(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::State(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            let nodes = &self.nodes;
            let grads = &mut self.grads;
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(nodes, grads, x.0, |gx| {
                        for (k, g) in gy.iter().enumerate() {
                            if xv[k] > 0.0 {
                                gx[k] += g;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(nodes, grads, a.0, |ga| add_into(ga, &gy, 1.0));
                    acc(nodes, grads, b.0, |gb| add_into(gb, &gy, 1.0));
                }
                Op::Sub(a, b) => {
                    acc(nodes, grads, a.0, |ga| add_into(ga, &gy, 1.0));
                    acc(nodes, grads, b.0, |gb| add_into(gb, &gy, -1.0));
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(nodes, grads, a.0, |ga| {
                        for (k, g) in gy.iter().enumerate() {
                            ga[k] += g * bv[k];
                        }
                    });
                    acc(nodes, grads, b.0, |gb| {
                        for (k, g) in gy.iter().enumerate() {
                            gb[k] += g * av[k];
                        }
                    });
                }
                Op::Affine { x, mul } => {
                    let m = *mul;
                    acc(nodes, grads, x.0, |gx| add_into(gx, &gy, m));
                }
                Op::Sum(x) => {
                    let g = gy[0];
                    acc(nodes, grads, x.0, |gx| {
                        for v in gx.iter_mut() {
                            *v += g;
                        }
                    });
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.numel() as f64;
                    let g = gy[0] / n;
                    acc(nodes, grads, x.0, |gx| {
                        for v in gx.iter_mut() {
                            *v += g;
                        }
                    });
                }
                Op::Reshape(x) => {
                    acc(nodes, grads, x.0, |gx| add_into(gx, &gy, 1.0));
                }
                Op::Linear { x, w, b } => {
                    ops::linear_backward(nodes, grads, &gy, *x, *w, Some(*b));
                }
                Op::Matmul { x, w } => {
                    ops::linear_backward(nodes, grads, &gy, *x, *w, None);
                }
                Op::Conv2d { x, k, pad, stride } => {
                    conv::conv2d_backward(nodes, grads, &gy, i, *x, *k, *pad, *stride);
                }
                Op::Pool2d { x, window, kind, argmax } => {
                    conv::pool2d_backward(nodes, grads, &gy, *x, *window, *kind, argmax);
                }
                Op::BatchNorm { x, gamma, beta, ctx } => {
                    batchnorm::batchnorm_backward(nodes, grads, &gy, *x, *gamma, *beta, ctx);
                }
                Op::Dropout { x, mask } => {
                    acc(nodes, grads, x.0, |gx| {
                        for (k, g) in gy.iter().enumerate() {
                            gx[k] += g * mask[k];
                        }
                    });
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    loss::softmax_ce_backward(nodes, grads, gy[0], *logits, labels, probs);
                }
                Op::Lookup { table, slots } => {
                    conv::lookup_backward(nodes, grads, &gy, i, *table, slots);
                }
                Op::NormalizeRows { x, norms } => {
                    ops::normalize_rows_backward(nodes, grads, &gy, i, *x, norms);
                }
                Op::RowDot { a, b } => {
                    ops::row_dot_backward(nodes, grads, &gy, *a, *b);
                }
                Op::SelectRows { x, idx } => {
                    let cols = nodes[i].value.numel() / idx.len().max(1);
                    acc(nodes, grads, x.0, |gx| {
                        for (r, &src) in idx.iter().enumerate() {
                            for c in 0..cols {
                                gx[src * cols + c] += gy[r * cols + c];
                            }
                        }
                    });
                }
            }
            self.grads[i] = Some(gy);
        }
        Ok(())
    }
}

/// Accumulate into node `j`'s gradient buffer if it participates in
/// differentiation, allocating the buffer on first touch.
pub(crate) fn acc(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    j: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[j].requires_grad {
        return;
    }
    let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
    f(buf);
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
