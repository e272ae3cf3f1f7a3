//! Batch normalisation with running statistics.

use super::{acc, BnCtx, Graph, Mode, Node, Op, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Per-channel affine parameters plus the running statistics a layer keeps
/// across batches. In eval mode the forward output is a deterministic
/// function of the input and the running statistics.
#[derive(Debug, Clone)]
pub struct BnState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BnState {
    /// Fresh state: gamma 1, beta 0, running mean 0, running variance 1.
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, momentum: f64, epsilon: f64) -> Self {
        let gamma = params.register(&format!("{name}.gamma"), Tensor::full(vec![channels], 1.0));
        let beta = params.register(&format!("{name}.beta"), Tensor::zeros(vec![channels]));
        BnState {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

impl Graph {
    /// Normalize `x` per channel (axis 1). Train mode uses batch statistics
    /// and folds them into the running averages; eval mode uses the running
    /// statistics unchanged. Train mode needs a batch of at least two.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.node(x).value.shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Dimension(format!(
                "batch_norm expects [N,C,...], got {xs:?}"
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        if c != state.channels() {
            return Err(Error::Dimension(format!(
                "batch_norm state has {} channels, input has {c}",
                state.channels()
            )));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::Batch(format!(
                "batch statistics need at least 2 samples, got {n}"
            )));
        }
        let spatial: usize = xs[2..].iter().product::<usize>().max(1);
        let m = (n * spatial) as f64;
        let xd = self.node(x).value.data();
        let gd = self.node(gamma).value.data().to_vec();
        let bd = self.node(beta).value.data().to_vec();

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            mean[ch] += xd[base + s];
                        }
                    }
                }
                for v in mean.iter_mut() {
                    *v /= m;
                }
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            let d = xd[base + s] - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
                for v in var.iter_mut() {
                    *v /= m;
                }
                for ch in 0..c {
                    state.running_mean[ch] =
                        (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mean[ch];
                    state.running_var[ch] =
                        (1.0 - state.momentum) * state.running_var[ch] + state.momentum * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for s in 0..spatial {
                    let xhat = (xd[base + s] - mean[ch]) * inv_std[ch];
                    out[base + s] = gd[ch] * xhat + bd[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.node(x).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        let ctx = BnCtx { mean, inv_std, train: mode == Mode::Train };
        Ok(self.push(value, rg, Op::BatchNorm { x, gamma, beta, ctx }))
    }
}

pub(super) fn batchnorm_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gy: &[f64],
    x: Var,
    gamma: Var,
    beta: Var,
    ctx: &BnCtx,
) {
    let xs = nodes[x.0].value.shape().to_vec();
    let (n, c) = (xs[0], xs[1]);
    let spatial: usize = xs[2..].iter().product::<usize>().max(1);
    let m = (n * spatial) as f64;
    let xd = nodes[x.0].value.data();
    let gd = nodes[gamma.0].value.data();

    // Per-channel sums shared by all three gradients.
    let mut sum_gy = vec![0.0; c];
    let mut sum_gy_xhat = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for s in 0..spatial {
                let xhat = (xd[base + s] - ctx.mean[ch]) * ctx.inv_std[ch];
                sum_gy[ch] += gy[base + s];
                sum_gy_xhat[ch] += gy[base + s] * xhat;
            }
        }
    }

    acc(nodes, grads, gamma.0, |gg| {
        for ch in 0..c {
            gg[ch] += sum_gy_xhat[ch];
        }
    });
    acc(nodes, grads, beta.0, |gb| {
        for ch in 0..c {
            gb[ch] += sum_gy[ch];
        }
    });
    acc(nodes, grads, x.0, |gx| {
        if ctx.train {
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    for s in 0..spatial {
                        let xhat = (xd[base + s] - ctx.mean[ch]) * ctx.inv_std[ch];
                        gx[base + s] += gd[ch] * ctx.inv_std[ch] / m
                            * (m * gy[base + s] - sum_gy[ch] - xhat * sum_gy_xhat[ch]);
                    }
                }
            }
        } else {
            // Running statistics are constants in eval mode.
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    for s in 0..spatial {
                        gx[base + s] += gd[ch] * ctx.inv_std[ch] * gy[base + s];
                    }
                }
            }
        }
    });
}
