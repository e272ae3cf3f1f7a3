//! Softmax cross-entropy over class logits.

use super::{acc, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// per-row max subtraction. `logits: [N, K]`, one label per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.node(logits).value.shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy expects logits [N,K] with one label per row, got {:?} and {} labels",
                shape,
                labels.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.node(logits).value.data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for r in 0..n {
            let row = &ld[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * k + c] = e;
                denom += e;
            }
            for c in 0..k {
                probs[r * k + c] /= denom;
            }
            total += denom.ln() - (row[labels[r]] - max);
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.node(logits).requires_grad;
        Ok(self.push(value, rg, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }
}

pub(super) fn softmax_ce_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gy: f64,
    logits: Var,
    labels: &[usize],
    probs: &[f64],
) {
    let k = nodes[logits.0].value.shape()[1];
    let n = labels.len() as f64;
    acc(nodes, grads, logits.0, |gl| {
        for (r, &label) in labels.iter().enumerate() {
            for c in 0..k {
                let onehot = if c == label { 1.0 } else { 0.0 };
                gl[r * k + c] += gy * (probs[r * k + c] - onehot) / n;
            }
        }
    });
}
