//! Elementwise, affine and reduction operations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{acc, Graph, Mode, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let xn = self.node(x);
        let data = xn.value.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(xn.value.shape().to_vec(), data).expect("relu preserves shape");
        let rg = xn.requires_grad;
        self.push(value, rg, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.zip_elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.zip_elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.zip_elementwise(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// Elementwise `mul * x + add`. The constant shift contributes no
    /// gradient, so only the slope is recorded.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let xn = self.node(x);
        let data = xn.value.data().iter().map(|v| mul * v + add).collect();
        let value = Tensor::new(xn.value.shape().to_vec(), data).expect("affine preserves shape");
        let rg = xn.requires_grad;
        self.push(value, rg, Op::Affine { x, mul })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let xn = self.node(x);
        let s: f64 = xn.value.data().iter().sum();
        let rg = xn.requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xn = self.node(x);
        let s: f64 = xn.value.data().iter().sum();
        let n = xn.value.numel() as f64;
        let rg = xn.requires_grad;
        self.push(Tensor::scalar(s / n), rg, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xn = self.node(x);
        let value = xn.value.clone().reshape(shape)?;
        let rg = xn.requires_grad;
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Affine map `x @ w + b` with `x: [N, D_in]`, `w: [D_in, D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.node(x).value.shape(), self.node(w).value.shape());
        let bs = self.node(b).value.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::Dimension(format!(
                "linear expects [N,D_in] @ [D_in,D_out] + [D_out], got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let value = matmul_value(&self.node(x).value, &self.node(w).value, Some(&self.node(b).value));
        let rg = self.node(x).requires_grad
            || self.node(w).requires_grad
            || self.node(b).requires_grad;
        Ok(self.push(value, rg, Op::Linear { x, w, b }))
    }

    /// Bias-free matrix product `x @ w`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.node(x).value.shape(), self.node(w).value.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Dimension(format!(
                "matmul expects [N,D] @ [D,K], got {xs:?}, {ws:?}"
            )));
        }
        let value = matmul_value(&self.node(x).value, &self.node(w).value, None);
        let rg = self.node(x).requires_grad || self.node(w).requires_grad;
        Ok(self.push(value, rg, Op::Matmul { x, w }))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`, so the
    /// expectation matches eval mode, where the input passes through as is.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xn = self.node(x);
        let mask: Vec<f64> = (0..xn.value.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xn.value.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xn.value.shape().to_vec(), data).expect("dropout preserves shape");
        let rg = xn.requires_grad;
        Ok(self.push(value, rg, Op::Dropout { x, mask }))
    }

    /// L2-normalize each row of `x: [N, D]`. Rows with norm below 1e-12 are
    /// a numeric error since their direction is undefined.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xn = self.node(x);
        let shape = xn.value.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "normalize_rows expects [N,D], got {shape:?}"
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        let xd = xn.value.data();
        let mut norms = Vec::with_capacity(n);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::Numeric(format!(
                    "cannot normalize row {r}: norm {norm:e} is below 1e-12"
                )));
            }
            for c in 0..d {
                data[r * d + c] = row[c] / norm;
            }
            norms.push(norm);
        }
        let value = Tensor::new(shape, data)?;
        let rg = xn.requires_grad;
        Ok(self.push(value, rg, Op::NormalizeRows { x, norms }))
    }

    /// Row-wise dot product of two `[N, D]` tensors, yielding `[N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.node(a).value.shape(), self.node(b).value.shape());
        if as_.len() != 2 || as_ != bs {
            return Err(Error::Dimension(format!(
                "row_dot expects matching [N,D] tensors, got {as_:?}, {bs:?}"
            )));
        }
        let (n, d) = (as_[0], as_[1]);
        let av = self.node(a).value.data();
        let bv = self.node(b).value.data();
        let data: Vec<f64> = (0..n)
            .map(|r| {
                av[r * d..(r + 1) * d]
                    .iter()
                    .zip(&bv[r * d..(r + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![n], data)?;
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(value, rg, Op::RowDot { a, b }))
    }

    /// Gather rows of `x: [N, D]` by index, yielding `[idx.len(), D]`.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.node(x).value.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension(format!("select_rows expects [N,D], got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(bad) = idx.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("row index {bad} out of range for {n} rows")));
        }
        let xd = self.node(x).value.data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            data.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.node(x).requires_grad;
        Ok(self.push(value, rg, Op::SelectRows { x, idx: idx.to_vec() }))
    }

    fn zip_elementwise(
        &self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (an, bn) = (self.node(a), self.node(b));
        if an.value.shape() != bn.value.shape() {
            return Err(Error::Dimension(format!(
                "{what} requires equal shapes, got {:?} and {:?}",
                an.value.shape(),
                bn.value.shape()
            )));
        }
        let data = an
            .value
            .data()
            .iter()
            .zip(bn.value.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(an.value.shape().to_vec(), data)?;
        Ok((value, an.requires_grad || bn.requires_grad))
    }
}

fn matmul_value(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[1];
    let (xd, wd) = (x.data(), w.data());
    let mut out = match b {
        Some(bias) => {
            let mut v = Vec::with_capacity(n * dout);
            for _ in 0..n {
                v.extend_from_slice(bias.data());
            }
            v
        }
        None => vec![0.0; n * dout],
    };
    for r in 0..n {
        for i in 0..din {
            let xv = xd[r * din + i];
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[i * dout..(i + 1) * dout];
            let orow = &mut out[r * dout..(r + 1) * dout];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    Tensor::new(vec![n, dout], out).expect("matmul output shape")
}

pub(super) fn linear_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gy: &[f64],
    x: Var,
    w: Var,
    b: Option<Var>,
) {
    let (n, din) = {
        let s = nodes[x.0].value.shape();
        (s[0], s[1])
    };
    let dout = nodes[w.0].value.shape()[1];
    let xd = nodes[x.0].value.data();
    let wd = nodes[w.0].value.data();

    acc(nodes, grads, x.0, |gx| {
        for r in 0..n {
            let grow = &gy[r * dout..(r + 1) * dout];
            for i in 0..din {
                let wrow = &wd[i * dout..(i + 1) * dout];
                gx[r * din + i] += grow.iter().zip(wrow).map(|(g, wv)| g * wv).sum::<f64>();
            }
        }
    });
    acc(nodes, grads, w.0, |gw| {
        for r in 0..n {
            let grow = &gy[r * dout..(r + 1) * dout];
            for i in 0..din {
                let xv = xd[r * din + i];
                if xv == 0.0 {
                    continue;
                }
                let gwrow = &mut gw[i * dout..(i + 1) * dout];
                for (gwv, g) in gwrow.iter_mut().zip(grow) {
                    *gwv += xv * g;
                }
            }
        }
    });
    if let Some(b) = b {
        acc(nodes, grads, b.0, |gb| {
            for r in 0..n {
                for o in 0..dout {
                    gb[o] += gy[r * dout + o];
                }
            }
        });
    }
}

pub(super) fn normalize_rows_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gy: &[f64],
    out: usize,
    x: Var,
    norms: &[f64],
) {
    let d = nodes[x.0].value.shape()[1];
    let yd = nodes[out].value.data();
    acc(nodes, grads, x.0, |gx| {
        for (r, norm) in norms.iter().enumerate() {
            let yrow = &yd[r * d..(r + 1) * d];
            let grow = &gy[r * d..(r + 1) * d];
            let proj: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
            for c in 0..d {
                gx[r * d + c] += (grow[c] - yrow[c] * proj) / norm;
            }
        }
    });
}

pub(super) fn row_dot_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gy: &[f64],
    a: Var,
    b: Var,
) {
    let d = nodes[a.0].value.shape()[1];
    let av = nodes[a.0].value.data();
    let bv = nodes[b.0].value.data();
    acc(nodes, grads, a.0, |ga| {
        for (r, g) in gy.iter().enumerate() {
            for c in 0..d {
                ga[r * d + c] += g * bv[r * d + c];
            }
        }
    });
    acc(nodes, grads, b.0, |gb| {
        for (r, g) in gy.iter().enumerate() {
            for c in 0..d {
                gb[r * d + c] += g * av[r * d + c];
            }
        }
    });
}
