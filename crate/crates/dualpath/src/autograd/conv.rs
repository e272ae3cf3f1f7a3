//! Convolution, pooling and the embedding-lookup layer.

use super::{acc, Graph, Node, Op, Pad2, PoolKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{idx4, Tensor};

fn out_extent(input: usize, before: usize, after: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = input + before + after;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl Graph {
    /// 2-D cross-correlation of `x: [N, C_in, H, W]` with
    /// `k: [C_out, C_in, kh, kw]`. With stride 1 the output extent along
    /// height is `H + pad.top + pad.bottom - kh + 1` (width analogous).
    pub fn conv2d(&mut self, x: Var, k: Var, pad: Pad2, stride: (usize, usize)) -> Result<Var> {
        let xs = self.node(x).value.shape().to_vec();
        let ks = self.node(k).value.shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::Dimension(format!(
                "conv2d expects input [N,C_in,H,W] and kernel [C_out,C_in,kh,kw], got {xs:?} and {ks:?}"
            )));
        }
        let oh = out_extent(xs[2], pad.top, pad.bottom, ks[2], stride.0);
        let ow = out_extent(xs[3], pad.left, pad.right, ks[3], stride.1);
        let (oh, ow) = match (oh, ow) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::Dimension(format!(
                    "kernel {ks:?} exceeds padded input {xs:?} (pad {pad:?})"
                )))
            }
        };
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let os = [n, cout, oh, ow];
        let xd = self.node(x).value.data();
        let kd = self.node(k).value.data();
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for ci in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            let kv = kd[((co * cin + ci) * kh + i) * kw + j];
                            if kv == 0.0 {
                                continue;
                            }
                            for r in 0..oh {
                                let ih = (r * stride.0 + i) as isize - pad.top as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let xrow = idx4(&xs, b, ci, ih as usize, 0);
                                let orow = idx4(&os, b, co, r, 0);
                                for c in 0..ow {
                                    let iw = (c * stride.1 + j) as isize - pad.left as isize;
                                    if iw < 0 || iw as usize >= w {
                                        continue;
                                    }
                                    out[orow + c] += kv * xd[xrow + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(os.to_vec(), out)?;
        let rg = self.node(x).requires_grad || self.node(k).requires_grad;
        Ok(self.push(value, rg, Op::Conv2d { x, k, pad, stride }))
    }

    /// Non-overlapping max/avg pooling; the window must divide the spatial
    /// extents exactly. Max ties route to the lowest flat index.
    pub fn pool2d(&mut self, x: Var, window: (usize, usize), kind: PoolKind) -> Result<Var> {
        let xs = self.node(x).value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("pool2d expects [N,C,H,W], got {xs:?}")));
        }
        let (n, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (wh, ww) = window;
        if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
            return Err(Error::Dimension(format!(
                "pool window {window:?} does not divide spatial extents of {xs:?}"
            )));
        }
        let (oh, ow) = (h / wh, w / ww);
        let xd = self.node(x).value.data();
        let mut out = vec![0.0; n * ch * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0usize; out.len()];
        }
        let inv = 1.0 / (wh * ww) as f64;
        for b in 0..n {
            for c in 0..ch {
                for r in 0..oh {
                    for q in 0..ow {
                        let o = ((b * ch + c) * oh + r) * ow + q;
                        match kind {
                            PoolKind::Avg => {
                                let mut s = 0.0;
                                for i in 0..wh {
                                    for j in 0..ww {
                                        s += xd[idx4(&xs, b, c, r * wh + i, q * ww + j)];
                                    }
                                }
                                out[o] = s * inv;
                            }
                            PoolKind::Max => {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_at = 0;
                                for i in 0..wh {
                                    for j in 0..ww {
                                        let at = idx4(&xs, b, c, r * wh + i, q * ww + j);
                                        if xd[at] > best {
                                            best = xd[at];
                                            best_at = at;
                                        }
                                    }
                                }
                                out[o] = best;
                                argmax[o] = best_at;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, ch, oh, ow], out)?;
        let rg = self.node(x).requires_grad;
        Ok(self.push(value, rg, Op::Pool2d { x, window, kind, argmax }))
    }

    /// Average over all spatial positions, flattened to `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.node(x).value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Dimension(format!("global_avg_pool expects [N,C,H,W], got {xs:?}")));
        }
        let pooled = self.pool2d(x, (xs[2], xs[3]), PoolKind::Avg)?;
        self.reshape(pooled, vec![xs[0], xs[1]])
    }

    /// First text layer: gather rows of the `[d, E]` embedding table for a
    /// batch of fixed-length index sequences, producing `[N, E, 1, L]`.
    /// `None` slots are zero padding and contribute zero vectors.
    ///
    /// Equivalent to convolving the dense one-hot code with a 1x1xdxE
    /// kernel, which is how the table behaves as a convolution layer.
    pub fn lookup(&mut self, table: Var, slots: &[Option<usize>], batch: usize, len: usize) -> Result<Var> {
        let ts = self.node(table).value.shape().to_vec();
        if ts.len() != 2 {
            return Err(Error::Dimension(format!("lookup table must be [d,E], got {ts:?}")));
        }
        if slots.len() != batch * len {
            return Err(Error::Dimension(format!(
                "expected {batch}x{len} slots, got {}",
                slots.len()
            )));
        }
        let (d, e) = (ts[0], ts[1]);
        if let Some(bad) = slots.iter().flatten().find(|&&ix| ix >= d) {
            return Err(Error::Index(format!("word index {bad} out of range for table with {d} rows")));
        }
        let td = self.node(table).value.data();
        let mut out = vec![0.0; batch * e * len];
        for b in 0..batch {
            for (l, slot) in slots[b * len..(b + 1) * len].iter().enumerate() {
                if let Some(ix) = slot {
                    let row = &td[ix * e..(ix + 1) * e];
                    for (ei, v) in row.iter().enumerate() {
                        out[(b * e + ei) * len + l] = *v;
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, e, 1, len], out)?;
        let rg = self.node(table).requires_grad;
        Ok(self.push(value, rg, Op::Lookup { table, slots: slots.to_vec() }))
    }
}

pub(super) fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gy: &[f64],
    out: usize,
    x: Var,
    k: Var,
    pad: Pad2,
    stride: (usize, usize),
) {
    let xs = nodes[x.0].value.shape().to_vec();
    let ks = nodes[k.0].value.shape().to_vec();
    let os = nodes[out].value.shape().to_vec();
    let (cin, h, w) = (xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (n, oh, ow) = (os[0], os[2], os[3]);
    let xd = nodes[x.0].value.data();
    let kd = nodes[k.0].value.data();

    acc(nodes, grads, x.0, |gx| {
        for b in 0..n {
            for co in 0..cout {
                for ci in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            let kv = kd[((co * cin + ci) * kh + i) * kw + j];
                            if kv == 0.0 {
                                continue;
                            }
                            for r in 0..oh {
                                let ih = (r * stride.0 + i) as isize - pad.top as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let xrow = idx4(&xs, b, ci, ih as usize, 0);
                                let orow = idx4(&os, b, co, r, 0);
                                for c in 0..ow {
                                    let iw = (c * stride.1 + j) as isize - pad.left as isize;
                                    if iw < 0 || iw as usize >= w {
                                        continue;
                                    }
                                    gx[xrow + iw as usize] += kv * gy[orow + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    acc(nodes, grads, k.0, |gk| {
        for b in 0..n {
            for co in 0..cout {
                for ci in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            let mut s = 0.0;
                            for r in 0..oh {
                                let ih = (r * stride.0 + i) as isize - pad.top as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                let xrow = idx4(&xs, b, ci, ih as usize, 0);
                                let orow = idx4(&os, b, co, r, 0);
                                for c in 0..ow {
                                    let iw = (c * stride.1 + j) as isize - pad.left as isize;
                                    if iw < 0 || iw as usize >= w {
                                        continue;
                                    }
                                    s += gy[orow + c] * xd[xrow + iw as usize];
                                }
                            }
                            gk[((co * cin + ci) * kh + i) * kw + j] += s;
                        }
                    }
                }
            }
        }
    });
}

pub(super) fn pool2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gy: &[f64],
    x: Var,
    window: (usize, usize),
    kind: PoolKind,
    argmax: &[usize],
) {
    let xs = nodes[x.0].value.shape().to_vec();
    let (n, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (wh, ww) = window;
    let (oh, ow) = (h / wh, w / ww);
    acc(nodes, grads, x.0, |gx| match kind {
        PoolKind::Max => {
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += gy[o];
            }
        }
        PoolKind::Avg => {
            let inv = 1.0 / (wh * ww) as f64;
            for b in 0..n {
                for c in 0..ch {
                    for r in 0..oh {
                        for q in 0..ow {
                            let g = gy[((b * ch + c) * oh + r) * ow + q] * inv;
                            for i in 0..wh {
                                for j in 0..ww {
                                    gx[idx4(&xs, b, c, r * wh + i, q * ww + j)] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(super) fn lookup_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    gy: &[f64],
    out: usize,
    table: Var,
    slots: &[Option<usize>],
) {
    let os = nodes[out].value.shape().to_vec();
    let (e, len) = (os[1], os[3]);
    acc(nodes, grads, table.0, |gt| {
        for (flat, slot) in slots.iter().enumerate() {
            if let Some(ix) = slot {
                let (b, l) = (flat / len, flat % len);
                for ei in 0..e {
                    gt[ix * e + ei] += gy[(b * e + ei) * len + l];
                }
            }
        }
    });
}
