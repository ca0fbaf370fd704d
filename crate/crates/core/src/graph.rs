//! A small tape-based reverse-mode autodiff engine.
//!
//! Every op appends a node holding its value; [`Graph::backward`] walks the tape
//! in reverse. Layouts are NCHW for images and `[rows, features]` for vectors.
//! Gradients are only propagated into nodes that (transitively) depend on a
//! trainable leaf, so frozen weights cost no weight-gradient work.

use crate::tensor::{gemm, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Dense { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Conv2d { x: Var, w: Var, cols: Vec<Vec<f64>> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    GroupNorm { x: Var, groups: usize, inv_std: Vec<f64> },
    Silu(Var),
    Relu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Gather { table: Var, rows: Vec<usize> },
    MeanRows(Var),
    GlobalAvgPool(Var),
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    Mse { pred: Var, target: Tensor },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Splits a shape into (outer, channels, inner) around axis 1.
fn ch_split(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Applies `w: [D, K]` along axis 1 of `x: [N, K, ...]`, giving `[N, D, ...]`.
    pub fn dense(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, k, inner) = ch_split(vx.shape());
        assert_eq!(vw.shape().len(), 2, "dense weight must be 2-D");
        assert_eq!(vw.shape()[1], k, "dense input width mismatch");
        let d = vw.shape()[0];
        let mut out = vec![0.0; n * d * inner];
        if inner == 1 {
            gemm(n, k, d, vx.data(), false, vw.data(), true, &mut out, 0.0);
        } else {
            for i in 0..n {
                gemm(
                    d,
                    k,
                    inner,
                    vw.data(),
                    false,
                    &vx.data()[i * k * inner..(i + 1) * k * inner],
                    false,
                    &mut out[i * d * inner..(i + 1) * d * inner],
                    0.0,
                );
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[1] = d;
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::from_parts(shape, out), Op::Dense { x, w }, ng)
    }

    /// Adds `b: [C]` along axis 1.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let (n, c, inner) = ch_split(vx.shape());
        assert_eq!(vb.numel(), c, "bias width mismatch");
        let mut out = vx.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let bv = vb.data()[ch];
                let base = (i * c + ch) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(Tensor::from_parts(vx.shape().to_vec(), out), Op::AddBias { x, b }, ng)
    }

    /// Same-size convolution: odd square kernel `w: [O, C, k, k]`, zero padding `k/2`, stride 1.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let ws = vw.shape();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], xs[1], "conv channel mismatch");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = vec![0.0; n * o * hw];
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let col = im2col(&vx.data()[i * c * hw..(i + 1) * c * hw], c, h, wd, k);
            gemm(o, ckk, hw, vw.data(), false, &col, false, &mut out[i * o * hw..(i + 1) * o * hw], 0.0);
            cols.push(col);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::from_parts(vec![n, o, h, wd], out), Op::Conv2d { x, w, cols }, ng)
    }

    /// `x · (1 + scale) + shift` with `scale, shift: [N, C]` broadcast over the trailing axes.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (vx, vs, vb) = (self.value(x), self.value(scale), self.value(shift));
        let (n, c, inner) = ch_split(vx.shape());
        assert_eq!(vs.shape(), [n, c]);
        assert_eq!(vb.shape(), [n, c]);
        let mut out = vec![0.0; vx.numel()];
        for nc in 0..n * c {
            let (s, b) = (1.0 + vs.data()[nc], vb.data()[nc]);
            let base = nc * inner;
            for j in base..base + inner {
                out[j] = vx.data()[j] * s + b;
            }
        }
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(Tensor::from_parts(vx.shape().to_vec(), out), Op::ChannelAffine { x, scale, shift }, ng)
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Var {
        let vx = self.value(x);
        let (n, c, inner) = ch_split(vx.shape());
        assert!(groups >= 1 && c % groups == 0, "channels {c} not divisible by {groups} groups");
        let glen = (c / groups) * inner;
        let mut out = vec![0.0; vx.numel()];
        let mut inv_std = Vec::with_capacity(n * groups);
        for (src, dst) in vx.data().chunks(glen).zip(out.chunks_mut(glen)) {
            let mean = src.iter().sum::<f64>() / glen as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vx.shape().to_vec(), out), Op::GroupNorm { x, groups, inv_std }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// 2×2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; nc * oh * ow];
        let d = vx.data();
        for p in 0..nc {
            let src = &d[p * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * oh + y) * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![s[0], s[1], oh, ow], out), Op::AvgPool2(x), ng)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; nc * oh * ow];
        let d = vx.data();
        for p in 0..nc {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = d[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![s[0], s[1], oh, ow], out), Op::Upsample2(x), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            assert!(
                s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat shape mismatch"
            );
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    /// Selects rows of `table: [V, D]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let vt = self.value(table);
        let d = vt.shape()[1];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&vt.data()[r * d..(r + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(Tensor::from_parts(vec![rows.len(), d], out), Op::Gather { table, rows: rows.to_vec() }, ng)
    }

    /// `[L, D] -> [1, D]` mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (l, d) = (vx.shape()[0], vx.shape()[1]);
        let mut out = vec![0.0; d];
        for row in vx.data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= l as f64);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![1, d], out), Op::MeanRows(x), ng)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, inner) = ch_split(vx.shape());
        let out = vx.data().chunks(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x), ng)
    }

    /// Space-to-depth: `[N, C, H, W] -> [N, C·f², H/f, W/f]`.
    pub fn pixel_unshuffle(&mut self, x: Var, f: usize) -> Var {
        let vx = self.value(x);
        let out = unshuffle(vx, f);
        let ng = self.ng(x);
        self.push(out, Op::PixelUnshuffle(x, f), ng)
    }

    /// Depth-to-space, the inverse of [`Graph::pixel_unshuffle`].
    pub fn pixel_shuffle(&mut self, x: Var, f: usize) -> Var {
        let vx = self.value(x);
        let out = shuffle(vx, f);
        let ng = self.ng(x);
        self.push(out, Op::PixelShuffle(x, f), ng)
    }

    /// Mean squared error against a constant target; returns a scalar `[1]`.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "mse shape mismatch");
        let sum: f64 = vp.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::from_parts(vec![1], vec![sum / vp.numel() as f64]);
        let ng = self.ng(pred);
        self.push(out, Op::Mse { pred, target }, ng)
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let vl = self.value(logits);
        let (n, k) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(labels.len(), n);
        let probs = softmax_rows(vl.data(), k);
        let loss = labels.iter().enumerate().map(|(i, &y)| -probs[i * k + y].max(1e-300).ln()).sum::<f64>() / n as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            ng,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_scaled(&g, 1.0),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, Tensor::from_parts(va.shape().to_vec(), d));
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, Tensor::from_parts(vb.shape().to_vec(), d));
                }
            }
            Op::Scale(a, s) => self.accum(grads, *a, g.scale(*s)),
            Op::Dense { x, w } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, k, inner) = ch_split(vx.shape());
                let d = vw.shape()[0];
                if self.ng(*x) {
                    let mut dx = vec![0.0; vx.numel()];
                    if inner == 1 {
                        gemm(n, d, k, gd, false, vw.data(), false, &mut dx, 0.0);
                    } else {
                        for i in 0..n {
                            gemm(
                                k,
                                d,
                                inner,
                                vw.data(),
                                true,
                                &gd[i * d * inner..(i + 1) * d * inner],
                                false,
                                &mut dx[i * k * inner..(i + 1) * k * inner],
                                0.0,
                            );
                        }
                    }
                    self.accum(grads, *x, Tensor::from_parts(vx.shape().to_vec(), dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; d * k];
                    if inner == 1 {
                        gemm(d, n, k, gd, true, vx.data(), false, &mut dw, 0.0);
                    } else {
                        for i in 0..n {
                            gemm(
                                d,
                                inner,
                                k,
                                &gd[i * d * inner..(i + 1) * d * inner],
                                false,
                                &vx.data()[i * k * inner..(i + 1) * k * inner],
                                true,
                                &mut dw,
                                1.0,
                            );
                        }
                    }
                    self.accum(grads, *w, Tensor::from_parts(vec![d, k], dw));
                }
            }
            Op::AddBias { x, b } => {
                self.accum(grads, *x, g.clone());
                if self.ng(*b) {
                    let (n, c, inner) = ch_split(g.shape());
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            let base = (i * c + ch) * inner;
                            *acc += gd[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accum(grads, *b, Tensor::from_parts(shape, db));
                }
            }
            Op::Conv2d { x, w, cols } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let xs = vx.shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (vw.shape()[0], vw.shape()[2]);
                let hw = h * wd;
                let ckk = c * k * k;
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * ckk];
                    for (i, col) in cols.iter().enumerate() {
                        gemm(o, hw, ckk, &gd[i * o * hw..(i + 1) * o * hw], false, col, true, &mut dw, 1.0);
                    }
                    self.accum(grads, *w, Tensor::from_parts(vw.shape().to_vec(), dw));
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; vx.numel()];
                    let mut dcol = vec![0.0; ckk * hw];
                    for i in 0..n {
                        gemm(ckk, o, hw, vw.data(), true, &gd[i * o * hw..(i + 1) * o * hw], false, &mut dcol, 0.0);
                        col2im(&dcol, c, h, wd, k, &mut dx[i * c * hw..(i + 1) * c * hw]);
                    }
                    self.accum(grads, *x, Tensor::from_parts(xs.to_vec(), dx));
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (vx, vs) = (self.value(*x), self.value(*scale));
                let (n, c, inner) = ch_split(vx.shape());
                if self.ng(*x) {
                    let mut dx = vec![0.0; vx.numel()];
                    for nc in 0..n * c {
                        let s = 1.0 + vs.data()[nc];
                        for j in nc * inner..(nc + 1) * inner {
                            dx[j] = gd[j] * s;
                        }
                    }
                    self.accum(grads, *x, Tensor::from_parts(vx.shape().to_vec(), dx));
                }
                if self.ng(*scale) || self.ng(*shift) {
                    let mut ds = vec![0.0; n * c];
                    let mut db = vec![0.0; n * c];
                    for nc in 0..n * c {
                        let r = nc * inner..(nc + 1) * inner;
                        ds[nc] = gd[r.clone()].iter().zip(&vx.data()[r.clone()]).map(|(a, b)| a * b).sum();
                        db[nc] = gd[r].iter().sum();
                    }
                    self.accum(grads, *scale, Tensor::from_parts(vec![n, c], ds));
                    self.accum(grads, *shift, Tensor::from_parts(vec![n, c], db));
                }
            }
            Op::GroupNorm { x, groups, inv_std } => {
                let y = &node.value;
                let (_, c, inner) = ch_split(y.shape());
                let glen = (c / groups) * inner;
                let mut dx = vec![0.0; y.numel()];
                for (gi, ((dyc, yc), dxc)) in
                    gd.chunks(glen).zip(y.data().chunks(glen)).zip(dx.chunks_mut(glen)).enumerate()
                {
                    let m_dy = dyc.iter().sum::<f64>() / glen as f64;
                    let m_dyy = dyc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / glen as f64;
                    let is = inv_std[gi];
                    for ((d, dy), yv) in dxc.iter_mut().zip(dyc).zip(yc) {
                        *d = is * (dy - m_dy - yv * m_dyy);
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Silu(x) => {
                let vx = self.value(*x);
                let d = gd
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.accum(grads, *x, Tensor::from_parts(vx.shape().to_vec(), d));
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = gd.iter().zip(vx.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                self.accum(grads, *x, Tensor::from_parts(vx.shape().to_vec(), d));
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(p * h + y) * w + xx] = 0.25 * gd[(p * oh + y / 2) * ow + xx / 2];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(s, dx));
            }
            Op::Upsample2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; nc * h * w];
                for p in 0..nc {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[(p * h + y / 2) * w + xx / 2] += gd[(p * oh + y) * ow + xx];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_parts(s, dx));
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accum(grads, p, Tensor::from_parts(ps, d));
                    }
                    offset += chunk;
                }
            }
            Op::Gather { table, rows } => {
                let vt = self.value(*table);
                let dcols = vt.shape()[1];
                let mut dt = vec![0.0; vt.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..dcols {
                        dt[r * dcols + j] += gd[i * dcols + j];
                    }
                }
                self.accum(grads, *table, Tensor::from_parts(vt.shape().to_vec(), dt));
            }
            Op::MeanRows(x) => {
                let s = self.value(*x).shape().to_vec();
                let l = s[0] as f64;
                let mut d = Vec::with_capacity(s[0] * s[1]);
                for _ in 0..s[0] {
                    d.extend(gd.iter().map(|v| v / l));
                }
                self.accum(grads, *x, Tensor::from_parts(s, d));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape().to_vec();
                let inner: usize = s[2..].iter().product();
                let mut d = Vec::with_capacity(inner * gd.len());
                for &v in gd {
                    d.extend(std::iter::repeat_n(v / inner as f64, inner));
                }
                self.accum(grads, *x, Tensor::from_parts(s, d));
            }
            Op::PixelUnshuffle(x, f) => self.accum(grads, *x, shuffle(g, *f)),
            Op::PixelShuffle(x, f) => self.accum(grads, *x, unshuffle(g, *f)),
            Op::Mse { pred, target } => {
                let vp = self.value(*pred);
                let c = 2.0 * gd[0] / vp.numel() as f64;
                let d = vp.data().iter().zip(target.data()).map(|(a, b)| c * (a - b)).collect();
                self.accum(grads, *pred, Tensor::from_parts(vp.shape().to_vec(), d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let vl = self.value(*logits);
                let (n, k) = (vl.shape()[0], vl.shape()[1]);
                let c = gd[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| c * p).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= c;
                }
                self.accum(grads, *logits, Tensor::from_parts(vec![n, k], d));
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Row-wise softmax of a `[N, K]` buffer.
pub fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ki as isize - p;
                let dx = kj as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx.max(0)) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let srow = sy as usize * w;
                    let s0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[srow + s0..srow + s0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let dst = &mut dx_out[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ki as isize - p;
                let dxo = kj as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (w as isize - dxo.max(0)) as usize;
                    let srow = sy as usize * w;
                    for xx in x0..x1 {
                        dst[srow + (xx as isize + dxo) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

fn unshuffle(t: &Tensor, f: usize) -> Tensor {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / f, w / f);
    let oc = c * f * f;
    let mut out = vec![0.0; t.numel()];
    let d = t.data();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let och = (ch * f + y % f) * f + x % f;
                    out[((i * oc + och) * oh + y / f) * ow + x / f] = d[((i * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::from_parts(vec![n, oc, oh, ow], out)
}

fn shuffle(t: &Tensor, f: usize) -> Tensor {
    let s = t.shape();
    let (n, ic, ih, iw) = (s[0], s[1], s[2], s[3]);
    let c = ic / (f * f);
    let (h, w) = (ih * f, iw * f);
    let mut out = vec![0.0; t.numel()];
    let d = t.data();
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let ich = (ch * f + y % f) * f + x % f;
                    out[((i * c + ch) * h + y) * w + x] = d[((i * ic + ich) * ih + y / f) * iw + x / f];
                }
            }
        }
    }
    Tensor::from_parts(vec![n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of d(loss)/d(leaf) for a graph builder.
    fn check_grad(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(xp, true);
                let l = build(&mut g, x);
                g.value(l).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-3));
            assert!(err < 1e-5, "element {i}: analytic {a} vs fd {fd}");
        }
    }

    fn target(shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn conv_and_norm_gradients() {
        check_grad(&[2, 2, 4, 4], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let w = g.constant(Tensor::randn(&[4, 2, 3, 3], 0.5, &mut rng));
            let y = g.conv2d(x, w);
            let y = g.group_norm(y, 2);
            let y = g.silu(y);
            g.mse(y, target(&[2, 4, 4, 4]))
        });
    }

    #[test]
    fn conv_weight_gradient() {
        check_grad(&[3, 2, 3, 3], |g, w| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = g.constant(Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng));
            let y = g.conv2d(x, w);
            g.mse(y, target(&[2, 3, 4, 4]))
        });
    }

    #[test]
    fn dense_gradients_2d_and_4d() {
        check_grad(&[3, 4], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let w = g.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
            let y = g.dense(x, w);
            g.mse(y, target(&[3, 5]))
        });
        check_grad(&[5, 4], |g, w| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = g.constant(Tensor::randn(&[2, 4, 2, 3], 1.0, &mut rng));
            let y = g.dense(x, w);
            g.mse(y, target(&[2, 5, 2, 3]))
        });
    }

    #[test]
    fn resampling_gradients() {
        check_grad(&[1, 2, 4, 4], |g, x| {
            let a = g.avg_pool2(x);
            let u = g.upsample2(a);
            let cat = g.concat(&[u, x], 1);
            let s = g.pixel_unshuffle(cat, 2);
            let r = g.relu(s);
            let back = g.pixel_shuffle(r, 2);
            g.mse(back, target(&[1, 4, 4, 4]))
        });
    }

    #[test]
    fn affine_pool_and_ce_gradients() {
        check_grad(&[1, 3], |g, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let x = g.constant(Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng));
            let b = g.scale(s, 0.5);
            let y = g.channel_affine(x, s, b);
            let p = g.global_avg_pool(y);
            g.cross_entropy(p, &[2])
        });
        check_grad(&[4, 3], |g, t| {
            let rows = g.gather(t, &[0, 2, 2, 3]);
            let m = g.mean_rows(rows);
            let bias = g.constant(Tensor::from_parts(vec![3], vec![0.1, -0.2, 0.3]));
            let y = g.add_bias(m, bias);
            let z = g.mul(y, y);
            let z = g.add(z, y);
            g.mse(z, target(&[1, 3]))
        });
    }

    #[test]
    fn shuffle_inverts_unshuffle() {
        let t = target(&[2, 3, 4, 6]);
        assert_eq!(shuffle(&unshuffle(&t, 2), 2), t);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2], 1.0));
        let w = g.leaf(Tensor::full(&[2, 2], 0.5), false);
        let b = g.leaf(Tensor::zeros(&[2]), true);
        let y = g.dense(x, w);
        let y = g.add_bias(y, b);
        let l = g.mse(y, Tensor::zeros(&[1, 2]));
        let grads = g.backward(l);
        assert!(grads.get(w).is_none());
        assert!(grads.get(b).is_some());
    }
}
