//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every value produced by an operation. Because nodes are
//! appended in evaluation order, walking the tape backwards visits each node
//! after all of its consumers, which is all reverse-mode accumulation needs.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Scale(Var, f64),
    AddChannel { x: Var, v: Var },
    Silu { x: Var, sig: Vec<f64> },
    GroupNorm { x: Var, gain: Var, bias: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    ConcatChannels(Var, Var),
    Upsample2x(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    MeanPool(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "variable")
    }

    /// A named trainable leaf; see [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        let v = self.variable(value)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let (k, wc, kh, kw) = self.value(w).dims4("conv2d")?;
        if wc != c {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if bs != [k] {
            return Err(Error::shape("conv2d", ws, bs));
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} must be odd and stride positive"
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let g = ConvGeom { channels: c, height: h, width: wd, kh, kw, stride, pad };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &g,
            self.value(w).data(),
            self.value(b).data(),
        );
        let t = Tensor::new(vec![n, k, g.out_h(), g.out_w()], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, ng, "conv2d")
    }

    /// `y = x @ w^T + b` with `x: [N, D]`, `w: [O, D]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (n, d, o) = match (xs, ws) {
            (&[n, d], &[o, wd]) if wd == d => (n, d, o),
            _ => return Err(Error::shape("linear", xs, ws)),
        };
        if self.value(b).shape() != [o] {
            return Err(Error::shape("linear", ws, self.value(b).shape()));
        }
        let (xd, wdt, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = vec![0.0; n * o];
        for i in 0..n {
            let xi = &xd[i * d..(i + 1) * d];
            for j in 0..o {
                let wj = &wdt[j * d..(j + 1) * d];
                let mut s = bd[j];
                for (a, c) in xi.iter().zip(wj) {
                    s += a * c;
                }
                y[i * o + j] = s;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::new(vec![n, o], y)?, Op::Linear { x, w, b }, ng, "linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng, "add")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), ng, "scale")
    }

    /// Broadcast-add `v: [N, C]` over the spatial axes of `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("add_channel")?;
        if self.value(v).shape() != [n, c] {
            return Err(Error::shape("add_channel", self.value(x).shape(), self.value(v).shape()));
        }
        let mut t = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (plane, add) in t.data_mut().chunks_mut(h * w).zip(vd) {
            plane.iter_mut().for_each(|e| *e += add);
        }
        let ng = self.needs(x) || self.needs(v);
        self.push(t, Op::AddChannel { x, v }, ng, "add_channel")
    }

    /// SiLU, `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let sig: Vec<f64> = self.value(x).data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let y: Vec<f64> = self.value(x).data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let ng = self.needs(x);
        self.push(t, Op::Silu { x, sig }, ng, "silu")
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(Error::shape("group_norm", &[c], self.value(gain).shape()));
        }
        let group_len = (c / groups) * h * w;
        let plane = h * w;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut y = vec![0.0; xd.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for (gi, chunk) in xd.chunks(group_len).enumerate() {
            let mean = chunk.iter().sum::<f64>() / group_len as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
            let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            let base = gi * group_len;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = ((base + j) / plane) % c;
                y[base + j] = (v - mean) * rstd * gd[ch] + bd[ch];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        let op = Op::GroupNorm { x, gain, bias, groups, mean: means, rstd: rstds };
        self.push(Tensor::new(vec![n, c, h, w], y)?, op, ng, "group_norm")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", self.value(a).shape(), self.value(b).shape()));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut y = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            y.extend_from_slice(&ad[i * la..(i + 1) * la]);
            y.extend_from_slice(&bd[i * lb..(i + 1) * lb]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, ca + cb, h, w], y)?, Op::ConcatChannels(a, b), ng, "concat")
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample2x")?;
        let xd = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            for i in 0..h2 {
                for j in 0..w2 {
                    y[(p * h2 + i) * w2 + j] = xd[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![n, c, h2, w2], y)?, Op::Upsample2x(x), ng, "upsample2x")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Batched `[B, M, K] @ [B, K, P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (bt, m, k, p) = match (sa, sb) {
            (&[b1, m, k], &[b2, k2, p]) if b1 == b2 && k == k2 => (b1, m, k, p),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let y = kernels::bmm(self.value(a).data(), self.value(b).data(), bt, m, k, p);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![bt, m, p], y)?, Op::MatMul(a, b), ng, "matmul")
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (b, r, c) = match self.value(x).shape() {
            &[b, r, c] => (b, r, c),
            s => return Err(Error::shape("transpose", s, &[0, 0, 0])),
        };
        let y = kernels::transpose_last2(self.value(x).data(), b, r, c);
        let ng = self.needs(x);
        self.push(Tensor::new(vec![b, c, r], y)?, Op::Transpose(x), ng, "transpose")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let last = *t.shape().last().ok_or_else(|| Error::shape("softmax", t.shape(), &[0]))?;
        let mut y = t.data().to_vec();
        for row in y.chunks_mut(last) {
            softmax_in_place(row);
        }
        let y = Tensor::new(t.shape().to_vec(), y)?;
        let ng = self.needs(x);
        self.push(y, Op::Softmax(x), ng, "softmax")
    }

    /// Global average over the spatial axes, `[N, C, H, W] -> [N, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("mean_pool")?;
        let y: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let ng = self.needs(x);
        self.push(Tensor::new(vec![n, c], y)?, Op::MeanPool(x), ng, "mean_pool")
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).zip_map(self.value(b), "mse", |x, y| (x - y) * (x - y))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(d.mean()), Op::Mse(a, b), ng, "mse")
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = match t.shape() {
            &[n, k] if n == labels.len() => (n, k),
            s => return Err(Error::shape("cross_entropy", s, &[labels.len()])),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].max(f64::MIN_POSITIVE).ln();
        }
        let ng = self.needs(logits);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(Tensor::scalar(loss / n as f64), op, ng, "cross_entropy")
    }

    /// Backpropagate from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let t = self.value(out);
        if t.numel() != 1 {
            return Err(Error::shape("backward", t.shape(), &[]));
        }
        self.backward_with_seed(out, &Tensor::new(t.shape().to_vec(), vec![1.0])?)
    }

    /// Backpropagate an arbitrary upstream gradient `seed` into `out`.
    pub fn backward_with_seed(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape("backward", self.value(out).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.data().to_vec());
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (n, c, h, wd) = self.value(x).dims4("conv2d").unwrap();
                let (k, _, kh, kw) = self.value(w).dims4("conv2d").unwrap();
                let geom = ConvGeom { channels: c, height: h, width: wd, kh, kw, stride, pad };
                let r = kernels::conv2d_backward(
                    self.value(x).data(),
                    n,
                    &geom,
                    self.value(w).data(),
                    k,
                    g,
                    (self.needs(x), self.needs(w), self.needs(b)),
                );
                if let Some(gx) = r.x {
                    acc(grads, x, gx.len(), |d| add_into(d, &gx));
                }
                if let Some(gw) = r.w {
                    acc(grads, w, gw.len(), |d| add_into(d, &gw));
                }
                if let Some(gb) = r.b {
                    acc(grads, b, gb.len(), |d| add_into(d, &gb));
                }
            }
            &Op::Linear { x, w, b } => {
                let (xd, wdt) = (self.value(x).data(), self.value(w).data());
                let o = self.value(b).numel();
                let d = wdt.len() / o;
                let n = xd.len() / d;
                if self.needs(x) {
                    acc(grads, x, xd.len(), |gx| {
                        for i in 0..n {
                            for j in 0..o {
                                let gv = g[i * o + j];
                                for (e, &wv) in gx[i * d..(i + 1) * d].iter_mut().zip(&wdt[j * d..(j + 1) * d]) {
                                    *e += gv * wv;
                                }
                            }
                        }
                    });
                }
                if self.needs(w) {
                    acc(grads, w, wdt.len(), |gw| {
                        for i in 0..n {
                            for j in 0..o {
                                let gv = g[i * o + j];
                                for (e, &xv) in gw[j * d..(j + 1) * d].iter_mut().zip(&xd[i * d..(i + 1) * d]) {
                                    *e += gv * xv;
                                }
                            }
                        }
                    });
                }
                if self.needs(b) {
                    acc(grads, b, o, |gb| {
                        for row in g.chunks(o) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        acc(grads, v, g.len(), |d| add_into(d, g));
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.needs(a) {
                    acc(grads, a, g.len(), |d| {
                        for (e, &gv) in d.iter_mut().zip(g) {
                            *e += gv * s;
                        }
                    });
                }
            }
            &Op::AddChannel { x, v } => {
                if self.needs(x) {
                    acc(grads, x, g.len(), |d| add_into(d, g));
                }
                if self.needs(v) {
                    let nv = len(v);
                    let plane = g.len() / nv;
                    acc(grads, v, nv, |d| {
                        for (e, p) in d.iter_mut().zip(g.chunks(plane)) {
                            *e += p.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Silu { x, sig } => {
                let x = *x;
                if self.needs(x) {
                    let xd = self.value(x).data();
                    acc(grads, x, g.len(), |d| {
                        for (((e, &gv), &xv), &s) in d.iter_mut().zip(g).zip(xd).zip(sig) {
                            *e += gv * s * (1.0 + xv * (1.0 - s));
                        }
                    });
                }
            }
            Op::GroupNorm { x, gain, bias, groups, mean, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (_, c, h, w) = self.value(x).dims4("group_norm").unwrap();
                let plane = h * w;
                let group_len = (c / groups) * plane;
                let xd = self.value(x).data();
                let gd = self.value(gain).data();
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut gx = vec![0.0; xd.len()];
                for (gi, (xs, gs)) in xd.chunks(group_len).zip(g.chunks(group_len)).enumerate() {
                    let (m, r) = (mean[gi], rstd[gi]);
                    let base = gi * group_len;
                    let mut sum_gxh = 0.0;
                    let mut sum_gxh_xh = 0.0;
                    for (j, (&xv, &gv)) in xs.iter().zip(gs).enumerate() {
                        let ch = ((base + j) / plane) % c;
                        let xh = (xv - m) * r;
                        ggain[ch] += gv * xh;
                        gbias[ch] += gv;
                        let gxh = gv * gd[ch];
                        sum_gxh += gxh;
                        sum_gxh_xh += gxh * xh;
                    }
                    let mean_gxh = sum_gxh / group_len as f64;
                    let mean_gxh_xh = sum_gxh_xh / group_len as f64;
                    for (j, (&xv, &gv)) in xs.iter().zip(gs).enumerate() {
                        let ch = ((base + j) / plane) % c;
                        let xh = (xv - m) * r;
                        gx[base + j] = r * (gv * gd[ch] - mean_gxh - xh * mean_gxh_xh);
                    }
                }
                if self.needs(x) {
                    acc(grads, x, gx.len(), |d| add_into(d, &gx));
                }
                if self.needs(gain) {
                    acc(grads, gain, c, |d| add_into(d, &ggain));
                }
                if self.needs(bias) {
                    acc(grads, bias, c, |d| add_into(d, &gbias));
                }
            }
            &Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(a).dims4("concat").unwrap();
                let cb = self.value(b).shape()[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                if self.needs(a) {
                    acc(grads, a, n * la, |d| {
                        for i in 0..n {
                            add_into(&mut d[i * la..(i + 1) * la], &g[i * (la + lb)..i * (la + lb) + la]);
                        }
                    });
                }
                if self.needs(b) {
                    acc(grads, b, n * lb, |d| {
                        for i in 0..n {
                            add_into(&mut d[i * lb..(i + 1) * lb], &g[i * (la + lb) + la..(i + 1) * (la + lb)]);
                        }
                    });
                }
            }
            &Op::Upsample2x(x) => {
                if self.needs(x) {
                    let (n, c, h, w) = self.value(x).dims4("upsample2x").unwrap();
                    let w2 = 2 * w;
                    acc(grads, x, n * c * h * w, |d| {
                        for p in 0..n * c {
                            for i in 0..2 * h {
                                for j in 0..w2 {
                                    d[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * w2 + j];
                                }
                            }
                        }
                    });
                }
            }
            &Op::Reshape(x) => {
                if self.needs(x) {
                    acc(grads, x, g.len(), |d| add_into(d, g));
                }
            }
            &Op::MatMul(a, b) => {
                let (bt, m, k) = match self.value(a).shape() {
                    &[bt, m, k] => (bt, m, k),
                    _ => unreachable!(),
                };
                let p = self.value(b).shape()[2];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    // dA = dY @ B^T
                    let bt_t = kernels::transpose_last2(bd, bt, k, p);
                    let ga = kernels::bmm(g, &bt_t, bt, m, p, k);
                    acc(grads, a, ga.len(), |d| add_into(d, &ga));
                }
                if self.needs(b) {
                    // dB = A^T @ dY
                    let at = kernels::transpose_last2(ad, bt, m, k);
                    let gb = kernels::bmm(&at, g, bt, k, m, p);
                    acc(grads, b, gb.len(), |d| add_into(d, &gb));
                }
            }
            &Op::Transpose(x) => {
                if self.needs(x) {
                    let &[b, r, c] = self.value(x).shape() else { unreachable!() };
                    let gt = kernels::transpose_last2(g, b, c, r);
                    acc(grads, x, gt.len(), |d| add_into(d, &gt));
                }
            }
            &Op::Softmax(x) => {
                if self.needs(x) {
                    let y = node.value.data();
                    let last = *node.value.shape().last().unwrap();
                    acc(grads, x, g.len(), |d| {
                        for ((dr, yr), gr) in d.chunks_mut(last).zip(y.chunks(last)).zip(g.chunks(last)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((e, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *e += yv * (gv - dot);
                            }
                        }
                    });
                }
            }
            &Op::MeanPool(x) => {
                if self.needs(x) {
                    let n = len(x);
                    let plane = n / g.len();
                    acc(grads, x, n, |d| {
                        for (chunk, &gv) in d.chunks_mut(plane).zip(g) {
                            let s = gv / plane as f64;
                            chunk.iter_mut().for_each(|e| *e += s);
                        }
                    });
                }
            }
            &Op::Mse(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let s = 2.0 * g[0] / ad.len() as f64;
                if self.needs(a) {
                    acc(grads, a, ad.len(), |d| {
                        for ((e, &x), &y) in d.iter_mut().zip(ad).zip(bd) {
                            *e += s * (x - y);
                        }
                    });
                }
                if self.needs(b) {
                    acc(grads, b, bd.len(), |d| {
                        for ((e, &x), &y) in d.iter_mut().zip(ad).zip(bd) {
                            *e -= s * (x - y);
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.needs(*logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let s = g[0] / n as f64;
                    acc(grads, *logits, probs.len(), |d| {
                        for (i, &l) in labels.iter().enumerate() {
                            for j in 0..k {
                                let target = if j == l { 1.0 } else { 0.0 };
                                d[i * k + j] += s * (probs[i * k + j] - target);
                            }
                        }
                    });
                }
            }
        }
    }

    /// Gradients of every registered parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
