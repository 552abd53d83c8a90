//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables in
//! topological order. [`Graph::backward`] walks the recorded nodes once in
//! reverse order. Edges created by [`Graph::stop_gradient`] are marked
//! blocked and never carry gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Sub,
    Div,
    Mul,
    Add,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d {
        stride: usize,
        padding: usize,
        cols: Vec<S>,
    },
    Relu,
    AvgPool {
        window: usize,
    },
    GlobalAvgPool,
    Linear,
    CrossEntropy {
        probs: Tensor<S>,
        targets: Vec<usize>,
        weights: Vec<S>,
        norm: S,
    },
    StopGradient,
    ChannelMean,
    ChannelStd,
    Channel(Broadcast),
    ScaleShift,
    Mix {
        lambda: Vec<S>,
    },
    PermuteRows {
        perm: Vec<usize>,
    },
    SliceRows {
        start: usize,
    },
    Add,
    Mul,
    Scale {
        factor: S,
    },
    Sum,
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear => "linear",
            Op::CrossEntropy { .. } => "softmax_cross_entropy",
            Op::StopGradient => "stop_gradient",
            Op::ChannelMean => "channel_mean",
            Op::ChannelStd => "channel_std",
            Op::Channel(Broadcast::Sub) => "sub_channel",
            Op::Channel(Broadcast::Div) => "div_channel",
            Op::Channel(Broadcast::Mul) => "mul_channel",
            Op::Channel(Broadcast::Add) => "add_channel",
            Op::ScaleShift => "scale_shift",
            Op::Mix { .. } => "mix",
            Op::PermuteRows { .. } => "permute_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum => "sum",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    node: usize,
    blocked: bool,
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    inputs: Vec<Edge>,
    requires_grad: bool,
}

/// Recorded computation. Rebuilt for every forward pass.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    record: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when no gradient reached the variable.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that evaluates values only. `backward` is rejected and
    /// intermediate buffers needed for gradients are not kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Class probabilities saved by a [`Graph::softmax_cross_entropy`] node.
    pub fn probabilities(&self, v: Var) -> Option<&Tensor<S>> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        self.push_edges(
            value,
            op,
            inputs
                .iter()
                .map(|v| Edge {
                    node: v.0,
                    blocked: false,
                })
                .collect(),
        )
    }

    fn push_edges(&mut self, value: Tensor<S>, op: Op<S>, inputs: Vec<Edge>) -> Var {
        let requires_grad = self.record
            && inputs
                .iter()
                .any(|e| !e.blocked && self.nodes[e.node].requires_grad);
        debug_assert!(inputs.iter().all(|e| e.node < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D cross-correlation. `kernel` is `(Cout, Cin, kh, kw)`, `bias` is `(Cout)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[kernel.0].value;
        let b = &self.nodes[bias.0].value;
        let (n, cin, h, wd) = x.dims4()?;
        let (cout, wcin, kh, kw) = w.dims4()?;
        if wcin != cin {
            return Err(Error::mismatch("conv2d", x.shape(), w.shape()));
        }
        if b.shape() != [cout] {
            return Err(Error::mismatch("conv2d bias", w.shape(), b.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::mismatch("conv2d", x.shape(), w.shape()));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let k = cin * kh * kw;
        let p = ho * wo;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            stride,
            padding,
        };

        let mut out = vec![S::zero(); n * cout * p];
        let mut cols = vec![S::zero(); if self.record { n * k * p } else { k * p }];
        for bi in 0..n {
            let col = if self.record {
                &mut cols[bi * k * p..(bi + 1) * k * p]
            } else {
                &mut cols[..]
            };
            im2col(x.item(bi), col, &geom);
            let ob = &mut out[bi * cout * p..(bi + 1) * cout * p];
            S::gemm(cout, k, p, S::one(), w.data(), (k, 1), col, (p, 1), S::zero(), ob, (p, 1));
            for (co, row) in ob.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        if !self.record {
            cols = Vec::new();
        }
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                stride,
                padding,
                cols,
            },
            &[input, kernel, bias],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0].value.map(|v| v.max(S::zero()));
        self.push(value, Op::Relu, &[input])
    }

    /// Non-overlapping average pooling with a square window (stride = window).
    pub fn avg_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4()?;
        if window == 0 || window > h || window > w {
            return Err(Error::invalid(format!(
                "pool window {window} does not fit {h}x{w}"
            )));
        }
        let (ho, wo) = (h / window, w / window);
        let scale = S::one() / S::lit((window * window) as f64);
        let mut out = vec![S::zero(); n * c * ho * wo];
        let xd = x.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::zero();
                    for dy in 0..window {
                        let row = (oy * window + dy) * w + ox * window;
                        for dx in 0..window {
                            acc += src[row + dx];
                        }
                    }
                    dst[oy * wo + ox] = acc * scale;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool { window }, &[input]))
    }

    /// `(B, C, H, W) -> (B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let value = channel_means(&self.nodes[input.0].value)?;
        Ok(self.push(value, Op::GlobalAvgPool, &[input]))
    }

    /// `x (B, D) * weight (D, K) + bias (K)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let (n, d) = x.dims2()?;
        let (wd, k) = w.dims2()?;
        if wd != d {
            return Err(Error::mismatch("linear", x.shape(), w.shape()));
        }
        if b.shape() != [k] {
            return Err(Error::mismatch("linear bias", w.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        S::gemm(n, d, k, S::one(), x.data(), (d, 1), w.data(), (k, 1), S::one(), &mut out, (k, 1));
        let value = Tensor::from_vec(&[n, k], out)?;
        Ok(self.push(value, Op::Linear, &[input, weight, bias]))
    }

    /// Mean cross-entropy of `softmax(logits)` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = self.nodes[logits.0].value.dims2()?.0;
        self.weighted_cross_entropy(logits, targets, &vec![S::one(); n], S::lit(n as f64))
    }

    /// `sum_i weights[i] * CE_i / norm`. Rows with zero weight contribute
    /// neither loss nor gradient.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[S],
        norm: S,
    ) -> Result<Var> {
        let x = &self.nodes[logits.0].value;
        let (n, k) = x.dims2()?;
        if k < 2 {
            return Err(Error::invalid("cross-entropy needs at least 2 classes"));
        }
        if targets.len() != n || weights.len() != n {
            return Err(Error::mismatch("cross_entropy targets", x.shape(), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target {t} outside [0, {k})")));
        }
        if norm <= S::zero() {
            return Err(Error::invalid("cross-entropy normalizer must be positive"));
        }
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        for i in 0..n {
            let row = &x.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
            if weights[i] != S::zero() {
                let nll = z.ln() + max - row[targets[i]];
                loss += weights[i] * nll;
            }
        }
        let probs = Tensor::from_vec(&[n, k], probs)?;
        Ok(self.push(
            Tensor::scalar(loss / norm),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm,
            },
            &[logits],
        ))
    }

    /// Forward identity; contributes no gradient to `input`.
    pub fn stop_gradient(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0].value.clone();
        self.push_edges(
            value,
            Op::StopGradient,
            vec![Edge {
                node: input.0,
                blocked: true,
            }],
        )
    }

    /// Per-(instance, channel) spatial mean, `(B, C, H, W) -> (B, C)`.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let value = channel_means(&self.nodes[input.0].value)?;
        Ok(self.push(value, Op::ChannelMean, &[input]))
    }

    /// Per-(instance, channel) `sqrt(biased variance + eps)`, `(B, C, H, W) -> (B, C)`.
    pub fn channel_std(&mut self, input: Var, eps: S) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let inv = S::one() / S::lit(hw as f64);
        let out = x
            .data()
            .chunks(hw)
            .map(|plane| {
                let mu = plane.iter().copied().sum::<S>() * inv;
                let var = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv;
                (var + eps).sqrt()
            })
            .collect();
        let value = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(value, Op::ChannelStd, &[input]))
    }

    /// `x - m` with `m (B, C)` broadcast over space.
    pub fn sub_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        self.channel_op(Broadcast::Sub, x, m)
    }

    /// `x / s` with `s (B, C)` broadcast over space.
    pub fn div_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        self.channel_op(Broadcast::Div, x, s)
    }

    /// `x * s` with `s (B, C)` broadcast over space.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        self.channel_op(Broadcast::Mul, x, s)
    }

    /// `x + t` with `t (B, C)` broadcast over space.
    pub fn add_channel(&mut self, x: Var, t: Var) -> Result<Var> {
        self.channel_op(Broadcast::Add, x, t)
    }

    fn channel_op(&mut self, kind: Broadcast, x: Var, s: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        let (n, c, h, w) = xv.dims4()?;
        if sv.shape() != [n, c] {
            return Err(Error::mismatch("channel broadcast", xv.shape(), sv.shape()));
        }
        let hw = h * w;
        let mut out = xv.data().to_vec();
        for (plane, &sc) in out.chunks_mut(hw).zip(sv.data()) {
            match kind {
                Broadcast::Sub => plane.iter_mut().for_each(|v| *v -= sc),
                Broadcast::Div => plane.iter_mut().for_each(|v| *v /= sc),
                Broadcast::Mul => plane.iter_mut().for_each(|v| *v *= sc),
                Broadcast::Add => plane.iter_mut().for_each(|v| *v += sc),
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(value, Op::Channel(kind), &[x, s]))
    }

    /// `x * gamma[c] + beta[c]` with per-channel `(C)` vectors.
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (_, c, h, w) = xv.dims4()?;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::mismatch("scale_shift", xv.shape(), g.shape()));
        }
        let hw = h * w;
        let mut out = xv.data().to_vec();
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let (gc, bc) = (g.data()[i % c], b.data()[i % c]);
            plane.iter_mut().for_each(|v| *v = *v * gc + bc);
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(value, Op::ScaleShift, &[x, gamma, beta]))
    }

    /// Row-wise convex combination `lambda[i] * a[i] + (1 - lambda[i]) * b[i]`.
    pub fn mix(&mut self, a: Var, b: Var, lambda: &[S]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(Error::mismatch("mix", av.shape(), bv.shape()));
        }
        let n = av.shape()[0];
        if lambda.len() != n {
            return Err(Error::mismatch("mix lambda", av.shape(), &[lambda.len()]));
        }
        let stride = av.len() / n;
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .enumerate()
            .map(|(i, (&x, &y))| {
                let l = lambda[i / stride];
                l * x + (S::one() - l) * y
            })
            .collect();
        let value = Tensor::from_vec(av.shape(), out)?;
        Ok(self.push(
            value,
            Op::Mix {
                lambda: lambda.to_vec(),
            },
            &[a, b],
        ))
    }

    /// Output row `i` is input row `perm[i]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if perm.len() != xv.shape()[0] {
            return Err(Error::mismatch("permute_rows", xv.shape(), &[perm.len()]));
        }
        let value = xv.gather(perm)?;
        Ok(self.push(
            value,
            Op::PermuteRows {
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if start >= end || end > xv.shape()[0] {
            return Err(Error::invalid(format!(
                "row slice {start}..{end} out of range for {:?}",
                xv.shape()
            )));
        }
        let rows: Vec<usize> = (start..end).collect();
        let value = xv.gather(&rows)?;
        Ok(self.push(value, Op::SliceRows { start }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * factor);
        self.push(value, Op::Scale { factor }, &[x])
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.sum());
        self.push(value, Op::Sum, &[x])
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(Error::mismatch(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.record {
            return Err(Error::invalid("backward on an inference graph"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|e| !e.blocked && self.nodes[e.node].requires_grad)
                .collect();
            let contributions = self.local_backward(node, &g, &wants)?;
            for (edge, contrib) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contrib {
                    accumulate(&mut grads[edge.node], c);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn input(&self, node: &Node<S>, i: usize) -> &Tensor<S> {
        &self.nodes[node.inputs[i].node].value
    }

    fn local_backward(
        &self,
        node: &Node<S>,
        g: &Tensor<S>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf | Op::StopGradient => vec![None; node.inputs.len()],
            Op::Conv2d {
                stride,
                padding,
                cols,
            } => {
                let x = self.input(node, 0);
                let w = self.input(node, 1);
                let (n, cin, h, wd) = x.dims4()?;
                let (cout, _, kh, kw) = w.dims4()?;
                let (_, _, ho, wo) = g.dims4()?;
                let k = cin * kh * kw;
                let p = ho * wo;
                let geom = ConvGeom {
                    cin,
                    h,
                    w: wd,
                    kh,
                    kw,
                    ho,
                    wo,
                    stride: *stride,
                    padding: *padding,
                };
                let mut dx = wants[0].then(|| vec![S::zero(); x.len()]);
                let mut dw = wants[1].then(|| vec![S::zero(); w.len()]);
                let mut db = wants[2].then(|| vec![S::zero(); cout]);
                let mut dcol = vec![S::zero(); if wants[0] { k * p } else { 0 }];
                for bi in 0..n {
                    let gb = &gd[bi * cout * p..(bi + 1) * cout * p];
                    let col = &cols[bi * k * p..(bi + 1) * k * p];
                    if let Some(dw) = dw.as_mut() {
                        S::gemm(cout, p, k, S::one(), gb, (p, 1), col, (1, p), S::one(), dw, (k, 1));
                    }
                    if let Some(db) = db.as_mut() {
                        for (co, row) in gb.chunks(p).enumerate() {
                            db[co] += row.iter().copied().sum::<S>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        S::gemm(k, cout, p, S::one(), w.data(), (1, k), gb, (p, 1), S::zero(), &mut dcol, (p, 1));
                        let per = cin * h * wd;
                        col2im(&dcol, &mut dx[bi * per..(bi + 1) * per], &geom);
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
                    dw.map(|d| Tensor::from_vec(w.shape(), d)).transpose()?,
                    db.map(|d| Tensor::from_vec(&[cout], d)).transpose()?,
                ]
            }
            Op::Relu => {
                let y = &node.value;
                let d = y
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&yv, &gv)| if yv > S::zero() { gv } else { S::zero() })
                    .collect();
                vec![Some(Tensor::from_vec(y.shape(), d)?)]
            }
            Op::AvgPool { window } => {
                let x = self.input(node, 0);
                let (n, c, h, w) = x.dims4()?;
                let (_, _, ho, wo) = g.dims4()?;
                let scale = S::one() / S::lit((window * window) as f64);
                let mut dx = vec![S::zero(); x.len()];
                for plane in 0..n * c {
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    let src = &gd[plane * ho * wo..(plane + 1) * ho * wo];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = src[oy * wo + ox] * scale;
                            for dy in 0..*window {
                                let row = (oy * window + dy) * w + ox * window;
                                dst[row..row + window].iter_mut().for_each(|v| *v += gv);
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(x.shape(), dx)?)]
            }
            Op::GlobalAvgPool | Op::ChannelMean => {
                let x = self.input(node, 0);
                let (_, _, h, w) = x.dims4()?;
                let inv = S::one() / S::lit((h * w) as f64);
                let mut dx = vec![S::zero(); x.len()];
                for (plane, &gv) in dx.chunks_mut(h * w).zip(gd) {
                    plane.iter_mut().for_each(|v| *v = gv * inv);
                }
                vec![Some(Tensor::from_vec(x.shape(), dx)?)]
            }
            Op::ChannelStd => {
                let x = self.input(node, 0);
                let (_, _, h, w) = x.dims4()?;
                let hw = h * w;
                let inv = S::one() / S::lit(hw as f64);
                let mut dx = vec![S::zero(); x.len()];
                for (i, (dplane, plane)) in dx.chunks_mut(hw).zip(x.data().chunks(hw)).enumerate() {
                    let mu = plane.iter().copied().sum::<S>() * inv;
                    let coef = gd[i] * inv / node.value.data()[i];
                    for (d, &v) in dplane.iter_mut().zip(plane) {
                        *d = coef * (v - mu);
                    }
                }
                vec![Some(Tensor::from_vec(x.shape(), dx)?)]
            }
            Op::Linear => {
                let x = self.input(node, 0);
                let w = self.input(node, 1);
                let (n, d) = x.dims2()?;
                let k = w.dims2()?.1;
                let dx = if wants[0] {
                    let mut dx = vec![S::zero(); n * d];
                    S::gemm(n, k, d, S::one(), gd, (k, 1), w.data(), (1, k), S::zero(), &mut dx, (d, 1));
                    Some(Tensor::from_vec(x.shape(), dx)?)
                } else {
                    None
                };
                let dw = if wants[1] {
                    let mut dw = vec![S::zero(); d * k];
                    S::gemm(d, n, k, S::one(), x.data(), (1, d), gd, (k, 1), S::zero(), &mut dw, (k, 1));
                    Some(Tensor::from_vec(w.shape(), dw)?)
                } else {
                    None
                };
                let db = if wants[2] {
                    let mut db = vec![S::zero(); k];
                    for row in gd.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    Some(Tensor::from_vec(&[k], db)?)
                } else {
                    None
                };
                vec![dx, dw, db]
            }
            Op::CrossEntropy {
                probs,
                targets,
                weights,
                norm,
            } => {
                let (n, k) = probs.dims2()?;
                let upstream = gd[0];
                let mut dx = vec![S::zero(); n * k];
                for i in 0..n {
                    if weights[i] == S::zero() {
                        continue;
                    }
                    let coef = upstream * weights[i] / *norm;
                    for j in 0..k {
                        let onehot = if j == targets[i] { S::one() } else { S::zero() };
                        dx[i * k + j] = coef * (probs.data()[i * k + j] - onehot);
                    }
                }
                vec![Some(Tensor::from_vec(&[n, k], dx)?)]
            }
            Op::Channel(kind) => {
                let x = self.input(node, 0);
                let s = self.input(node, 1);
                let hw = x.len() / s.len();
                let mut dx = wants[0].then(|| vec![S::zero(); x.len()]);
                let mut ds = wants[1].then(|| vec![S::zero(); s.len()]);
                for (i, &sc) in s.data().iter().enumerate() {
                    let gp = &gd[i * hw..(i + 1) * hw];
                    let xp = &x.data()[i * hw..(i + 1) * hw];
                    if let Some(dx) = dx.as_mut() {
                        let dp = &mut dx[i * hw..(i + 1) * hw];
                        match kind {
                            Broadcast::Sub | Broadcast::Add => dp.copy_from_slice(gp),
                            Broadcast::Div => dp.iter_mut().zip(gp).for_each(|(d, &g)| *d = g / sc),
                            Broadcast::Mul => dp.iter_mut().zip(gp).for_each(|(d, &g)| *d = g * sc),
                        }
                    }
                    if let Some(ds) = ds.as_mut() {
                        ds[i] = match kind {
                            Broadcast::Sub => -gp.iter().copied().sum::<S>(),
                            Broadcast::Add => gp.iter().copied().sum::<S>(),
                            Broadcast::Div => {
                                -gp.iter().zip(xp).map(|(&g, &v)| g * v).sum::<S>() / (sc * sc)
                            }
                            Broadcast::Mul => gp.iter().zip(xp).map(|(&g, &v)| g * v).sum::<S>(),
                        };
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
                    ds.map(|d| Tensor::from_vec(s.shape(), d)).transpose()?,
                ]
            }
            Op::ScaleShift => {
                let x = self.input(node, 0);
                let gamma = self.input(node, 1);
                let (_, c, h, w) = x.dims4()?;
                let hw = h * w;
                let mut dx = vec![S::zero(); x.len()];
                let mut dg = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for i in 0..x.len() / hw {
                    let ch = i % c;
                    let gp = &gd[i * hw..(i + 1) * hw];
                    let xp = &x.data()[i * hw..(i + 1) * hw];
                    for ((d, &gv), &xv) in dx[i * hw..(i + 1) * hw].iter_mut().zip(gp).zip(xp) {
                        *d = gv * gamma.data()[ch];
                        dg[ch] += gv * xv;
                        dbeta[ch] += gv;
                    }
                }
                vec![
                    Some(Tensor::from_vec(x.shape(), dx)?),
                    Some(Tensor::from_vec(&[c], dg)?),
                    Some(Tensor::from_vec(&[c], dbeta)?),
                ]
            }
            Op::Mix { lambda } => {
                let stride = g.len() / lambda.len();
                let da = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * lambda[i / stride])
                    .collect();
                let db = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * (S::one() - lambda[i / stride]))
                    .collect();
                vec![
                    Some(Tensor::from_vec(g.shape(), da)?),
                    Some(Tensor::from_vec(g.shape(), db)?),
                ]
            }
            Op::PermuteRows { perm } => {
                let stride = g.len() / perm.len();
                let mut dx = vec![S::zero(); g.len()];
                for (i, &src) in perm.iter().enumerate() {
                    let dst = &mut dx[src * stride..(src + 1) * stride];
                    dst.iter_mut()
                        .zip(&gd[i * stride..(i + 1) * stride])
                        .for_each(|(d, &v)| *d += v);
                }
                vec![Some(Tensor::from_vec(g.shape(), dx)?)]
            }
            Op::SliceRows { start } => {
                let x = self.input(node, 0);
                let stride = x.len() / x.shape()[0];
                let mut dx = vec![S::zero(); x.len()];
                dx[start * stride..start * stride + gd.len()].copy_from_slice(gd);
                vec![Some(Tensor::from_vec(x.shape(), dx)?)]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul => {
                let a = self.input(node, 0);
                let b = self.input(node, 1);
                let da = gd.iter().zip(b.data()).map(|(&g, &v)| g * v).collect();
                let db = gd.iter().zip(a.data()).map(|(&g, &v)| g * v).collect();
                vec![
                    Some(Tensor::from_vec(g.shape(), da)?),
                    Some(Tensor::from_vec(g.shape(), db)?),
                ]
            }
            Op::Scale { factor } => vec![Some(g.map(|v| v * *factor))],
            Op::Sum => {
                let x = self.input(node, 0);
                vec![Some(Tensor::full(x.shape(), gd[0]))]
            }
        };
        Ok(out
            .into_iter()
            .zip(wants)
            .map(|(t, &w)| if w { t } else { None })
            .collect())
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, contrib: Tensor<S>) {
    match slot {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(contrib.data())
            .for_each(|(a, &b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn channel_means<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    let inv = S::one() / S::lit((h * w) as f64);
    let out = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<S>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], out)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Source index along one axis, or `None` inside the zero padding.
    #[inline]
    fn src(&self, out: usize, k: usize, limit: usize) -> Option<usize> {
        (out * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < limit)
    }
}

fn im2col<S: Scalar>(x: &[S], col: &mut [S], g: &ConvGeom) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ki, g.h) {
                        None => out_row.iter_mut().for_each(|v| *v = S::zero()),
                        Some(iy) => {
                            let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = match g.src(ox, kj, g.w) {
                                    Some(ix) => src_row[ix],
                                    None => S::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(col: &[S], dx: &mut [S], g: &ConvGeom) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
