//! Define-by-run computation tape with reverse-mode differentiation.

use rand::{Rng, RngCore};

use crate::kernels::{col2im, gemm, im2col, Mat, Window};
use crate::{GradError, ParamId, ParamKind, ParamStore, Result, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const BN_EPS: f32 = 1e-5;

enum Val {
    Own(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        win: Window,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        win: Window,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    GlobalAvgPool(NodeId),
    PixelShuffle {
        x: NodeId,
        r: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f32>,
    },
    Softmax(NodeId),
    Sum(NodeId),
    External {
        x: NodeId,
        grad: Tensor,
    },
}

struct Node {
    val: Val,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|t| (ParamId(i), t)))
    }
}

/// One forward pass. Parameters are read from the borrowed store; batch-norm
/// running-statistic updates are collected and applied by the caller after
/// the pass (see [`Graph::into_buffer_updates`]).
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    training: bool,
    track_params: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            training,
            track_params: true,
            buffer_updates: Vec::new(),
        }
    }

    /// Evaluation-mode graph that never tracks parameter gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        let mut g = Self::new(store, false);
        g.track_params = false;
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn into_buffer_updates(self) -> Vec<(ParamId, Tensor)> {
        self.buffer_updates
    }

    fn push(&mut self, val: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            val: Val::Own(val),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].val {
            Val::Own(t) => t,
            Val::Param(p) => self.store.value(*p),
        }
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::node`].
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let entry = self.store.get(id);
        let needs = self.track_params && entry.kind == ParamKind::Trainable && !entry.frozen;
        self.nodes.push(Node {
            val: Val::Param(id),
            op: Op::Param(id),
            needs_grad: needs,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw {
            return Err(GradError::Shape(format!(
                "conv2d: input channels {c}, weight {:?}",
                self.value(w).shape()
            )));
        }
        let win = Window { kernel: kh, stride, pad };
        let (oh, ow) = match (win.out_size(h), win.out_size(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(GradError::Shape(format!("conv2d: input {h}x{wd} smaller than kernel {kh}"))),
        };
        let plane = oh * ow;
        let kk = c * kh * kw;
        let mut out = vec![0.0f32; n * co * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = if win.is_pointwise() { Vec::new() } else { vec![0.0f32; kk * plane] };
        for i in 0..n {
            let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let rhs = if win.is_pointwise() {
                xi
            } else {
                im2col(xi, c, h, wd, win, oh, ow, &mut cols);
                &cols
            };
            gemm(
                co,
                kk,
                plane,
                Mat::rows(wv, kk),
                Mat::rows(rhs, plane),
                0.0,
                &mut out[i * co * plane..(i + 1) * co * plane],
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != co {
                return Err(GradError::Shape(format!("conv2d bias has {} values for {co} channels", bv.len())));
            }
            for (j, chunk) in out.chunks_mut(plane).enumerate() {
                let bias = bv[j % co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(&[n, co, oh, ow], out)?, Op::Conv2d { x, w, b, win }, needs))
    }

    /// Transposed convolution with PyTorch weight layout `(in, out, k, k)`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (wi, co, kh, kw) = self.value(w).dims4()?;
        if wi != ci || kh != kw {
            return Err(GradError::Shape(format!(
                "conv_transpose2d: input channels {ci}, weight {:?}",
                self.value(w).shape()
            )));
        }
        let win = Window { kernel: kh, stride, pad };
        let oh = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .ok_or_else(|| GradError::Shape("conv_transpose2d: padding too large".into()))?;
        let ow = ((wd - 1) * stride + kh)
            .checked_sub(2 * pad)
            .ok_or_else(|| GradError::Shape("conv_transpose2d: padding too large".into()))?;
        let kk = co * kh * kw;
        let plane = h * wd;
        let mut cols = vec![0.0f32; kk * plane];
        let mut out = vec![0.0f32; n * co * oh * ow];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let xi = &xv[i * ci * plane..(i + 1) * ci * plane];
            gemm(kk, ci, plane, Mat::transposed(wv, kk), Mat::rows(xi, plane), 0.0, &mut cols);
            col2im(&cols, co, oh, ow, win, h, wd, &mut out[i * co * oh * ow..(i + 1) * co * oh * ow]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != co {
                return Err(GradError::Shape(format!(
                    "conv_transpose2d bias has {} values for {co} channels",
                    bv.len()
                )));
            }
            for (j, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bias = bv[j % co];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::new(&[n, co, oh, ow], out)?,
            Op::ConvTranspose2d { x, w, b, win },
            needs,
        ))
    }

    /// Batch normalisation over (N, H, W) per channel. In training mode the
    /// batch statistics are used and running statistics are scheduled for
    /// update with `momentum`; in evaluation mode the running statistics are
    /// used.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f32,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let m = (n * plane) as f32;
        let xv = self.value(x).data();
        let mut pending = Vec::new();
        let (mean, var) = if self.training {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for i in 0..n {
                for ch in 0..c {
                    let s = &xv[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    mean[ch] += s.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for i in 0..n {
                for ch in 0..c {
                    let s = &xv[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    let mu = mean[ch];
                    var[ch] += s.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            let rm = self.store.value(running_mean).data();
            let rv = self.store.value(running_var).data();
            let unbias = if m > 1.0 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let new_rm: Vec<f32> = (0..c)
                .map(|ch| (1.0 - momentum) * rm[ch] + momentum * mean[ch] as f32)
                .collect();
            let new_rv: Vec<f32> = (0..c)
                .map(|ch| (1.0 - momentum) * rv[ch] + momentum * (var[ch] * unbias) as f32)
                .collect();
            pending.push((running_mean, Tensor::new(&[c], new_rm)?));
            pending.push((running_var, Tensor::new(&[c], new_rv)?));
            (
                mean.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                var.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
            )
        } else {
            (
                self.store.value(running_mean).data().to_vec(),
                self.store.value(running_var).data().to_vec(),
            )
        };
        if mean.len() != c {
            return Err(GradError::Shape(format!("batch_norm: {} statistics for {c} channels", mean.len())));
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.store.value(gamma).data();
        let bt = self.store.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                for ((o, xh), &v) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&xv[r]) {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = g[ch] * *xh + bt[ch];
                }
            }
        }
        self.buffer_updates.extend(pending);
        let gn = self.param(gamma);
        let bn = self.param(beta);
        let needs = self.ng(x) || self.ng(gn) || self.ng(bn);
        let batch_stats = self.training;
        Ok(self.push(
            Tensor::new(&[n, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma: gn,
                beta: bn,
                xhat: Tensor::new(&[n, c, h, w], xhat)?,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.ng(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.ng(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.ng(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    /// Elementwise sum; `b` may broadcast along any axis of size 1.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Elementwise product; `b` may broadcast along any axis of size 1.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(GradError::Shape(format!("max_pool2: input {h}x{w} too small")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (oy * 2 + dy) * w + ox * 2 + dx;
                            if src[idx] > best || (dy == 0 && dx == 0) {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = at as u32;
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| GradError::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &id in inputs {
            let (ni, ci, hi, wi) = self.value(id).dims4()?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(GradError::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.value(id).shape(),
                    self.value(first).shape()
                )));
            }
            total_c += ci;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for i in 0..n {
            for &id in inputs {
                let t = self.value(id);
                let ci = t.shape()[1];
                out.extend_from_slice(&t.data()[i * ci * plane..(i + 1) * ci * plane]);
            }
        }
        let needs = inputs.iter().any(|&id| self.ng(id));
        Ok(self.push(
            Tensor::new(&[n, total_c, h, w], out)?,
            Op::Concat { inputs: inputs.to_vec() },
            needs,
        ))
    }

    /// Mean over spatial axes, producing `(N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = (h * w) as f32;
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|s| s.iter().sum::<f32>() / plane)
            .collect();
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(&[n, c, 1, 1], out)?, Op::GlobalAvgPool(x), needs))
    }

    /// `(N, C*r*r, H, W) -> (N, C, r*H, r*W)` with
    /// `out[c, r*h + i, r*w + j] = in[c*r*r + i*r + j, h, w]`.
    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let out = pixel_shuffle(self.value(x), r)?;
        let needs = self.ng(x);
        Ok(self.push(out, Op::PixelShuffle { x, r }, needs))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: NodeId, rate: f32, rng: &mut dyn RngCore) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GradError::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let needs = self.ng(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; xv.len()];
        for i in 0..n {
            let base = i * c * plane;
            for p in 0..plane {
                let mut mx = f32::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(xv[base + ch * plane + p]);
                }
                let mut s = 0.0f32;
                for ch in 0..c {
                    let e = (xv[base + ch * plane + p] - mx).exp();
                    out[base + ch * plane + p] = e;
                    s += e;
                }
                for ch in 0..c {
                    out[base + ch * plane + p] /= s;
                }
            }
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::new(&[n, c, h, w], out)?, Op::Softmax(x), needs))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Scalar node whose value and gradient with respect to `x` are supplied
    /// by the caller. Used to attach analytically differentiated losses.
    pub fn external_scalar(&mut self, x: NodeId, value: f32, grad: Tensor) -> Result<NodeId> {
        if grad.shape() != self.value(x).shape() {
            return Err(GradError::Shape(format!(
                "external gradient {:?} does not match input {:?}",
                grad.shape(),
                self.value(x).shape()
            )));
        }
        let needs = self.ng(x);
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, needs))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(GradError::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        let mut leaves = Vec::new();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => leaves.push((NodeId(idx), g)),
                Op::Param(p) => accumulate(&mut params[p.0], g),
                Op::Conv2d { x, w, b, win } => {
                    self.conv2d_backward(&g, *x, *w, *b, *win, &mut grads)?;
                }
                Op::ConvTranspose2d { x, w, b, win } => {
                    self.conv_transpose2d_backward(&g, *x, *w, *b, *win, &mut grads)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, h, w) = xhat.dims4()?;
                    let plane = h * w;
                    let m = (n * plane) as f32;
                    let gd = g.data();
                    let xh = xhat.data();
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                            for (&gv, &xv) in gd[r.clone()].iter().zip(&xh[r]) {
                                dgamma[ch] += gv * xv;
                                dbeta[ch] += gv;
                            }
                        }
                    }
                    if self.ng(*x) {
                        let gam = self.value(*gamma).data();
                        let mut dx = vec![0.0f32; gd.len()];
                        for i in 0..n {
                            for ch in 0..c {
                                let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                                let k = gam[ch] * inv_std[ch];
                                if *batch_stats {
                                    let (sg, sgx) = (dbeta[ch] / m, dgamma[ch] / m);
                                    for ((d, &gv), &xv) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xh[r]) {
                                        *d = k * (gv - sg - xv * sgx);
                                    }
                                } else {
                                    for (d, &gv) in dx[r.clone()].iter_mut().zip(&gd[r]) {
                                        *d = k * gv;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], Tensor::new(g.shape(), dx)?);
                    }
                    if self.ng(*gamma) {
                        accumulate(&mut grads[gamma.0], Tensor::new(&[c], dgamma)?);
                    }
                    if self.ng(*beta) {
                        accumulate(&mut grads[beta.0], Tensor::new(&[c], dbeta)?);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let d = g.data().iter().zip(xv).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape(), d)?);
                }
                Op::Sigmoid(x) => {
                    let y = match &node.val {
                        Val::Own(t) => t.data(),
                        Val::Param(_) => unreachable!(),
                    };
                    let d = g.data().iter().zip(y).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape(), d)?);
                }
                Op::Scale(x, f) => {
                    accumulate(&mut grads[x.0], g.map(|v| v * f));
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        let gb = reduce_to_shape(&g, self.value(*b).shape())?;
                        accumulate(&mut grads[b.0], gb);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let ga = broadcast_binary(&g, self.value(*b), |x, y| x * y)?;
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.ng(*b) {
                        let prod = Tensor::new(
                            g.shape(),
                            g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect(),
                        )?;
                        let gb = reduce_to_shape(&prod, self.value(*b).shape())?;
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0f32; n * c * h * w];
                    for (o, (&gv, &at)) in g.data().iter().zip(argmax).enumerate() {
                        let p = o / (oh * ow);
                        dx[p * h * w + at as usize] += gv;
                    }
                    accumulate(&mut grads[x.0], Tensor::new(&[n, c, h, w], dx)?);
                }
                Op::Concat { inputs } => {
                    let (n, _, h, w) = g.dims4()?;
                    let plane = h * w;
                    let total_c = g.shape()[1];
                    let mut offset = 0;
                    for &id in inputs {
                        let ci = self.value(id).shape()[1];
                        if self.ng(id) {
                            let mut d = Vec::with_capacity(n * ci * plane);
                            for i in 0..n {
                                let start = (i * total_c + offset) * plane;
                                d.extend_from_slice(&g.data()[start..start + ci * plane]);
                            }
                            accumulate(&mut grads[id.0], Tensor::new(&[n, ci, h, w], d)?);
                        }
                        offset += ci;
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let plane = h * w;
                    let mut dx = vec![0.0f32; n * c * plane];
                    for (chunk, &gv) in dx.chunks_mut(plane).zip(g.data()) {
                        chunk.fill(gv / plane as f32);
                    }
                    accumulate(&mut grads[x.0], Tensor::new(&[n, c, h, w], dx)?);
                }
                Op::PixelShuffle { x, r } => {
                    accumulate(&mut grads[x.0], pixel_unshuffle(&g, *r)?);
                }
                Op::Dropout { x, mask } => {
                    let d = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape(), d)?);
                }
                Op::Softmax(x) => {
                    let y = match &node.val {
                        Val::Own(t) => t,
                        Val::Param(_) => unreachable!(),
                    };
                    let (n, c, h, w) = y.dims4()?;
                    let plane = h * w;
                    let (yd, gd) = (y.data(), g.data());
                    let mut dx = vec![0.0f32; yd.len()];
                    for i in 0..n {
                        let base = i * c * plane;
                        for p in 0..plane {
                            let dot: f32 = (0..c).map(|ch| gd[base + ch * plane + p] * yd[base + ch * plane + p]).sum();
                            for ch in 0..c {
                                let k = base + ch * plane + p;
                                dx[k] = yd[k] * (gd[k] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(y.shape(), dx)?);
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    accumulate(&mut grads[x.0], Tensor::full(self.value(*x).shape(), s));
                }
                Op::External { x, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads[x.0], grad.map(|v| v * s));
                }
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn conv2d_backward(
        &self,
        g: &Tensor,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        win: Window,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, _, k, _) = self.value(w).dims4()?;
        let (_, _, oh, ow) = g.dims4()?;
        let plane = oh * ow;
        let kk = c * k * k;
        let gd = g.data();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(b) = b.filter(|b| self.ng(*b)) {
            let mut db = vec![0.0f32; co];
            for (j, chunk) in gd.chunks(plane).enumerate() {
                db[j % co] += chunk.iter().sum::<f32>();
            }
            accumulate(&mut grads[b.0], Tensor::new(&[co], db)?);
        }
        let want_w = self.ng(w);
        let want_x = self.ng(x);
        let mut dw = if want_w { vec![0.0f32; co * kk] } else { Vec::new() };
        let mut dx = if want_x { vec![0.0f32; n * c * h * wd] } else { Vec::new() };
        let mut cols = vec![0.0f32; kk * plane];
        for i in 0..n {
            let gi = &gd[i * co * plane..(i + 1) * co * plane];
            if want_w {
                let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                let cols_ref: &[f32] = if win.is_pointwise() {
                    xi
                } else {
                    im2col(xi, c, h, wd, win, oh, ow, &mut cols);
                    &cols
                };
                // dW (co x kk) += G (co x plane) * cols^T (plane x kk)
                gemm(co, plane, kk, Mat::rows(gi, plane), Mat::transposed(cols_ref, plane), 1.0, &mut dw);
            }
            if want_x {
                let dxi = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
                if win.is_pointwise() {
                    gemm(kk, co, plane, Mat::transposed(wv, kk), Mat::rows(gi, plane), 1.0, dxi);
                } else {
                    gemm(kk, co, plane, Mat::transposed(wv, kk), Mat::rows(gi, plane), 0.0, &mut cols);
                    col2im(&cols, c, h, wd, win, oh, ow, dxi);
                }
            }
        }
        if want_w {
            accumulate(&mut grads[w.0], Tensor::new(self.value(w).shape(), dw)?);
        }
        if want_x {
            accumulate(&mut grads[x.0], Tensor::new(&[n, c, h, wd], dx)?);
        }
        Ok(())
    }

    fn conv_transpose2d_backward(
        &self,
        g: &Tensor,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        win: Window,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (_, co, k, _) = self.value(w).dims4()?;
        let (_, _, oh, ow) = g.dims4()?;
        let kk = co * k * k;
        let plane = h * wd;
        let gd = g.data();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(b) = b.filter(|b| self.ng(*b)) {
            let mut db = vec![0.0f32; co];
            for (j, chunk) in gd.chunks(oh * ow).enumerate() {
                db[j % co] += chunk.iter().sum::<f32>();
            }
            accumulate(&mut grads[b.0], Tensor::new(&[co], db)?);
        }
        let want_w = self.ng(w);
        let want_x = self.ng(x);
        let mut dw = if want_w { vec![0.0f32; ci * kk] } else { Vec::new() };
        let mut dx = if want_x { vec![0.0f32; n * ci * plane] } else { Vec::new() };
        let mut cols = vec![0.0f32; kk * plane];
        for i in 0..n {
            let gi = &gd[i * co * oh * ow..(i + 1) * co * oh * ow];
            im2col(gi, co, oh, ow, win, h, wd, &mut cols);
            if want_w {
                let xi = &xv[i * ci * plane..(i + 1) * ci * plane];
                // dW (ci x kk) += X (ci x plane) * cols^T (plane x kk)
                gemm(ci, plane, kk, Mat::rows(xi, plane), Mat::transposed(&cols, plane), 1.0, &mut dw);
            }
            if want_x {
                let dxi = &mut dx[i * ci * plane..(i + 1) * ci * plane];
                gemm(ci, kk, plane, Mat::rows(wv, kk), Mat::rows(&cols, plane), 1.0, dxi);
            }
        }
        if want_w {
            accumulate(&mut grads[w.0], Tensor::new(self.value(w).shape(), dw)?);
        }
        if want_x {
            accumulate(&mut grads[x.0], Tensor::new(&[n, ci, h, wd], dx)?);
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Row-major strides of `shape`, with zero stride on broadcast axes of size 1.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if shape.len() != target.len() {
        return Err(GradError::Shape(format!("cannot broadcast {shape:?} to {target:?}")));
    }
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        if shape[d] == target[d] {
            strides[d] = acc;
        } else if shape[d] == 1 {
            strides[d] = 0;
        } else {
            return Err(GradError::Shape(format!("cannot broadcast {shape:?} to {target:?}")));
        }
        acc *= shape[d];
    }
    Ok(strides)
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..total {
        f(flat, &idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let strides = broadcast_strides(b.shape(), a.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; a.len()];
    for_each_index(a.shape(), |flat, idx| {
        let bi: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[flat] = f(ad[flat], bd[bi]);
    });
    Tensor::new(a.shape(), out)
}

fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let strides = broadcast_strides(shape, g.shape())?;
    let mut out = vec![0.0f32; shape.iter().product()];
    let gd = g.data();
    for_each_index(g.shape(), |flat, idx| {
        let bi: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[bi] += gd[flat];
    });
    Tensor::new(shape, out)
}

pub(crate) fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, crr, h, w) = x.dims4()?;
    if r == 0 || crr % (r * r) != 0 {
        return Err(GradError::Shape(format!(
            "pixel_shuffle: {crr} channels not divisible by r^2 = {}",
            r * r
        )));
    }
    let c = crr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ch * r * r + i * r + j;
                    let src = &xd[((b * crr + src_c) * h) * w..((b * crr + src_c + 1) * h) * w];
                    for y in 0..h {
                        let row = ((b * c + ch) * oh + y * r + i) * ow;
                        for x_ in 0..w {
                            out[row + x_ * r + j] = src[y * w + x_];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`].
pub(crate) fn pixel_unshuffle(y: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = y.dims4()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(GradError::Shape(format!("pixel_unshuffle: {oh}x{ow} not divisible by {r}")));
    }
    let (h, w) = (oh / r, ow / r);
    let crr = c * r * r;
    let yd = y.data();
    let mut out = vec![0.0f32; yd.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = ch * r * r + i * r + j;
                    for yy in 0..h {
                        let row = ((b * c + ch) * oh + yy * r + i) * ow;
                        for x_ in 0..w {
                            out[((b * crr + dst_c) * h + yy) * w + x_] = yd[row + x_ * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, crr, h, w], out)
}
