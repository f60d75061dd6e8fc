//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output and whatever it needs for
//! the backward pass. [`Graph::backward`] walks the tape in exact reverse order
//! of recording and accumulates gradients additively.

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeometry};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{idx5, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Epsilon of the spatial standardization inside the spatial gate variant.
pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand `(n, c)` broadcast over space.
    ChannelVector,
    /// Right operand `(n, 1, d, h, w)` broadcast over channels.
    SpatialMap,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    ConvTranspose3d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Standardize { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    SumChannels(Var),
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Mul { a: Var, b: Var, bc: Broadcast },
    Add { a: Var, b: Var, bc: Broadcast },
    Dense { z: Var, w: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f64>,
}

pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf whose gradient is written back by
    /// [`Graph::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry { stride, padding };
        let y = conv::conv3d_forward(self.value(x), self.value(w), self.value(b), geom)?;
        self.push(y, Op::Conv3d { x, w, b, geom })
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = conv::conv_transpose3d_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::ConvTranspose3d { x, w, b })
    }

    /// 2x2x2 max pooling; ties go to the lowest linear index.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let dims = xv.dims5()?;
        let [n, c, d, h, w] = dims;
        for (axis, &s) in [d, h, w].iter().enumerate() {
            if s % 2 != 0 {
                return Err(Error::Shape(format!(
                    "maxpool3d needs even spatial dims; axis {} has size {s} (pad to even upstream)",
                    axis + 2
                )));
            }
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let odims = [n, c, od, oh, ow];
        let mut out = vec![0.0; n * c * od * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let data = xv.data();
        for ni in 0..n {
            for ci in 0..c {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut best = usize::MAX;
                            let mut best_v = f64::NEG_INFINITY;
                            for dz in 0..2 {
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let i = idx5(dims, ni, ci, 2 * z + dz, 2 * y + dy, 2 * xx + dx);
                                        if best == usize::MAX || data[i] > best_v {
                                            best = i;
                                            best_v = data[i];
                                        }
                                    }
                                }
                            }
                            let o = idx5(odims, ni, ci, z, y, xx);
                            out[o] = best_v;
                            argmax[o] = best;
                        }
                    }
                }
            }
        }
        let y = Tensor::from_vec(&odims, out)?;
        self.push(y, Op::MaxPool { x, argmax })
    }

    pub fn maxpool_argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxPool { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Batch normalization over `(n, d, h, w)` per channel.
    pub fn batchnorm3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Shape(format!(
                    "batchnorm3d {name} must have shape [{c}], got {:?}",
                    self.value(v).shape()
                )));
            }
        }
        let plane = d * h * w;
        let count = (n * plane) as f64;
        let xd = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        let o = (ni * c + ci) * plane;
                        s += xd[o..o + plane].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for ni in 0..n {
                        let o = (ni * c + ci) * plane;
                        ss += xd[o..o + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = ss / count;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!(
                        "batchnorm3d running stats must have length {c}"
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let o = (ni * c + ci) * plane;
                for i in o..o + plane {
                    let xh = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        let train = stats.is_some();
        let y = Tensor::from_vec(&[n, c, d, h, w], out)?;
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((v, stats))
    }

    /// Zero-mean, unit-variance standardization over space, per sample and channel.
    pub fn standardize_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let plane = d * h * w;
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; n * c];
        for (k, inv) in inv_std.iter_mut().enumerate() {
            let o = k * plane;
            let row = &xd[o..o + plane];
            let m = row.iter().sum::<f64>() / plane as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
            *inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
            for (dst, v) in xhat[o..o + plane].iter_mut().zip(row) {
                *dst = (v - m) * *inv;
            }
        }
        let y = Tensor::from_vec(&[n, c, d, h, w], xhat.clone())?;
        self.push(y, Op::Standardize { x, xhat, inv_std })
    }

    /// `gamma[c] * x + beta[c]` per channel.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!("channel_affine parameters must have shape [{c}]")));
        }
        let plane = d * h * w;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = self.value(x).data().to_vec();
        for (k, chunk) in out.chunks_mut(plane).enumerate() {
            let ci = k % c;
            chunk.iter_mut().for_each(|v| *v = g[ci] * *v + b[ci]);
        }
        let y = Tensor::from_vec(&[n, c, d, h, w], out)?;
        self.push(y, Op::ChannelAffine { x, gamma, beta })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    /// `(n, c, d, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let plane = d * h * w;
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let y = Tensor::from_vec(&[n, c], out)?;
        self.push(y, Op::GlobalAvgPool(x))
    }

    /// `(n, c, d, h, w) -> (n, 1, d, h, w)`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let plane = d * h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * plane];
        for ni in 0..n {
            let dst = &mut out[ni * plane..(ni + 1) * plane];
            for ci in 0..c {
                let o = (ni * c + ci) * plane;
                for (a, b) in dst.iter_mut().zip(&xd[o..o + plane]) {
                    *a += b;
                }
            }
        }
        let y = Tensor::from_vec(&[n, 1, d, h, w], out)?;
        self.push(y, Op::SumChannels(x))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_channels needs at least one input".into()));
        }
        let [n, _, d, h, w] = self.value(parts[0]).dims5()?;
        let plane = d * h * w;
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, pd, ph, pw] = self.value(p).dims5()?;
            if (pn, pd, ph, pw) != (n, d, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: shape {:?} incompatible with {:?}",
                    self.value(p).shape(),
                    self.value(parts[0]).shape()
                )));
            }
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * plane);
        for ni in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                out.extend_from_slice(&pv.data()[ni * pc * plane..(ni + 1) * pc * plane]);
            }
        }
        let y = Tensor::from_vec(&[n, total_c, d, h, w], out)?;
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "slice_channels [{start}, {}) out of range for {c} channels",
                start + len
            )));
        }
        let plane = d * h * w;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            let o = (ni * c + start) * plane;
            out.extend_from_slice(&xd[o..o + len * plane]);
        }
        let y = Tensor::from_vec(&[n, len, d, h, w], out)?;
        self.push(y, Op::SliceChannels { x, start })
    }

    /// Splits channels into `groups` equal contiguous groups.
    pub fn split_groups(&mut self, x: Var, groups: usize) -> Result<Vec<Var>> {
        let c = self.value(x).dims5()?[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!(
                "split_groups: {c} channels not divisible into {groups} groups"
            )));
        }
        let size = c / groups;
        (0..groups)
            .map(|g| self.slice_channels(x, g * size, size))
            .collect()
    }

    fn broadcast_kind(&self, a: Var, b: Var, what: &str) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if sa.len() == 5 && sb.len() == 2 && sb == [sa[0], sa[1]] {
            return Ok(Broadcast::ChannelVector);
        }
        if sa.len() == 5 && sb.len() == 5 && sb[1] == 1 && sa[0] == sb[0] && sa[2..] == sb[2..] {
            return Ok(Broadcast::SpatialMap);
        }
        Err(Error::Shape(format!("{what}: cannot combine shapes {sa:?} and {sb:?}")))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind(a, b, "mul")?;
        let y = elementwise(self.value(a), self.value(b), bc, |x, y| x * y);
        self.push(y, Op::Mul { a, b, bc })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind(a, b, "add")?;
        if bc == Broadcast::SpatialMap {
            return Err(Error::Shape("add: spatial-map broadcast not supported".into()));
        }
        let y = elementwise(self.value(a), self.value(b), bc, |x, y| x + y);
        self.push(y, Op::Add { a, b, bc })
    }

    /// `z (n, k) · W^T (m, k) + b (m) -> (n, m)`.
    pub fn dense(&mut self, z: Var, w: Var, b: Var) -> Result<Var> {
        let (zs, ws, bs) = (
            self.value(z).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if zs.len() != 2 || ws.len() != 2 || ws[1] != zs[1] || bs != [ws[0]] {
            return Err(Error::Shape(format!(
                "dense: input {zs:?}, weight {ws:?}, bias {bs:?} incompatible"
            )));
        }
        let (n, k, m) = (zs[0], zs[1], ws[0]);
        let (zd, wd, bd) = (self.value(z).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = bd[j];
                for q in 0..k {
                    acc += wd[j * k + q] * zd[i * k + q];
                }
                out[i * m + j] = acc;
            }
        }
        let y = Tensor::from_vec(&[n, m], out)?;
        self.push(y, Op::Dense { z, w, b })
    }

    /// Reverse sweep from `root` seeded with `seed` (same shape as the root value).
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::Shape(format!(
                "backward seed shape {:?} does not match root {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Adds gradients of parameter leaves into the store's gradient buffers.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                let p = store.get_mut(*id);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
    }

    fn backward_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv3d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv3d_backward(self.value(*x), self.value(*w), gy, *geom)?;
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::ConvTranspose3d { x, w, b } => {
                let (gx, gw, gb) = conv::conv_transpose3d_backward(self.value(*x), self.value(*w), gy)?;
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let gd = gx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    gd[src] += gy.data()[o];
                }
                accumulate(grads, *x, gx);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let [n, c, d, h, w] = self.value(*x).dims5()?;
                let plane = d * h * w;
                let count = (n * plane) as f64;
                let g = self.value(*gamma).data();
                let gyd = gy.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let o = (ni * c + ci) * plane;
                        for k in o..o + plane {
                            sum_dy[ci] += gyd[k];
                            sum_dy_xhat[ci] += gyd[k] * xhat[k];
                        }
                    }
                }
                let mut gx = vec![0.0; gyd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let o = (ni * c + ci) * plane;
                        let scale = g[ci] * inv_std[ci];
                        for k in o..o + plane {
                            gx[k] = if *train {
                                scale / count * (count * gyd[k] - sum_dy[ci] - xhat[k] * sum_dy_xhat[ci])
                            } else {
                                scale * gyd[k]
                            };
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[n, c, d, h, w], gx)?);
                accumulate(grads, *gamma, Tensor::from_vec(&[c], sum_dy_xhat)?);
                accumulate(grads, *beta, Tensor::from_vec(&[c], sum_dy)?);
            }
            Op::Standardize { x, xhat, inv_std } => {
                let shape = self.value(*x).shape().to_vec();
                let plane: usize = shape[2..].iter().product();
                let count = plane as f64;
                let gyd = gy.data();
                let mut gx = vec![0.0; gyd.len()];
                for (k, &inv) in inv_std.iter().enumerate() {
                    let o = k * plane;
                    let s: f64 = gyd[o..o + plane].iter().sum();
                    let sx: f64 = gyd[o..o + plane].iter().zip(&xhat[o..o + plane]).map(|(a, b)| a * b).sum();
                    for j in o..o + plane {
                        gx[j] = inv / count * (count * gyd[j] - s - xhat[j] * sx);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&shape, gx)?);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xv = self.value(*x);
                let [_, c, d, h, w] = xv.dims5()?;
                let plane = d * h * w;
                let g = self.value(*gamma).data();
                let mut gx = gy.clone();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (k, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                    let ci = k % c;
                    let xs = &xv.data()[k * plane..(k + 1) * plane];
                    for (v, xval) in chunk.iter_mut().zip(xs) {
                        gg[ci] += *v * xval;
                        gb[ci] += *v;
                        *v *= g[ci];
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, Tensor::from_vec(&[c], gg)?);
                accumulate(grads, *beta, Tensor::from_vec(&[c], gb)?);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = gy.clone();
                for (g, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let mut gx = gy.clone();
                for (g, &s) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *g *= s * (1.0 - s);
                }
                accumulate(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let plane: usize = shape[2..].iter().product();
                let mut gx = Tensor::zeros(&shape);
                for (chunk, &g) in gx.data_mut().chunks_mut(plane).zip(gy.data()) {
                    chunk.fill(g / plane as f64);
                }
                accumulate(grads, *x, gx);
            }
            Op::SumChannels(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let plane: usize = shape[2..].iter().product();
                let mut gx = Tensor::zeros(&shape);
                for ni in 0..n {
                    let src = &gy.data()[ni * plane..(ni + 1) * plane];
                    for ci in 0..c {
                        let o = (ni * c + ci) * plane;
                        gx.data_mut()[o..o + plane].copy_from_slice(src);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let [n, _, d, h, w] = gy.dims5()?;
                let plane = d * h * w;
                let total_c = gy.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    let mut gp = Vec::with_capacity(n * pc * plane);
                    for ni in 0..n {
                        let o = (ni * total_c + offset) * plane;
                        gp.extend_from_slice(&gy.data()[o..o + pc * plane]);
                    }
                    accumulate(grads, p, Tensor::from_vec(&[n, pc, d, h, w], gp)?);
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let [n, len, d, h, w] = gy.dims5()?;
                let c = shape[1];
                let plane = d * h * w;
                let mut gx = Tensor::zeros(&shape);
                for ni in 0..n {
                    let o = (ni * c + start) * plane;
                    gx.data_mut()[o..o + len * plane]
                        .copy_from_slice(&gy.data()[ni * len * plane..(ni + 1) * len * plane]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = elementwise(gy, bv, *bc, |g, y| g * y);
                let gb_full = elementwise(gy, bv, *bc, |g, _| g);
                let prod = Tensor::from_vec(
                    gy.shape(),
                    gb_full.data().iter().zip(av.data()).map(|(g, x)| g * x).collect(),
                )?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, reduce_broadcast(&prod, bv.shape(), *bc));
            }
            Op::Add { a, b, bc } => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, reduce_broadcast(gy, self.value(*b).shape(), *bc));
            }
            Op::Dense { z, w, b } => {
                let (zs, ws) = (self.value(*z).shape(), self.value(*w).shape());
                let (n, k, m) = (zs[0], zs[1], ws[0]);
                let (zd, wd, gd) = (self.value(*z).data(), self.value(*w).data(), gy.data());
                let mut gz = vec![0.0; n * k];
                let mut gw = vec![0.0; m * k];
                let mut gb = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let g = gd[i * m + j];
                        gb[j] += g;
                        for q in 0..k {
                            gz[i * k + q] += g * wd[j * k + q];
                            gw[j * k + q] += g * zd[i * k + q];
                        }
                    }
                }
                accumulate(grads, *z, Tensor::from_vec(&[n, k], gz)?);
                accumulate(grads, *w, Tensor::from_vec(&[m, k], gw)?);
                accumulate(grads, *b, Tensor::from_vec(&[m], gb)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Applies `f(a, broadcast(b))` with `a`'s shape.
fn elementwise(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = a.shape().to_vec();
    let data = match bc {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::ChannelVector => {
            let plane: usize = shape[2..].iter().product();
            a.data()
                .chunks(plane)
                .zip(b.data())
                .flat_map(|(chunk, &y)| chunk.iter().map(move |&x| (x, y)))
                .map(|(x, y)| f(x, y))
                .collect()
        }
        Broadcast::SpatialMap => {
            let c = shape[1];
            let plane: usize = shape[2..].iter().product();
            let mut out = Vec::with_capacity(a.len());
            for (k, chunk) in a.data().chunks(plane).enumerate() {
                let ni = k / c;
                let map = &b.data()[ni * plane..(ni + 1) * plane];
                out.extend(chunk.iter().zip(map).map(|(&x, &y)| f(x, y)));
            }
            out
        }
    };
    Tensor::from_vec(&shape, data).expect("shape preserved")
}

/// Sums a full-shape gradient back down to the broadcast operand's shape.
fn reduce_broadcast(g: &Tensor, target: &[usize], bc: Broadcast) -> Tensor {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::ChannelVector => {
            let plane: usize = g.shape()[2..].iter().product();
            let data = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
            Tensor::from_vec(target, data).expect("channel vector shape")
        }
        Broadcast::SpatialMap => {
            let (n, c) = (g.shape()[0], g.shape()[1]);
            let plane: usize = g.shape()[2..].iter().product();
            let mut out = vec![0.0; n * plane];
            for ni in 0..n {
                for ci in 0..c {
                    let o = (ni * c + ci) * plane;
                    for (d, v) in out[ni * plane..(ni + 1) * plane].iter_mut().zip(&g.data()[o..o + plane]) {
                        *d += v;
                    }
                }
            }
            Tensor::from_vec(target, out).expect("spatial map shape")
        }
    }
}

/// Logistic function, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "parameter",
        Op::Conv3d { .. } => "conv3d",
        Op::ConvTranspose3d { .. } => "conv_transpose3d",
        Op::MaxPool { .. } => "maxpool3d",
        Op::BatchNorm { .. } => "batchnorm3d",
        Op::Standardize { .. } => "standardize_spatial",
        Op::ChannelAffine { .. } => "channel_affine",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::SumChannels(_) => "sum_channels",
        Op::Concat(_) => "concat_channels",
        Op::SliceChannels { .. } => "slice_channels",
        Op::Mul { .. } => "mul",
        Op::Add { .. } => "add",
        Op::Dense { .. } => "dense",
    }
}
