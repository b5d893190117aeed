use std::collections::BTreeMap;

use rayon::prelude::*;

use super::gemm::{gemm, Layout};
use super::{ParamStore, Tensor};
use crate::error::{MmsError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

pub const BN_EPS: f32 = 1e-5;

/// Sigmoid outputs are kept strictly inside (0, 1) in f32.
pub const SIGMOID_FLOOR: f32 = 1e-7;
pub const SIGMOID_CEIL: f32 = 1.0 - 1e-7;

const NORM_FLOOR: f32 = 1e-12;

enum Op {
    Leaf,
    Param(String),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
        pad: usize,
        /// Per-image im2col buffers, empty for 1x1 convolutions or when gradients are off.
        cols: Vec<f32>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        /// Batch statistics feed into the normalization (train mode).
        batch_stats: bool,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    SliceChannels {
        x: NodeId,
        start: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2(NodeId),
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    L2Normalize {
        x: NodeId,
        inv_norms: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics observed by a train-mode normalization layer, to be folded into the
/// running statistics by the owner of the parameters.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub prefix: String,
    pub mean: Vec<f32>,
    pub var_unbiased: Vec<f32>,
}

/// Parameter gradients produced by [`Graph::backward`], keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn merge(&mut self, other: Gradients) {
        for (name, g) in other.params {
            match self.params.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.params.insert(name, g);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// A single-use tape of tensor operations with reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bn_observations: Vec<BnObservation>,
}

impl Graph {
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled,
            bn_observations: Vec::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation> {
        std::mem::take(&mut self.bn_observations)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let value = store.param(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    /// Stride-1 square convolution with zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize) -> Result<NodeId> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, wc, k, k2) = self.value(w).dims4()?;
        if wc != c || k != k2 {
            return Err(MmsError::Shape(format!(
                "conv weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(MmsError::Shape(format!(
                "conv kernel {k} larger than padded input {h}x{wd}"
            )));
        }
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let hw = ho * wo;
        let ckk = c * k * k;
        let direct = k == 1 && pad == 0;
        let keep_cols = self.grad_enabled && !direct;

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0f32; n * o * hw];
        let mut cols = if keep_cols { vec![0.0f32; n * ckk * hw] } else { Vec::new() };

        let in_per = c * h * wd;
        let run = |img: usize, out_n: &mut [f32], col: Option<&mut [f32]>| {
            let x_n = &xv[img * in_per..(img + 1) * in_per];
            let mut scratch;
            let col: &[f32] = if direct {
                x_n
            } else {
                match col {
                    Some(col) => {
                        im2col(x_n, c, h, wd, k, pad, ho, wo, col);
                        col
                    }
                    None => {
                        scratch = vec![0.0f32; ckk * hw];
                        im2col(x_n, c, h, wd, k, pad, ho, wo, &mut scratch);
                        &scratch
                    }
                }
            };
            gemm(
                o,
                ckk,
                hw,
                wv,
                Layout::row_major(ckk),
                col,
                Layout::row_major(hw),
                out_n,
                0.0,
            );
            if let Some(bias) = bias {
                for (oc, row) in out_n.chunks_mut(hw).enumerate() {
                    let bv = bias[oc];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        };

        if keep_cols {
            out.par_chunks_mut(o * hw)
                .zip(cols.par_chunks_mut(ckk * hw))
                .enumerate()
                .for_each(|(img, (out_n, col))| run(img, out_n, Some(col)));
        } else {
            out.par_chunks_mut(o * hw)
                .enumerate()
                .for_each(|(img, out_n)| run(img, out_n, None));
        }

        let value = Tensor::from_vec(&[n, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                k,
                pad,
                cols,
            },
        ))
    }

    /// Per-channel normalization over (N, H, W).
    ///
    /// With `running = None` batch statistics are used and recorded as a [`BnObservation`]
    /// under `prefix`; otherwise the given running `(mean, var)` are applied.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&Tensor, &Tensor)>,
        prefix: &str,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(MmsError::Shape(format!(
                "batch norm with {c} channels got gamma/beta of {}/{}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let mut observation = None;
        let (mean, var) = match running {
            Some((rm, rv)) => (rm.data().to_vec(), rv.data().to_vec()),
            None => {
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for img in 0..n {
                    for ch in 0..c {
                        let plane = &xv[(img * c + ch) * hw..(img * c + ch + 1) * hw];
                        let mut s = 0.0f64;
                        let mut s2 = 0.0f64;
                        for &v in plane {
                            s += v as f64;
                            s2 += (v as f64) * (v as f64);
                        }
                        mean[ch] += s;
                        sq[ch] += s2;
                    }
                }
                let mf = m as f64;
                let mean32: Vec<f32> = mean.iter().map(|s| (s / mf) as f32).collect();
                let var32: Vec<f32> = mean
                    .iter()
                    .zip(&sq)
                    .map(|(s, s2)| {
                        let mu = s / mf;
                        ((s2 / mf) - mu * mu).max(0.0) as f32
                    })
                    .collect();
                let unbiased = if m > 1 {
                    var32.iter().map(|v| v * m as f32 / (m - 1) as f32).collect()
                } else {
                    var32.clone()
                };
                observation = Some(BnObservation {
                    prefix: prefix.to_string(),
                    mean: mean32.clone(),
                    var_unbiased: unbiased,
                });
                (mean32, var32)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0f32; xv.len()];
        let mut xhat = if self.grad_enabled { vec![0.0f32; xv.len()] } else { Vec::new() };
        for img in 0..n {
            for ch in 0..c {
                let off = (img * c + ch) * hw;
                let (mu, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for i in off..off + hw {
                    let xh = (xv[i] - mu) * is;
                    out[i] = gc * xh + bc;
                    if !xhat.is_empty() {
                        xhat[i] = xh;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        self.bn_observations.extend(observation);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|a| *a = a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|a| {
            *a = (1.0 / (1.0 + (-*a).exp())).clamp(SIGMOID_FLOOR, SIGMOID_CEIL);
        });
        self.push(v, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(MmsError::Shape(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Channel-axis concatenation of rank-4 tensors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(MmsError::Shape(format!(
                    "channel concat of mismatched shapes {:?} and {:?}",
                    self.value(parts[0]).shape(),
                    self.value(p).shape()
                )));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for img in 0..n {
            for (&p, &pc) in parts.iter().zip(&chans) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[img * pc * hw..(img + 1) * pc * hw]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return Err(MmsError::Shape(format!(
                "channel slice {start}..{} of {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for img in 0..n {
            out.extend_from_slice(&d[(img * c + start) * hw..(img * c + start + len) * hw]);
        }
        let value = Tensor::from_vec(&[n, len, h, w], out)?;
        Ok(self.push(value, Op::SliceChannels { x, start }))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(MmsError::Shape(format!(
                "max pooling needs even spatial size, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let d = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = if self.grad_enabled { vec![0u32; out.len()] } else { Vec::new() };
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if d[cand] > d[best] {
                            best = cand;
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    out[o] = d[best];
                    if !argmax.is_empty() {
                        argmax[o] = best as u32;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    /// 2x nearest-neighbour upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let d = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho {
                let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut dst[y * wo..(y + 1) * wo];
                for (x2, v) in drow.iter_mut().enumerate() {
                    *v = srow[x2 / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample2(x)))
    }

    /// `[N, C, H, W]` to `[N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let d = self.value(x).data();
        let out: Vec<f32> = (0..n * c)
            .map(|p| d[p * hw..(p + 1) * hw].iter().sum::<f32>() / hw as f32)
            .collect();
        let value = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// `x: [N, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).numel() != ws[0] {
            return Err(MmsError::Shape(format!(
                "linear layer {ws:?} does not fit input {xs:?}"
            )));
        }
        let (n, inp, outd) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * outd];
        gemm(
            n,
            inp,
            outd,
            self.value(x).data(),
            Layout::row_major(inp),
            self.value(w).data(),
            Layout::transposed(inp),
            &mut out,
            0.0,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(outd) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::from_vec(&[n, outd], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Unit-normalizes every length-C fiber of a `[N, C]` or `[N, C, H, W]` tensor.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, hw) = fiber_layout(&shape)?;
        let mut v = self.value(x).clone();
        let d = v.data_mut();
        let mut inv_norms = vec![0.0f32; n * hw];
        for img in 0..n {
            for s in 0..hw {
                let mut sq = 0.0f32;
                for ch in 0..c {
                    let a = d[(img * c + ch) * hw + s];
                    sq += a * a;
                }
                let norm = sq.sqrt();
                if norm < NORM_FLOOR {
                    // a vanished fiber becomes a fixed unit vector and passes no gradient
                    for ch in 0..c {
                        d[(img * c + ch) * hw + s] = 1.0 / (c as f32).sqrt();
                    }
                    continue;
                }
                let inv = 1.0 / norm;
                inv_norms[img * hw + s] = inv;
                for ch in 0..c {
                    d[(img * c + ch) * hw + s] *= inv;
                }
            }
        }
        Ok(self.push(v, Op::L2Normalize { x, inv_norms }))
    }

    /// Reverse-mode sweep seeded with output gradients; returns gradients of every
    /// parameter node reached.
    pub fn backward(&self, seeds: &[(NodeId, &Tensor)]) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(MmsError::Parameter(
                "backward called on a graph built without gradients".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.shape() != self.value(*id).shape() {
                return Err(MmsError::Shape(format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape(),
                    self.value(*id).shape()
                )));
            }
            accumulate(&mut grads, *id, (*g).clone());
        }

        let mut out = Gradients::default();
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    out.merge(Gradients {
                        params: BTreeMap::from([(name.clone(), dy)]),
                    });
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    k,
                    pad,
                    cols,
                } => {
                    let (dx, dw, db) = self.conv_backward(*x, *w, *k, *pad, cols, &dy)?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (n, c, h, w) = dy.dims4()?;
                    let hw = h * w;
                    let m = (n * hw) as f32;
                    let dyv = dy.data();
                    let g = self.value(*gamma).data();
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * hw;
                            for i in off..off + hw {
                                dbeta[ch] += dyv[i];
                                dgamma[ch] += dyv[i] * xhat[i];
                            }
                        }
                    }
                    let mut dx = vec![0.0f32; dyv.len()];
                    for img in 0..n {
                        for ch in 0..c {
                            let off = (img * c + ch) * hw;
                            let scale = g[ch] * inv_std[ch];
                            if *batch_stats {
                                let (sb, sg) = (dbeta[ch] / m, dgamma[ch] / m);
                                for i in off..off + hw {
                                    dx[i] = scale * (dyv[i] - sb - xhat[i] * sg);
                                }
                            } else {
                                for i in off..off + hw {
                                    dx[i] = scale * dyv[i];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(dy.shape(), dx)?);
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::from_vec(&[c], dbeta)?);
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, dy.clone());
                    accumulate(&mut grads, *a, dy);
                }
                Op::Concat(parts) => {
                    let (n, _, h, w) = dy.dims4()?;
                    let hw = h * w;
                    let total = dy.shape()[1];
                    let mut start = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for img in 0..n {
                            let off = (img * total + start) * hw;
                            d.extend_from_slice(&dy.data()[off..off + pc * hw]);
                        }
                        accumulate(&mut grads, p, Tensor::from_vec(&[n, pc, h, w], d)?);
                        start += pc;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let len = dy.shape()[1];
                    let hw = h * w;
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for img in 0..n {
                        let dst = (img * c + start) * hw;
                        let src = img * len * hw;
                        dx.data_mut()[dst..dst + len * hw]
                            .copy_from_slice(&dy.data()[src..src + len * hw]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src as usize] += dy.data()[o];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let wo = 2 * w;
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let d = dx.data_mut();
                    let g = dy.data();
                    for plane in 0..n * c {
                        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                        for y in 0..2 * h {
                            for x2 in 0..wo {
                                dst[(y / 2) * w + x2 / 2] += src[y * wo + x2];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let hw = h * w;
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for (p, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                        let g = dy.data()[p] / hw as f32;
                        chunk.iter_mut().for_each(|v| *v = g);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (n, inp) = (xs[0], xs[1]);
                    let outd = self.value(*w).shape()[0];
                    let mut dx = vec![0.0f32; n * inp];
                    gemm(
                        n,
                        outd,
                        inp,
                        dy.data(),
                        Layout::row_major(outd),
                        self.value(*w).data(),
                        Layout::row_major(inp),
                        &mut dx,
                        0.0,
                    );
                    let mut dw = vec![0.0f32; outd * inp];
                    gemm(
                        outd,
                        n,
                        inp,
                        dy.data(),
                        Layout::transposed(outd),
                        self.value(*x).data(),
                        Layout::row_major(inp),
                        &mut dw,
                        0.0,
                    );
                    let mut db = vec![0.0f32; outd];
                    for row in dy.data().chunks(outd) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, inp], dx)?);
                    accumulate(&mut grads, *w, Tensor::from_vec(&[outd, inp], dw)?);
                    accumulate(&mut grads, *b, Tensor::from_vec(&[outd], db)?);
                }
                Op::L2Normalize { x, inv_norms } => {
                    let (n, c, hw) = fiber_layout(dy.shape())?;
                    let y = node.value.data();
                    let g = dy.data();
                    let mut dx = vec![0.0f32; g.len()];
                    for img in 0..n {
                        for s in 0..hw {
                            let mut dot = 0.0f32;
                            for ch in 0..c {
                                let i = (img * c + ch) * hw + s;
                                dot += y[i] * g[i];
                            }
                            let inv = inv_norms[img * hw + s];
                            for ch in 0..c {
                                let i = (img * c + ch) * hw + s;
                                dx[i] = (g[i] - y[i] * dot) * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(dy.shape(), dx)?);
                }
            }
        }
        Ok(out)
    }

    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        k: usize,
        pad: usize,
        cols: &[f32],
        dy: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let xt = self.value(x);
        let (n, c, h, wd) = xt.dims4()?;
        let (_, o, ho, wo) = dy.dims4()?;
        let hw = ho * wo;
        let ckk = c * k * k;
        let direct = k == 1 && pad == 0;
        let wv = self.value(w).data();
        let in_per = c * h * wd;

        let per_image: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
            .into_par_iter()
            .map(|img| {
                let dy_n = &dy.data()[img * o * hw..(img + 1) * o * hw];
                let col: &[f32] = if direct {
                    &xt.data()[img * in_per..(img + 1) * in_per]
                } else {
                    &cols[img * ckk * hw..(img + 1) * ckk * hw]
                };
                let mut dw = vec![0.0f32; o * ckk];
                gemm(
                    o,
                    hw,
                    ckk,
                    dy_n,
                    Layout::row_major(hw),
                    col,
                    Layout::transposed(hw),
                    &mut dw,
                    0.0,
                );
                let mut dcol = vec![0.0f32; ckk * hw];
                gemm(
                    ckk,
                    o,
                    hw,
                    wv,
                    Layout::transposed(ckk),
                    dy_n,
                    Layout::row_major(hw),
                    &mut dcol,
                    0.0,
                );
                let dx_n = if direct {
                    dcol
                } else {
                    let mut dx_n = vec![0.0f32; in_per];
                    col2im(&dcol, c, h, wd, k, pad, ho, wo, &mut dx_n);
                    dx_n
                };
                (dx_n, dw)
            })
            .collect();

        let mut dx = Vec::with_capacity(n * in_per);
        let mut dw = vec![0.0f32; o * ckk];
        for (dx_n, dw_n) in per_image {
            dx.extend_from_slice(&dx_n);
            dw.iter_mut().zip(&dw_n).for_each(|(a, b)| *a += b);
        }
        let mut db = vec![0.0f32; o];
        for img in 0..n {
            for (oc, acc) in db.iter_mut().enumerate() {
                let off = (img * o + oc) * hw;
                *acc += dy.data()[off..off + hw].iter().sum::<f32>();
            }
        }
        Ok((
            Tensor::from_vec(xt.shape(), dx)?,
            Tensor::from_vec(&[o, c, k, k], dw)?,
            Tensor::from_vec(&[o], db)?,
        ))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn fiber_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(MmsError::Shape(format!(
            "fiber normalization needs rank 2 or 4, got {shape:?}"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f32],
) {
    let hw = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ch * k + ky) * k + kx) * hw..((ch * k + ky) * k + kx + 1) * hw];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f32],
) {
    let hw = ho * wo;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ch * k + ky) * k + kx) * hw..((ch * k + ky) * k + kx + 1) * hw];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}
