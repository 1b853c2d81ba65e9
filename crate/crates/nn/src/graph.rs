use crate::params::{ParamId, ParamStore};
use crate::tensor::gemm;
use crate::{NnError, Result, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self::dilated(kernel, 1)
    }

    pub fn dilated(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
        }
    }

    fn out_len(&self, len: usize, kernel: usize) -> Result<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return Err(NnError::Shape(format!(
                "kernel span {span} does not fit input length {len} with padding {}",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    AddChannel {
        x: Var,
        bias: Var,
    },
    Silu(Var),
    Relu(Var),
    Scale(Var, f32),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f32, f32)>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f32>,
    },
    Upsample2x(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Concat(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Tape of operations evaluated eagerly on the CPU.
///
/// Parameters are borrowed from a [`ParamStore`] rather than copied. Whether
/// parameter gradients are tracked is fixed at construction; graph inputs opt
/// in individually through [`Graph::input`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    track_params: bool,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.nodes[var.0].take()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, track_params: bool) -> Self {
        Self {
            params,
            track_params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, var: Var) -> &Tensor {
        let node = &self.nodes[var.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(id)) => self.params.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.track_params,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    /// 2-D convolution, weights `[out, in, kh, kw]`, optional bias `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [batch, cin, h, wd] = xv.shape();
        let [cout, wcin, kh, kw] = wv.shape();
        if wcin != cin {
            return Err(NnError::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [1, cout, 1, 1] {
                return Err(NnError::Shape(format!(
                    "conv2d: bias {:?} for {cout} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let geo = ConvGeometry::new(cin, h, wd, kh, kw, spec)?;
        let n = geo.oh * geo.ow;
        let kdim = cin * kh * kw;
        let mut out = Tensor::zeros([batch, cout, geo.oh, geo.ow]);
        let mut col = vec![0.0f32; if geo.is_pointwise() { 0 } else { kdim * n }];
        for bi in 0..batch {
            let xi = xv.item(bi);
            let cols: &[f32] = if geo.is_pointwise() {
                xi
            } else {
                geo.im2col(xi, &mut col);
                &col
            };
            let oi = out.item_mut(bi);
            gemm(cout, kdim, n, 1.0, wv.data(), false, cols, false, 0.0, oi);
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (c, row) in oi.chunks_mut(n).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[c]);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Adds a per-channel vector `[B or 1, C, 1, 1]` to every spatial position.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let [b, c, h, w] = xv.shape();
        let [bb, bc, bh, bw] = bv.shape();
        if bc != c || bh != 1 || bw != 1 || (bb != 1 && bb != b) {
            return Err(NnError::Shape(format!(
                "add_channel: {:?} onto {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let hw = h * w;
        let mut out = xv.clone();
        for bi in 0..b {
            let src = if bb == 1 { 0 } else { bi };
            let bias = bv.item(src);
            for (ci, row) in out.item_mut(bi).chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[ci]);
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddChannel { x, bias }, needs))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.needs(x);
        self.push(out, Op::Silu(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).scale(s);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// Group normalisation with affine `gamma`, `beta` of shape `[1, C, 1, 1]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f32 = 1e-5;
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape();
        if groups == 0 || c % groups != 0 {
            return Err(NnError::Shape(format!(
                "group_norm: {c} channels into {groups} groups"
            )));
        }
        for v in [gamma, beta] {
            if self.value(v).shape() != [1, c, 1, 1] {
                return Err(NnError::Shape(format!(
                    "group_norm: affine {:?} for {c} channels",
                    self.value(v).shape()
                )));
            }
        }
        let g_data = self.value(gamma).data();
        let b_data = self.value(beta).data();
        let span = (c / groups) * h * w;
        let hw = h * w;
        let mut out = xv.clone();
        let mut stats = Vec::with_capacity(b * groups);
        for bi in 0..b {
            let item = out.item_mut(bi);
            for (gi, chunk) in item.chunks_mut(span).enumerate() {
                let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
                let var = chunk
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>()
                    / span as f64;
                let rstd = 1.0 / (var + EPS as f64).sqrt();
                let (mean, rstd) = (mean as f32, rstd as f32);
                stats.push((mean, rstd));
                for (local_c, row) in chunk.chunks_mut(hw).enumerate() {
                    let ch = gi * (c / groups) + local_c;
                    let (gm, bt) = (g_data[ch], b_data[ch]);
                    row.iter_mut().for_each(|v| *v = (*v - mean) * rstd * gm + bt);
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            needs,
        ))
    }

    /// Fixed per-channel `scale * x + shift` (frozen batch-norm).
    pub fn channel_affine(&mut self, x: Var, scale: &[f32], shift: &[f32]) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape();
        if scale.len() != c || shift.len() != c {
            return Err(NnError::Shape(format!(
                "channel_affine: {} / {} coefficients for {c} channels",
                scale.len(),
                shift.len()
            )));
        }
        let mut out = xv.clone();
        for bi in 0..b {
            for (ci, row) in out.item_mut(bi).chunks_mut(h * w).enumerate() {
                row.iter_mut().for_each(|v| *v = *v * scale[ci] + shift[ci]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            needs,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([b, c, 2 * h, 2 * w]);
        let (src, dst) = (xv.data(), out.data_mut());
        for plane in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[plane * 4 * h * w + y * 2 * w + xx] = src[plane * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample2x(x), needs)
    }

    /// Max pooling with `-inf` padding.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape();
        let spec = ConvSpec::strided(stride, padding);
        let (oh, ow) = (spec.out_len(h, kernel)?, spec.out_len(w, kernel)?);
        let mut out = Tensor::zeros([b, c, oh, ow]);
        let mut argmax = vec![0u32; b * c * oh * ow];
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    dst[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [ba, ca, h, w] = av.shape();
        let [bb, cb, hb, wb] = bv.shape();
        if ba != bb || h != hb || w != wb {
            return Err(NnError::Shape(format!(
                "concat: {:?} with {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for bi in 0..ba {
            data.extend_from_slice(av.item(bi));
            data.extend_from_slice(bv.item(bi));
        }
        let out = Tensor::from_vec([ba, ca + cb, h, w], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    /// Single-head dot-product self-attention over spatial positions.
    ///
    /// `q`, `k`, `v` are `[B, C, H, W]`; the output has the shape of `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        qv.check_same(kv, "attention q/k")?;
        qv.check_same(vv, "attention q/v")?;
        let [b, c, h, w] = qv.shape();
        let n = h * w;
        let scale = 1.0 / (c as f32).sqrt();
        let mut probs = vec![0.0f32; b * n * n];
        let mut out = Tensor::zeros([b, c, h, w]);
        for bi in 0..b {
            let p = &mut probs[bi * n * n..(bi + 1) * n * n];
            gemm(n, c, n, scale, qv.item(bi), true, kv.item(bi), false, 0.0, p);
            for row in p.chunks_mut(n) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            gemm(c, n, n, 1.0, vv.item(bi), false, p, true, 0.0, out.item_mut(bi));
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(out, Op::Attention { q, k, v, probs }, needs))
    }

    /// Reverse sweep seeded with `grad_out` at `out`.
    pub fn backward(&self, out: Var, grad_out: Tensor) -> Result<Grads> {
        self.value(out).check_same(&grad_out, "backward seed")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        grads[out.0] = Some(grad_out);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                }
                Op::Param(id) => accumulate(&mut param_grads[id.0], g)?,
                Op::Conv2d { x, w, b, spec } => {
                    self.conv_backward(&g, *x, *w, *b, *spec, &mut grads)?;
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone())?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g)?;
                    }
                }
                Op::AddChannel { x, bias } => {
                    if self.needs(*bias) {
                        let shape = self.value(*bias).shape();
                        let [b, c, h, w] = g.shape();
                        let mut gb = Tensor::zeros(shape);
                        for bi in 0..b {
                            let dst = if shape[0] == 1 { 0 } else { bi };
                            for ci in 0..c {
                                let s: f32 = g.item(bi)[ci * h * w..(ci + 1) * h * w].iter().sum();
                                gb.item_mut(dst)[ci] += s;
                            }
                        }
                        accumulate(&mut grads[bias.0], gb)?;
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads[x.0], g)?;
                    }
                }
                Op::Silu(x) => {
                    let gx = self.value(*x).zip_map(&g, |v, d| {
                        let s = sigmoid(v);
                        d * s * (1.0 + v * (1.0 - s))
                    })?;
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::Relu(x) => {
                    let gx = self.value(*x).zip_map(&g, |v, d| if v > 0.0 { d } else { 0.0 })?;
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::Scale(x, s) => accumulate(&mut grads[x.0], g.scale(*s))?,
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => self.group_norm_backward(&g, *x, *gamma, *beta, *groups, stats, &mut grads)?,
                Op::ChannelAffine { x, scale } => {
                    let [b, c, h, w] = g.shape();
                    let mut gx = g;
                    for bi in 0..b {
                        for (ci, row) in gx.item_mut(bi).chunks_mut(h * w).enumerate().take(c) {
                            row.iter_mut().for_each(|v| *v *= scale[ci]);
                        }
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::Upsample2x(x) => {
                    let shape = self.value(*x).shape();
                    let [b, c, h, w] = shape;
                    let mut gx = Tensor::zeros(shape);
                    let (src, dst) = (g.data(), gx.data_mut());
                    for plane in 0..b * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[plane * h * w + (y / 2) * w + xx / 2] +=
                                    src[plane * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let dst = gx.data_mut();
                    for (o, &src_idx) in argmax.iter().enumerate() {
                        dst[src_idx as usize] += g.data()[o];
                    }
                    accumulate(&mut grads[x.0], gx)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).channels();
                    let [bn, c, h, w] = g.shape();
                    let split = ca * h * w;
                    if self.needs(*a) {
                        let mut data = Vec::with_capacity(bn * split);
                        for bi in 0..bn {
                            data.extend_from_slice(&g.item(bi)[..split]);
                        }
                        accumulate(&mut grads[a.0], Tensor::from_vec([bn, ca, h, w], data)?)?;
                    }
                    if self.needs(*b) {
                        let mut data = Vec::with_capacity(bn * (c - ca) * h * w);
                        for bi in 0..bn {
                            data.extend_from_slice(&g.item(bi)[split..]);
                        }
                        accumulate(&mut grads[b.0], Tensor::from_vec([bn, c - ca, h, w], data)?)?;
                    }
                }
                Op::Attention { q, k, v, probs } => {
                    self.attention_backward(&g, *q, *k, *v, probs, &mut grads)?;
                }
            }
        }
        Ok(Grads {
            nodes: grads,
            params: param_grads,
        })
    }

    fn conv_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [batch, cin, h, wd] = xv.shape();
        let [cout, _, kh, kw] = wv.shape();
        let geo = ConvGeometry::new(cin, h, wd, kh, kw, spec)?;
        let n = geo.oh * geo.ow;
        let kdim = cin * kh * kw;

        if let Some(b) = b.filter(|b| self.needs(*b)) {
            let mut gb = Tensor::zeros([1, cout, 1, 1]);
            for bi in 0..batch {
                for (c, row) in g.item(bi).chunks(n).enumerate() {
                    gb.data_mut()[c] += row.iter().sum::<f32>();
                }
            }
            accumulate(&mut grads[b.0], gb)?;
        }
        let pointwise = geo.is_pointwise();
        let mut col = vec![0.0f32; if pointwise { 0 } else { kdim * n }];
        if self.needs(w) {
            let mut gw = Tensor::zeros(wv.shape());
            for bi in 0..batch {
                let cols: &[f32] = if pointwise {
                    xv.item(bi)
                } else {
                    geo.im2col(xv.item(bi), &mut col);
                    &col
                };
                gemm(cout, n, kdim, 1.0, g.item(bi), false, cols, true, 1.0, gw.data_mut());
            }
            accumulate(&mut grads[w.0], gw)?;
        }
        if self.needs(x) {
            let mut gx = Tensor::zeros(xv.shape());
            for bi in 0..batch {
                if pointwise {
                    gemm(kdim, cout, n, 1.0, wv.data(), true, g.item(bi), false, 0.0, gx.item_mut(bi));
                } else {
                    gemm(kdim, cout, n, 1.0, wv.data(), true, g.item(bi), false, 0.0, &mut col);
                    geo.col2im(&col, gx.item_mut(bi));
                }
            }
            accumulate(&mut grads[x.0], gx)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        g: &Tensor,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: &[(f32, f32)],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.shape();
        let hw = h * w;
        let cpg = c / groups;
        let span = cpg * hw;
        let gamma_v = self.value(gamma).data();
        let mut g_gamma = vec![0.0f32; c];
        let mut g_beta = vec![0.0f32; c];
        let mut gx = Tensor::zeros(xv.shape());
        for bi in 0..b {
            for gi in 0..groups {
                let (mean, rstd) = stats[bi * groups + gi];
                let off = gi * span;
                let xs = &xv.item(bi)[off..off + span];
                let gs = &g.item(bi)[off..off + span];
                let mut sum_d = 0.0f64;
                let mut sum_dx = 0.0f64;
                for (j, (&xval, &dy)) in xs.iter().zip(gs).enumerate() {
                    let ch = gi * cpg + j / hw;
                    let xhat = (xval - mean) * rstd;
                    g_gamma[ch] += dy * xhat;
                    g_beta[ch] += dy;
                    let d = (dy * gamma_v[ch]) as f64;
                    sum_d += d;
                    sum_dx += d * xhat as f64;
                }
                let nf = span as f64;
                let dst = &mut gx.item_mut(bi)[off..off + span];
                for (j, (&xval, &dy)) in xs.iter().zip(gs).enumerate() {
                    let ch = gi * cpg + j / hw;
                    let xhat = ((xval - mean) * rstd) as f64;
                    let d = (dy * gamma_v[ch]) as f64;
                    dst[j] = (rstd as f64 / nf * (nf * d - sum_d - xhat * sum_dx)) as f32;
                }
            }
        }
        if self.needs(gamma) {
            accumulate(&mut grads[gamma.0], Tensor::from_vec([1, c, 1, 1], g_gamma)?)?;
        }
        if self.needs(beta) {
            accumulate(&mut grads[beta.0], Tensor::from_vec([1, c, 1, 1], g_beta)?)?;
        }
        if self.needs(x) {
            accumulate(&mut grads[x.0], gx)?;
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        probs: &[f32],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [b, c, h, w] = qv.shape();
        let n = h * w;
        let scale = 1.0 / (c as f32).sqrt();
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(qv.shape());
        let mut gv = Tensor::zeros(qv.shape());
        let mut dp = vec![0.0f32; n * n];
        for bi in 0..b {
            let p = &probs[bi * n * n..(bi + 1) * n * n];
            let go = g.item(bi);
            gemm(c, n, n, 1.0, go, false, p, false, 0.0, gv.item_mut(bi));
            gemm(n, c, n, 1.0, go, true, vv.item(bi), false, 0.0, &mut dp);
            for (prow, drow) in p.chunks(n).zip(dp.chunks_mut(n)) {
                let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            gemm(c, n, n, scale, kv.item(bi), false, &dp, true, 0.0, gq.item_mut(bi));
            gemm(c, n, n, scale, qv.item(bi), false, &dp, false, 0.0, gk.item_mut(bi));
        }
        if self.needs(v) {
            accumulate(&mut grads[v.0], gv)?;
        }
        if self.needs(k) {
            accumulate(&mut grads[k.0], gk)?;
        }
        if self.needs(q) {
            accumulate(&mut grads[q.0], gq)?;
        }
        Ok(())
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            cin,
            h,
            w,
            kh,
            kw,
            oh: spec.out_len(h, kh)?,
            ow: spec.out_len(w, kw)?,
            spec,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Rows are `(c, ky, kx)`, columns output positions.
    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let n = self.oh * self.ow;
        let ConvSpec {
            stride,
            padding,
            dilation,
        } = self.spec;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * n;
                    let dst = &mut col[row..row + n];
                    for oy in 0..self.oh {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], x: &mut [f32]) {
        let n = self.oh * self.ow;
        let ConvSpec {
            stride,
            padding,
            dilation,
        } = self.spec;
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * n;
                    let src = &col[row..row + n];
                    for oy in 0..self.oh {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst_row[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
