use crate::error::{Error, Result};
use crate::tensor::{pixels_and_channels, Scalar, Tensor};

use super::conv::{self, conv_geometry, ConvScratch};
use super::{grad_slot, image_dims, Graph, Node, Op, Var};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the loss.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running per-channel mean and (unbiased) variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

fn stable_sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    /// Same-padded stride-1 convolution of an `(h,w,c)` or `(b,h,w,c)` input
    /// with a `(k,k,c,m)` kernel and `(m)` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.index_of(input)?, self.index_of(kernel)?, self.index_of(bias)?);
        let (x, w, b) = (&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value);
        let geom = conv_geometry(x.shape(), w.shape(), b.shape())?;
        let data = conv::forward(x, w, b, &geom, &mut self.scratch);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = geom.m;
        let value = Tensor::new(shape, data)?;
        self.record(
            Op::Conv2d {
                input: xi,
                kernel: wi,
                bias: bi,
            },
            value,
        )
    }

    /// Concatenates along the channel axis, blocks in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_channels needs at least one part"))?;
        let idx: Vec<usize> = parts.iter().map(|&p| self.index_of(p)).collect::<Result<_>>()?;
        let lead = {
            let s = self.nodes[self.index_of(first)?].value.shape();
            s[..s.len() - 1].to_vec()
        };
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(format!(
                    "concat_channels spatial mismatch: {:?} vs {:?}",
                    self.nodes[idx[0]].value.shape(),
                    s
                )));
            }
            total += s[s.len() - 1];
        }
        let pixels: usize = lead.iter().product();
        let mut data = Vec::with_capacity(pixels * total);
        for p in 0..pixels {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let c = v.channels();
                data.extend_from_slice(&v.data()[p * c..(p + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        self.record(Op::Concat { parts: idx }, value)
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let xi = self.index_of(input)?;
        let x = &self.nodes[xi].value;
        let (b, h, w, c) = image_dims(x.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "max_pool2 needs even spatial dims, got {h}×{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.data();
        let mut data = Vec::with_capacity(b * oh * ow * c);
        let mut argmax = Vec::with_capacity(b * oh * ow * c);
        for n in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let at = |dy: usize, dx: usize| {
                            ((n * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch
                        };
                        let mut best = at(0, 0);
                        for pos in [at(0, 1), at(1, 0), at(1, 1)] {
                            if xs[pos] > xs[best] {
                                best = pos;
                            }
                        }
                        data.push(xs[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let shape = if x.rank() == 3 {
            vec![oh, ow, c]
        } else {
            vec![b, oh, ow, c]
        };
        let value = Tensor::new(shape, data)?;
        self.record(Op::MaxPool2 { input: xi, argmax }, value)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let xi = self.index_of(input)?;
        let x = &self.nodes[xi].value;
        let (b, h, w, c) = image_dims(x.shape())?;
        let (oh, ow) = (2 * h, 2 * w);
        let xs = x.data();
        let mut data = Vec::with_capacity(b * oh * ow * c);
        for n in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let src = ((n * h + y / 2) * w + xx / 2) * c;
                    data.extend_from_slice(&xs[src..src + c]);
                }
            }
        }
        let shape = if x.rank() == 3 {
            vec![oh, ow, c]
        } else {
            vec![b, oh, ow, c]
        };
        let value = Tensor::new(shape, data)?;
        self.record(Op::Upsample2 { input: xi }, value)
    }

    /// Per-channel batch normalization over all leading axes.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.index_of(input)?, self.index_of(gamma)?, self.index_of(beta)?);
        let x = &self.nodes[xi].value;
        let (pixels, c) = pixels_and_channels(x.shape());
        if pixels == 0 {
            return Err(Error::dim("batch_norm on an empty batch"));
        }
        let (gv, bv) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        if gv.len() != c || bv.len() != c || stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim(format!(
                "batch_norm over {c} channels got gamma {}, beta {}, running stats {}",
                gv.len(),
                bv.len(),
                stats.mean.len()
            )));
        }
        let eps = T::from_f64(BN_EPSILON);
        let xs = x.data();
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let n = T::from_f64(pixels as f64);
                let mut mean = vec![T::zero(); c];
                for row in xs.chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += *v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); c];
                for row in xs.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = *v - *m;
                        *s += d * d;
                    }
                }
                let unbiased = if pixels > 1 {
                    T::from_f64(pixels as f64 / (pixels as f64 - 1.0))
                } else {
                    T::one()
                };
                var.iter_mut().for_each(|s| *s = *s / n);
                let momentum = T::from_f64(BN_MOMENTUM);
                let keep = T::one() - momentum;
                for ch in 0..c {
                    stats.mean[ch] = keep * stats.mean[ch] + momentum * mean[ch];
                    stats.var[ch] = keep * stats.var[ch] + momentum * var[ch] * unbiased;
                }
                (mean, var)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(c) {
            for ch in 0..c {
                let nx = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(nx);
                out.push(gv[ch] * nx + bv[ch]);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.record(
            Op::BatchNorm {
                input: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                batch_stats: mode == BatchNormMode::Train,
            },
            value,
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.index_of(input)?;
        let value = self.nodes[xi].value.map(|v| v.max(T::zero()));
        self.record(Op::Relu { input: xi }, value)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let xi = self.index_of(input)?;
        let value = self.nodes[xi].value.map(stable_sigmoid);
        self.record(Op::Sigmoid { input: xi }, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ai, bi) = self.elementwise(a, b, "add", |x, y| x + y)?;
        self.record(Op::Add { a: ai, b: bi }, value)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ai, bi) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        self.record(Op::Mul { a: ai, b: bi }, value)
    }

    fn elementwise(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize, usize)> {
        let (ai, bi) = (self.index_of(a)?, self.index_of(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "{name}: shapes {:?} and {:?} differ",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, ai, bi))
    }

    /// Multiplies every channel of `x (…, c)` by the single-channel map
    /// `alpha (…, 1)`.
    pub fn scale_channels(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (xi, ai) = (self.index_of(x)?, self.index_of(alpha)?);
        let (xv, av) = (&self.nodes[xi].value, &self.nodes[ai].value);
        let xs = xv.shape();
        let s = av.shape();
        if s.len() != xs.len() || s[..s.len() - 1] != xs[..xs.len() - 1] || s[s.len() - 1] != 1 {
            return Err(Error::dim(format!(
                "scale_channels: gate {s:?} does not align with features {xs:?}"
            )));
        }
        let c = xv.channels();
        let mut data = Vec::with_capacity(xv.numel());
        for (row, &a) in xv.data().chunks(c).zip(av.data()) {
            data.extend(row.iter().map(|&v| v * a));
        }
        let value = Tensor::new(xs.to_vec(), data)?;
        self.record(Op::ScaleChannels { x: xi, alpha: ai }, value)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.index_of(input)?;
        let value = Tensor::scalar(self.nodes[xi].value.sum());
        self.record(Op::Sum { input: xi }, value)
    }

    /// Mean binary cross-entropy between `probs` and a fixed `target`.
    pub fn bce_loss(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let pi = self.index_of(probs)?;
        let p = &self.nodes[pi].value;
        if p.shape() != target.shape() {
            return Err(Error::dim(format!(
                "bce_loss: probs {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let (lo, hi) = (T::from_f64(BCE_CLAMP), T::from_f64(1.0 - BCE_CLAMP));
        let mut acc = 0.0f64;
        for (&pv, &tv) in p.data().iter().zip(target.data()) {
            let pc = pv.max(lo).min(hi).as_f64();
            let t = tv.as_f64();
            acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        let value = Tensor::scalar(T::from_f64(acc / p.numel() as f64));
        self.record(
            Op::Bce {
                probs: pi,
                target: target.data().to_vec(),
            },
            value,
        )
    }
}

/// Adds the contributions of record `i` to the gradients of its inputs.
pub(super) fn backward_rule<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    scratch: &mut ConvScratch<T>,
    i: usize,
    upstream: &Tensor<T>,
) -> Result<()> {
    let dy = upstream.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
        } => {
            let (x, w) = (&nodes[*input].value, &nodes[*kernel].value);
            let geom = conv_geometry(x.shape(), w.shape(), nodes[*bias].value.shape())?;
            // Three distinct records: take the buffers out to borrow them together.
            let mut dx = take_slot(nodes, grads, *input);
            let mut dw = take_slot(nodes, grads, *kernel);
            let mut db = take_slot(nodes, grads, *bias);
            conv::backward(
                x,
                w,
                &geom,
                dy,
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
                scratch,
            );
            for (idx, g) in [(*input, dx), (*kernel, dw), (*bias, db)] {
                if g.is_some() {
                    grads[idx] = g;
                }
            }
        }
        Op::Concat { parts } => {
            let total = nodes[i].value.channels();
            let mut offset = 0;
            for &part in parts {
                let c = nodes[part].value.channels();
                if let Some(buf) = grad_slot(nodes, grads, part) {
                    for (dst, row) in buf.chunks_mut(c).zip(dy.chunks(total)) {
                        for (d, s) in dst.iter_mut().zip(&row[offset..offset + c]) {
                            *d += *s;
                        }
                    }
                }
                offset += c;
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if let Some(buf) = grad_slot(nodes, grads, *input) {
                for (&pos, &g) in argmax.iter().zip(dy) {
                    buf[pos] += g;
                }
            }
        }
        Op::Upsample2 { input } => {
            let (b, h, w, c) = image_dims(nodes[*input].value.shape())?;
            if let Some(buf) = grad_slot(nodes, grads, *input) {
                let ow = 2 * w;
                for n in 0..b {
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            let src = ((n * 2 * h + y) * ow + xx) * c;
                            let dst = ((n * h + y / 2) * w + xx / 2) * c;
                            for ch in 0..c {
                                buf[dst + ch] += dy[src + ch];
                            }
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let c = inv_std.len();
            let gv = nodes[*gamma].value.data().to_vec();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for (row, xr) in dy.chunks(c).zip(xhat.chunks(c)) {
                for ch in 0..c {
                    sum_dy[ch] += row[ch];
                    sum_dy_xhat[ch] += row[ch] * xr[ch];
                }
            }
            if let Some(buf) = grad_slot(nodes, grads, *gamma) {
                for (d, s) in buf.iter_mut().zip(&sum_dy_xhat) {
                    *d += *s;
                }
            }
            if let Some(buf) = grad_slot(nodes, grads, *beta) {
                for (d, s) in buf.iter_mut().zip(&sum_dy) {
                    *d += *s;
                }
            }
            if let Some(buf) = grad_slot(nodes, grads, *input) {
                if *batch_stats {
                    let n = T::from_f64((dy.len() / c) as f64);
                    for ((dst, row), xr) in buf.chunks_mut(c).zip(dy.chunks(c)).zip(xhat.chunks(c))
                    {
                        for ch in 0..c {
                            let scale = gv[ch] * inv_std[ch] / n;
                            dst[ch] += scale * (n * row[ch] - sum_dy[ch] - xr[ch] * sum_dy_xhat[ch]);
                        }
                    }
                } else {
                    for (dst, row) in buf.chunks_mut(c).zip(dy.chunks(c)) {
                        for ch in 0..c {
                            dst[ch] += row[ch] * gv[ch] * inv_std[ch];
                        }
                    }
                }
            }
        }
        Op::Relu { input } => {
            let xs = nodes[*input].value.data();
            if let Some(buf) = grad_slot(nodes, grads, *input) {
                for ((d, &x), &g) in buf.iter_mut().zip(xs).zip(dy) {
                    if x > T::zero() {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid { input } => {
            let ys = nodes[i].value.data();
            if let Some(buf) = grad_slot(nodes, grads, *input) {
                for ((d, &y), &g) in buf.iter_mut().zip(ys).zip(dy) {
                    *d += g * y * (T::one() - y);
                }
            }
        }
        Op::Add { a, b } => {
            for idx in [*a, *b] {
                if let Some(buf) = grad_slot(nodes, grads, idx) {
                    for (d, &g) in buf.iter_mut().zip(dy) {
                        *d += g;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(buf) = grad_slot(nodes, grads, *a) {
                for ((d, &g), &o) in buf.iter_mut().zip(dy).zip(bv) {
                    *d += g * o;
                }
            }
            if let Some(buf) = grad_slot(nodes, grads, *b) {
                for ((d, &g), &o) in buf.iter_mut().zip(dy).zip(av) {
                    *d += g * o;
                }
            }
        }
        Op::ScaleChannels { x, alpha } => {
            let c = nodes[*x].value.channels();
            let (xv, av) = (nodes[*x].value.data(), nodes[*alpha].value.data());
            if let Some(buf) = grad_slot(nodes, grads, *x) {
                for ((dst, row), &a) in buf.chunks_mut(c).zip(dy.chunks(c)).zip(av) {
                    for (d, &g) in dst.iter_mut().zip(row) {
                        *d += g * a;
                    }
                }
            }
            if let Some(buf) = grad_slot(nodes, grads, *alpha) {
                for ((d, row), xr) in buf.iter_mut().zip(dy.chunks(c)).zip(xv.chunks(c)) {
                    *d += row.iter().zip(xr).map(|(&g, &v)| g * v).sum::<T>();
                }
            }
        }
        Op::Sum { input } => {
            let g = dy[0];
            if let Some(buf) = grad_slot(nodes, grads, *input) {
                buf.iter_mut().for_each(|d| *d += g);
            }
        }
        Op::Bce { probs, target } => {
            let ps = nodes[*probs].value.data();
            let n = T::from_f64(ps.len() as f64);
            let (lo, hi) = (T::from_f64(BCE_CLAMP), T::from_f64(1.0 - BCE_CLAMP));
            let g = dy[0];
            if let Some(buf) = grad_slot(nodes, grads, *probs) {
                for ((d, &p), &t) in buf.iter_mut().zip(ps).zip(target) {
                    let pc = p.max(lo).min(hi);
                    *d += g * (pc - t) / (pc * (T::one() - pc) * n);
                }
            }
        }
    }
    Ok(())
}

fn take_slot<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    index: usize,
) -> Option<Tensor<T>> {
    grad_slot(nodes, grads, index)?;
    grads[index].take()
}
