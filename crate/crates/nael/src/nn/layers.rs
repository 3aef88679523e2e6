//! Network layers: the three convolution variants, batch normalization,
//! ReLU6, fully connected, global average pooling, flatten, and the
//! softmax cross-entropy head. Each layer caches what its backward pass
//! needs during forward; backward accumulates parameter gradients and
//! returns the input gradient.

use rand::Rng;

use crate::error::{NaelError, Result};
use crate::nn::tensor::{Param, Tensor};

/// Common layer interface, mainly for generic gradient checking.
pub trait Layer {
    fn forward_t(&mut self, input: &Tensor, train: bool) -> Result<Tensor>;
    fn backward_t(&mut self, grad_out: &Tensor) -> Result<Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(NaelError::Shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn expect_rank4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(NaelError::Shape(format!("{what} must be rank 4, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2], t.shape[3]))
}

fn expect_rank2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(NaelError::Shape(format!("{what} must be rank 2, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Valid output-column range for a given kernel column offset.
/// dst[j] += wv * src[j*stride] over the zipped extent.
#[inline]
fn axpy_gather(dst: &mut [f64], src: &[f64], stride: usize, wv: f64) {
    if stride == 1 {
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d += wv * s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *d += wv * s;
        }
    }
}

/// dst[j*stride] += wv * src[j] over the zipped extent.
#[inline]
fn axpy_scatter(dst: &mut [f64], stride: usize, src: &[f64], wv: f64) {
    if stride == 1 {
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d += wv * s;
        }
    } else {
        for (d, s) in dst.iter_mut().step_by(stride).zip(src.iter()) {
            *d += wv * s;
        }
    }
}

/// sum_j a[j*stride] * b[j]; four lanes in the contiguous case to break
/// the f64 add latency chain.
#[inline]
fn dot_gather(a: &[f64], stride: usize, b: &[f64]) -> f64 {
    if stride == 1 {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let mut lanes = [0.0f64; 4];
        let mut ca = a.chunks_exact(4);
        let mut cb = b.chunks_exact(4);
        for (xa, xb) in (&mut ca).zip(&mut cb) {
            for l in 0..4 {
                lanes[l] += xa[l] * xb[l];
            }
        }
        let mut dot = lanes.iter().sum::<f64>();
        for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
            dot += x * y;
        }
        dot
    } else {
        a.iter().step_by(stride).zip(b.iter()).map(|(x, y)| x * y).sum()
    }
}

fn ow_range(w_in: usize, w_out: usize, stride: usize, padding: usize, kw: usize) -> (usize, usize) {
    // iw = ow*stride + kw - padding must lie in [0, w_in)
    let lo = if kw >= padding { 0 } else { (padding - kw).div_ceil(stride) };
    let hi_excl = if w_in + padding > kw {
        ((w_in + padding - kw - 1) / stride + 1).min(w_out)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

// ---------------------------------------------------------------------------
// standard convolution
// ---------------------------------------------------------------------------

/// Batched standard cross-correlation. Input (N,Ci,H,W), kernel (Co,Ci,Hk,Wk).
pub fn sc_conv_forward_batch(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, ci, h, w) = expect_rank4(input, "sc_conv input")?;
    let (co, kci, hk, wk) = expect_rank4(kernel, "sc_conv kernel")?;
    if kci != ci {
        return Err(NaelError::Shape(format!(
            "sc_conv kernel expects {kci} input channels, input has {ci}"
        )));
    }
    let ho = conv_out_dim(h, hk, stride, padding)?;
    let wo = conv_out_dim(w, wk, stride, padding)?;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for b in 0..n {
        for oc in 0..co {
            let out_base = ((b * co) + oc) * ho * wo;
            for ic in 0..ci {
                let in_base = ((b * ci) + ic) * h * w;
                for kh in 0..hk {
                    for kw in 0..wk {
                        let wv = kernel.data[(((oc * ci) + ic) * hk + kh) * wk + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ow_range(w, wo, stride, padding, kw);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = oh * stride + kh;
                            if ih < padding || ih - padding >= h {
                                continue;
                            }
                            let row_in = in_base + (ih - padding) * w;
                            let row_out = out_base + oh * wo;
                            let src = &input.data[row_in + lo * stride + kw - padding..row_in + w];
                            let dst = &mut out.data[row_out + lo..row_out + hi];
                            axpy_gather(dst, src, stride, wv);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Single-sample standard convolution: input (Ci,H,W) -> (Co,Ho,Wo).
pub fn sc_conv_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(NaelError::Shape(format!("expected (C,H,W) input, got {:?}", input.shape)));
    }
    let batched = Tensor::from_vec(
        &[1, input.shape[0], input.shape[1], input.shape[2]],
        input.data.clone(),
    )?;
    let out = sc_conv_forward_batch(&batched, kernel, stride, padding)?;
    Tensor::from_vec(&out.shape[1..], out.data)
}

/// Batched depthwise convolution. Input (N,C,H,W), kernel (C,Hk,Wk).
pub fn dw_conv_forward_batch(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = expect_rank4(input, "dw_conv input")?;
    if kernel.rank() != 3 || kernel.shape[0] != c {
        return Err(NaelError::Shape(format!(
            "dw_conv kernel must be ({c},Hk,Wk), got {:?}",
            kernel.shape
        )));
    }
    let (hk, wk) = (kernel.shape[1], kernel.shape[2]);
    let ho = conv_out_dim(h, hk, stride, padding)?;
    let wo = conv_out_dim(w, wk, stride, padding)?;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let in_base = ((b * c) + ch) * h * w;
            let out_base = ((b * c) + ch) * ho * wo;
            for kh in 0..hk {
                for kw in 0..wk {
                    let wv = kernel.data[(ch * hk + kh) * wk + kw];
                    let (lo, hi) = ow_range(w, wo, stride, padding, kw);
                    if lo >= hi {
                        continue;
                    }
                    for oh in 0..ho {
                        let ih = oh * stride + kh;
                        if ih < padding || ih - padding >= h {
                            continue;
                        }
                        let row_in = in_base + (ih - padding) * w;
                        let row_out = out_base + oh * wo;
                        let src = &input.data[row_in + lo * stride + kw - padding..row_in + w];
                        let dst = &mut out.data[row_out + lo..row_out + hi];
                        axpy_gather(dst, src, stride, wv);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Single-sample depthwise convolution: input (C,H,W), kernel (C,Hk,Wk).
pub fn dw_conv_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(NaelError::Shape(format!("expected (C,H,W) input, got {:?}", input.shape)));
    }
    let batched = Tensor::from_vec(
        &[1, input.shape[0], input.shape[1], input.shape[2]],
        input.data.clone(),
    )?;
    let out = dw_conv_forward_batch(&batched, kernel, stride, padding)?;
    Tensor::from_vec(&out.shape[1..], out.data)
}

/// Batched pointwise (1x1) convolution. Input (N,Ci,H,W), kernel (Co,Ci).
pub fn pw_conv_forward_batch(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, ci, h, w) = expect_rank4(input, "pw_conv input")?;
    let (co, kci) = expect_rank2(kernel, "pw_conv kernel")?;
    if kci != ci {
        return Err(NaelError::Shape(format!(
            "pw_conv kernel expects {kci} input channels, input has {ci}"
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, co, h, w]);
    // Tiled over the spatial axis with 4 output channels per pass so the
    // destination stays in registers/L1 instead of being re-streamed per
    // input channel.
    const TILE: usize = 256;
    for b in 0..n {
        let in_base = b * ci * hw;
        let out_base = b * co * hw;
        let mut acc = [[0.0f64; TILE]; 4];
        let mut t0 = 0;
        while t0 < hw {
            let tl = (hw - t0).min(TILE);
            let mut oc = 0;
            while oc < co {
                let ob = (co - oc).min(4);
                for a in acc.iter_mut().take(ob) {
                    a[..tl].fill(0.0);
                }
                for ic in 0..ci {
                    let src = &input.data[in_base + ic * hw + t0..][..tl];
                    for (j, a) in acc.iter_mut().enumerate().take(ob) {
                        let wv = kernel.data[(oc + j) * ci + ic];
                        for (av, s) in a[..tl].iter_mut().zip(src.iter()) {
                            *av += wv * s;
                        }
                    }
                }
                for (j, a) in acc.iter().enumerate().take(ob) {
                    out.data[out_base + (oc + j) * hw + t0..][..tl].copy_from_slice(&a[..tl]);
                }
                oc += ob;
            }
            t0 += tl;
        }
    }
    Ok(out)
}

/// Single-sample pointwise convolution: input (Ci,H,W), kernel (Co,Ci).
pub fn pw_conv_forward(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(NaelError::Shape(format!("expected (C,H,W) input, got {:?}", input.shape)));
    }
    let batched = Tensor::from_vec(
        &[1, input.shape[0], input.shape[1], input.shape[2]],
        input.data.clone(),
    )?;
    let out = pw_conv_forward_batch(&batched, kernel)?;
    Tensor::from_vec(&out.shape[1..], out.data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

/// Convolution layer (no bias; batch norm follows everywhere it is used).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kind: ConvKind,
    pub weight: Param,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn standard(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Conv2d {
        let fan_in = c_in * k * k;
        Conv2d {
            kind: ConvKind::Standard,
            weight: Param::new(Tensor::kaiming_uniform(&[c_out, c_in, k, k], fan_in, rng)),
            stride,
            padding,
            cache: None,
        }
    }

    pub fn depthwise(c: usize, k: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Conv2d {
        Conv2d {
            kind: ConvKind::Depthwise,
            weight: Param::new(Tensor::kaiming_uniform(&[c, k, k], k * k, rng)),
            stride,
            padding,
            cache: None,
        }
    }

    pub fn pointwise(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Conv2d {
        Conv2d {
            kind: ConvKind::Pointwise,
            weight: Param::new(Tensor::kaiming_uniform(&[c_out, c_in], c_in, rng)),
            stride: 1,
            padding: 0,
            cache: None,
        }
    }

    fn backward_input_weight(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| NaelError::State("conv backward before forward".into()))?;
        let (n, _, h, w) = expect_rank4(&input, "conv cached input")?;
        let (gn, gc, ho, wo) = expect_rank4(grad_out, "conv grad_out")?;
        if gn != n {
            return Err(NaelError::Shape("conv grad_out batch mismatch".into()));
        }
        let mut gin = Tensor::zeros(&input.shape);
        match self.kind {
            ConvKind::Pointwise => {
                let (co, ci) = expect_rank2(&self.weight.value, "pw weight")?;
                if gc != co {
                    return Err(NaelError::Shape("pw grad_out channel mismatch".into()));
                }
                let hw = h * w;
                // Spatial tiles keep the gradient row hot in L1; the dot
                // product uses four lanes to break the f64 add latency chain.
                const TILE: usize = 256;
                for b in 0..n {
                    let in_base = b * ci * hw;
                    let out_base = b * co * hw;
                    let mut t0 = 0;
                    while t0 < hw {
                        let tl = (hw - t0).min(TILE);
                        for oc in 0..co {
                            let g_t = &grad_out.data[out_base + oc * hw + t0..][..tl];
                            for ic in 0..ci {
                                let wv = self.weight.value.data[oc * ci + ic];
                                let gin_t = &mut gin.data[in_base + ic * hw + t0..][..tl];
                                for (gi, g) in gin_t.iter_mut().zip(g_t.iter()) {
                                    *gi += wv * g;
                                }
                                let in_t = &input.data[in_base + ic * hw + t0..][..tl];
                                let mut lanes = [0.0f64; 4];
                                let mut chunks_g = g_t.chunks_exact(4);
                                let mut chunks_i = in_t.chunks_exact(4);
                                for (cg, cin) in (&mut chunks_g).zip(&mut chunks_i) {
                                    for l in 0..4 {
                                        lanes[l] += cg[l] * cin[l];
                                    }
                                }
                                let mut dot = lanes.iter().sum::<f64>();
                                for (g, i) in
                                    chunks_g.remainder().iter().zip(chunks_i.remainder())
                                {
                                    dot += g * i;
                                }
                                self.weight.grad.data[oc * ci + ic] += dot;
                            }
                        }
                        t0 += tl;
                    }
                }
            }
            ConvKind::Depthwise => {
                let c = self.weight.value.shape[0];
                let (hk, wk) = (self.weight.value.shape[1], self.weight.value.shape[2]);
                if gc != c {
                    return Err(NaelError::Shape("dw grad_out channel mismatch".into()));
                }
                for b in 0..n {
                    for ch in 0..c {
                        let in_base = ((b * c) + ch) * h * w;
                        let out_base = ((b * c) + ch) * ho * wo;
                        for kh in 0..hk {
                            for kw in 0..wk {
                                let widx = (ch * hk + kh) * wk + kw;
                                let wv = self.weight.value.data[widx];
                                let (lo, hi) = ow_range(w, wo, self.stride, self.padding, kw);
                                if lo >= hi {
                                    continue;
                                }
                                let mut wg = 0.0;
                                for oh in 0..ho {
                                    let ih = oh * self.stride + kh;
                                    if ih < self.padding || ih - self.padding >= h {
                                        continue;
                                    }
                                    let row_in = in_base + (ih - self.padding) * w;
                                    let row_out = out_base + oh * wo;
                                    let start = row_in + lo * self.stride + kw - self.padding;
                                    let g = &grad_out.data[row_out + lo..row_out + hi];
                                    axpy_scatter(&mut gin.data[start..row_in + w], self.stride, g, wv);
                                    wg += dot_gather(&input.data[start..row_in + w], self.stride, g);
                                }
                                self.weight.grad.data[widx] += wg;
                            }
                        }
                    }
                }
            }
            ConvKind::Standard => {
                let (co, ci, hk, wk) = expect_rank4(&self.weight.value, "sc weight")?;
                if gc != co {
                    return Err(NaelError::Shape("sc grad_out channel mismatch".into()));
                }
                for b in 0..n {
                    for oc in 0..co {
                        let out_base = ((b * co) + oc) * ho * wo;
                        for ic in 0..ci {
                            let in_base = ((b * ci) + ic) * h * w;
                            for kh in 0..hk {
                                for kw in 0..wk {
                                    let widx = (((oc * ci) + ic) * hk + kh) * wk + kw;
                                    let wv = self.weight.value.data[widx];
                                    let (lo, hi) = ow_range(w, wo, self.stride, self.padding, kw);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let mut wg = 0.0;
                                    for oh in 0..ho {
                                        let ih = oh * self.stride + kh;
                                        if ih < self.padding || ih - self.padding >= h {
                                            continue;
                                        }
                                        let row_in = in_base + (ih - self.padding) * w;
                                        let row_out = out_base + oh * wo;
                                        let start = row_in + lo * self.stride + kw - self.padding;
                                        let g = &grad_out.data[row_out + lo..row_out + hi];
                                        axpy_scatter(
                                            &mut gin.data[start..row_in + w],
                                            self.stride,
                                            g,
                                            wv,
                                        );
                                        wg += dot_gather(&input.data[start..row_in + w], self.stride, g);
                                    }
                                    self.weight.grad.data[widx] += wg;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(gin)
    }
}

impl Layer for Conv2d {
    fn forward_t(&mut self, input: &Tensor, _train: bool) -> Result<Tensor> {
        let out = match self.kind {
            ConvKind::Standard => {
                sc_conv_forward_batch(input, &self.weight.value, self.stride, self.padding)?
            }
            ConvKind::Depthwise => {
                dw_conv_forward_batch(input, &self.weight.value, self.stride, self.padding)?
            }
            ConvKind::Pointwise => pw_conv_forward_batch(input, &self.weight.value)?,
        };
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward_t(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        self.backward_input_weight(grad_out)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight]
    }
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over (N,C,H,W) or per-feature over (N,F).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
    shape: Vec<usize>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.shape[0]
    }

    fn layout(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        // returns (batch, channels, spatial)
        let c = self.channels();
        match input.rank() {
            2 => {
                if input.shape[1] != c {
                    return Err(NaelError::Shape(format!(
                        "batchnorm expects {c} features, got {}",
                        input.shape[1]
                    )));
                }
                Ok((input.shape[0], c, 1))
            }
            4 => {
                if input.shape[1] != c {
                    return Err(NaelError::Shape(format!(
                        "batchnorm expects {c} channels, got {}",
                        input.shape[1]
                    )));
                }
                Ok((input.shape[0], c, input.shape[2] * input.shape[3]))
            }
            _ => Err(NaelError::Shape(format!(
                "batchnorm input must be rank 2 or 4, got {:?}",
                input.shape
            ))),
        }
    }
}

impl Layer for BatchNorm {
    fn forward_t(&mut self, input: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, hw) = self.layout(input)?;
        let mut out = Tensor::zeros(&input.shape);
        let mut xhat = Tensor::zeros(&input.shape);
        let mut inv_std = vec![0.0; c];
        if train {
            if n < 2 {
                return Err(NaelError::Degenerate(
                    "batchnorm training requires batch size >= 2".into(),
                ));
            }
            let m = (n * hw) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for b in 0..n {
                    let base = ((b * c) + ch) * hw;
                    for v in &input.data[base..base + hw] {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / m;
                let var = (sq / m - mean * mean).max(0.0);
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[ch] = istd;
                let g = self.gamma.value.data[ch];
                let bt = self.beta.value.data[ch];
                for b in 0..n {
                    let base = ((b * c) + ch) * hw;
                    let src = &input.data[base..base + hw];
                    let xh_s = &mut xhat.data[base..base + hw];
                    let out_s = &mut out.data[base..base + hw];
                    for ((v, xh), o) in src.iter().zip(xh_s.iter_mut()).zip(out_s.iter_mut()) {
                        let x = (v - mean) * istd;
                        *xh = x;
                        *o = g * x + bt;
                    }
                }
                self.running_mean.data[ch] =
                    (1.0 - self.momentum) * self.running_mean.data[ch] + self.momentum * mean;
                self.running_var.data[ch] =
                    (1.0 - self.momentum) * self.running_var.data[ch] + self.momentum * var;
            }
        } else {
            for ch in 0..c {
                let mean = self.running_mean.data[ch];
                let istd = 1.0 / (self.running_var.data[ch] + self.eps).sqrt();
                inv_std[ch] = istd;
                let g = self.gamma.value.data[ch];
                let bt = self.beta.value.data[ch];
                for b in 0..n {
                    let base = ((b * c) + ch) * hw;
                    let src = &input.data[base..base + hw];
                    let xh_s = &mut xhat.data[base..base + hw];
                    let out_s = &mut out.data[base..base + hw];
                    for ((v, xh), o) in src.iter().zip(xh_s.iter_mut()).zip(out_s.iter_mut()) {
                        let x = (v - mean) * istd;
                        *xh = x;
                        *o = g * x + bt;
                    }
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, train, shape: input.shape.clone() });
        Ok(out)
    }

    fn backward_t(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| NaelError::State("batchnorm backward before forward".into()))?;
        if grad_out.shape != cache.shape {
            return Err(NaelError::Shape("batchnorm grad_out shape mismatch".into()));
        }
        let (n, c, hw) = self.layout(grad_out)?;
        let m = (n * hw) as f64;
        let mut gin = Tensor::zeros(&grad_out.shape);
        for ch in 0..c {
            let g = self.gamma.value.data[ch];
            let istd = cache.inv_std[ch];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..n {
                let base = ((b * c) + ch) * hw;
                let go_s = &grad_out.data[base..base + hw];
                let xh_s = &cache.xhat.data[base..base + hw];
                for (go, xh) in go_s.iter().zip(xh_s.iter()) {
                    sum_g += go;
                    sum_gx += go * xh;
                }
            }
            self.beta.grad.data[ch] += sum_g;
            self.gamma.grad.data[ch] += sum_gx;
            if cache.train {
                let scale = g * istd / m;
                for b in 0..n {
                    let base = ((b * c) + ch) * hw;
                    let go_s = &grad_out.data[base..base + hw];
                    let xh_s = &cache.xhat.data[base..base + hw];
                    let gin_s = &mut gin.data[base..base + hw];
                    for ((go, xh), gi) in go_s.iter().zip(xh_s.iter()).zip(gin_s.iter_mut()) {
                        *gi = scale * (m * go - sum_g - xh * sum_gx);
                    }
                }
            } else {
                for b in 0..n {
                    let base = ((b * c) + ch) * hw;
                    let go_s = &grad_out.data[base..base + hw];
                    let gin_s = &mut gin.data[base..base + hw];
                    for (go, gi) in go_s.iter().zip(gin_s.iter_mut()) {
                        *gi = go * g * istd;
                    }
                }
            }
        }
        Ok(gin)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

// ---------------------------------------------------------------------------
// activations and pooling
// ---------------------------------------------------------------------------

/// Elementwise min(max(x, 0), 6).
pub fn relu6(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.clamp(0.0, 6.0)).collect(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu6 {
    cache: Option<Tensor>,
}

impl Layer for Relu6 {
    fn forward_t(&mut self, input: &Tensor, _train: bool) -> Result<Tensor> {
        self.cache = Some(input.clone());
        Ok(relu6(input))
    }

    fn backward_t(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| NaelError::State("relu6 backward before forward".into()))?;
        if !grad_out.same_shape(&input) {
            return Err(NaelError::Shape("relu6 grad_out shape mismatch".into()));
        }
        Ok(Tensor {
            shape: input.shape.clone(),
            data: input
                .data
                .iter()
                .zip(grad_out.data.iter())
                .map(|(&x, &g)| if x > 0.0 && x < 6.0 { g } else { 0.0 })
                .collect(),
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![]
    }
}

/// Per-channel mean over the spatial dimensions: (N,C,H,W) -> (N,C).
pub fn gap(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = expect_rank4(input, "gap input")?;
    let hw = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    for b in 0..n {
        for ch in 0..c {
            let base = ((b * c) + ch) * h * w;
            out.data[b * c + ch] = input.data[base..base + h * w].iter().sum::<f64>() / hw;
        }
    }
    Ok(out)
}

/// Gradient of [`gap`] with respect to its input.
pub fn gap_backward(grad_out: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = expect_rank2(grad_out, "gap grad_out")?;
    let hw = (h * w) as f64;
    let mut gin = Tensor::zeros(&[n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.data[b * c + ch] / hw;
            let base = ((b * c) + ch) * h * w;
            gin.data[base..base + h * w].iter_mut().for_each(|v| *v = g);
        }
    }
    Ok(gin)
}

#[derive(Debug, Clone, Default)]
pub struct Gap {
    cache_hw: Option<(usize, usize)>,
}

impl Layer for Gap {
    fn forward_t(&mut self, input: &Tensor, _train: bool) -> Result<Tensor> {
        let (_, _, h, w) = expect_rank4(input, "gap input")?;
        self.cache_hw = Some((h, w));
        gap(input)
    }

    fn backward_t(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (h, w) = self
            .cache_hw
            .take()
            .ok_or_else(|| NaelError::State("gap backward before forward".into()))?;
        gap_backward(grad_out, h, w)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![]
    }
}

/// (N,C,H,W) -> (N,C*H*W).
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache_shape: Option<Vec<usize>>,
}

impl Layer for Flatten {
    fn forward_t(&mut self, input: &Tensor, _train: bool) -> Result<Tensor> {
        let (n, c, h, w) = expect_rank4(input, "flatten input")?;
        self.cache_shape = Some(input.shape.clone());
        Tensor::from_vec(&[n, c * h * w], input.data.clone())
    }

    fn backward_t(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self
            .cache_shape
            .take()
            .ok_or_else(|| NaelError::State("flatten backward before forward".into()))?;
        Tensor::from_vec(&shape, grad_out.data.clone())
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![]
    }
}

// ---------------------------------------------------------------------------
// fully connected
// ---------------------------------------------------------------------------

/// W*x + b applied per sample. Input (N,F_in), weight (F_out,F_in).
pub fn fc_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let single = input.rank() == 1;
    let (n, f_in) = if single {
        (1, input.shape[0])
    } else {
        expect_rank2(input, "fc input")?
    };
    let (f_out, wf_in) = expect_rank2(weight, "fc weight")?;
    if wf_in != f_in || bias.shape != [f_out] {
        return Err(NaelError::Shape(format!(
            "fc dims: input {f_in}, weight {:?}, bias {:?}",
            weight.shape, bias.shape
        )));
    }
    let mut out = Tensor::zeros(&[n, f_out]);
    for b in 0..n {
        let in_row = &input.data[b * f_in..(b + 1) * f_in];
        for o in 0..f_out {
            let w_row = &weight.data[o * f_in..(o + 1) * f_in];
            let dot: f64 = w_row.iter().zip(in_row.iter()).map(|(w, x)| w * x).sum();
            out.data[b * f_out + o] = dot + bias.data[o];
        }
    }
    if single {
        Tensor::from_vec(&[f_out], out.data)
    } else {
        Ok(out)
    }
}

/// Input gradient of a fully connected layer: grad_out (N,F_out) -> (N,F_in).
pub fn fc_backward_input(weight: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (f_out, f_in) = expect_rank2(weight, "fc weight")?;
    let (n, g_out) = expect_rank2(grad_out, "fc grad_out")?;
    if g_out != f_out {
        return Err(NaelError::Shape("fc grad_out width mismatch".into()));
    }
    let mut gin = Tensor::zeros(&[n, f_in]);
    for b in 0..n {
        for o in 0..f_out {
            let g = grad_out.data[b * f_out + o];
            let w_row = &weight.data[o * f_in..(o + 1) * f_in];
            let gin_row = &mut gin.data[b * f_in..(b + 1) * f_in];
            for (gi, w) in gin_row.iter_mut().zip(w_row.iter()) {
                *gi += g * w;
            }
        }
    }
    Ok(gin)
}

#[derive(Debug, Clone)]
pub struct Fc {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Fc {
    pub fn new(f_in: usize, f_out: usize, rng: &mut impl Rng) -> Fc {
        Fc {
            weight: Param::new(Tensor::kaiming_uniform(&[f_out, f_in], f_in, rng)),
            bias: Param::new(Tensor::zeros(&[f_out])),
            cache: None,
        }
    }
}

impl Layer for Fc {
    fn forward_t(&mut self, input: &Tensor, _train: bool) -> Result<Tensor> {
        let out = fc_forward(input, &self.weight.value, &self.bias.value)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward_t(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| NaelError::State("fc backward before forward".into()))?;
        let (n, f_in) = expect_rank2(&input, "fc cached input")?;
        let (gn, f_out) = expect_rank2(grad_out, "fc grad_out")?;
        if gn != n || f_out != self.bias.value.shape[0] {
            return Err(NaelError::Shape("fc grad_out shape mismatch".into()));
        }
        for b in 0..n {
            let in_row = &input.data[b * f_in..(b + 1) * f_in];
            for o in 0..f_out {
                let g = grad_out.data[b * f_out + o];
                self.bias.grad.data[o] += g;
                let w_row = &mut self.weight.grad.data[o * f_in..(o + 1) * f_in];
                for (wg, x) in w_row.iter_mut().zip(in_row.iter()) {
                    *wg += g * x;
                }
            }
        }
        fc_backward_input(&self.weight.value, grad_out)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy
// ---------------------------------------------------------------------------

/// Numerically stabilized softmax over the last axis of (N,K).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = expect_rank2(logits, "softmax logits")?;
    let mut out = Tensor::zeros(&[n, k]);
    for b in 0..n {
        let row = &logits.data[b * k..(b + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (i, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out.data[b * k + i] = e;
            sum += e;
        }
        for i in 0..k {
            out.data[b * k + i] /= sum;
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy with optional per-sample weights.
///
/// Returns `(loss, probabilities, dloss/dlogits)`; the gradient already
/// includes the 1/N batch averaging.
pub fn softmax_xent_batch(
    logits: &Tensor,
    labels: &[usize],
    sample_weights: Option<&[f64]>,
) -> Result<(f64, Tensor, Tensor)> {
    let (n, k) = expect_rank2(logits, "xent logits")?;
    if labels.len() != n {
        return Err(NaelError::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(w) = sample_weights {
        if w.len() != n {
            return Err(NaelError::Shape("sample weight count mismatch".into()));
        }
    }
    for &l in labels {
        if l >= k {
            return Err(NaelError::Label(format!("label {l} with {k} classes")));
        }
    }
    let probs = softmax(logits)?;
    let mut dlogits = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for b in 0..n {
        let weight = sample_weights.map_or(1.0, |w| w[b]);
        let p = probs.data[b * k + labels[b]].max(1e-300);
        loss += -p.ln() * weight;
        for i in 0..k {
            let indicator = if i == labels[b] { 1.0 } else { 0.0 };
            dlogits.data[b * k + i] = weight * (probs.data[b * k + i] - indicator) / n as f64;
        }
    }
    Ok((loss / n as f64, probs, dlogits))
}

/// Single-sample softmax cross-entropy: (loss, probabilities).
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    let t = Tensor::from_vec(&[1, logits.len()], logits.to_vec())?;
    let (loss, probs, _) = softmax_xent_batch(&t, &[label], None)?;
    Ok((loss, probs.data))
}
