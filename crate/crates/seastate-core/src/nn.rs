//! Small dense/convolutional network primitives with exact gradients: enough
//! to express the surrogate backbone and the classifier heads, train them,
//! and count their parameters.
//!
//! Feature maps are `[batch, channels, height, width]`; dense features are
//! `[batch, features]`. Convolution runs as im2col plus one matrix multiply
//! per image. Losses and softmax run in f64 so reported values are exact to
//! well below any asserted tolerance; weights and activations stay f32.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Activations moving through a network.
#[derive(Debug, Clone)]
pub enum Tensor {
    /// `[batch, channels, height, width]`
    Map(Array4<f32>),
    /// `[batch, features]`
    Flat(Array2<f32>),
}

impl Tensor {
    pub fn batch_len(&self) -> usize {
        match self {
            Tensor::Map(a) => a.shape()[0],
            Tensor::Flat(a) => a.shape()[0],
        }
    }

    pub fn as_map(&self) -> Result<&Array4<f32>> {
        match self {
            Tensor::Map(a) => Ok(a),
            Tensor::Flat(a) => Err(Error::Geometry(format!(
                "expected a feature map, got flat features {:?}",
                a.shape()
            ))),
        }
    }

    pub fn as_flat(&self) -> Result<&Array2<f32>> {
        match self {
            Tensor::Flat(a) => Ok(a),
            Tensor::Map(a) => Err(Error::Geometry(format!(
                "expected flat features, got a feature map {:?}",
                a.shape()
            ))),
        }
    }
}

/// One trainable parameter array exposed as flat slices.
pub struct ParamPair<'a> {
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
}

/// A differentiable stage. `forward` caches whatever `backward` needs;
/// `backward` accumulates parameter gradients and returns the input gradient.
pub trait Layer: Send {
    fn name(&self) -> &'static str;
    fn forward(&mut self, input: &Tensor) -> Result<Tensor>;
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;
    /// Trainable parameters as (value, grad) slice pairs; empty for
    /// parameter-free layers.
    fn params(&mut self) -> Vec<ParamPair<'_>> {
        Vec::new()
    }
    /// Read-only parameter views in the same order as `params`.
    fn param_values(&self) -> Vec<&[f32]> {
        Vec::new()
    }
    fn param_count(&self) -> usize {
        0
    }
    fn zero_grad(&mut self) {}
}

/// Glorot-uniform initialization, the reproducible default for fresh heads.
pub fn glorot_uniform<R: Rng>(fan_in: usize, fan_out: usize, n: usize, rng: &mut R) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n)
        .map(|_| rng.gen_range(-limit..=limit) as f32)
        .collect()
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

pub struct Dense {
    pub w: Array2<f32>, // [in, out]
    pub b: Array1<f32>,
    gw: Array2<f32>,
    gb: Array1<f32>,
    cache_x: Option<Array2<f32>>,
}

impl Dense {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let w = Array2::from_shape_vec(
            (in_features, out_features),
            glorot_uniform(in_features, out_features, in_features * out_features, rng),
        )
        .expect("shape matches length");
        Dense {
            w,
            b: Array1::zeros(out_features),
            gw: Array2::zeros((in_features, out_features)),
            gb: Array1::zeros(out_features),
            cache_x: None,
        }
    }
}

impl Layer for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let x = input.as_flat()?;
        if x.shape()[1] != self.w.shape()[0] {
            return Err(Error::Geometry(format!(
                "dense expects {} features, got {}",
                self.w.shape()[0],
                x.shape()[1]
            )));
        }
        let y = x.dot(&self.w) + &self.b;
        self.cache_x = Some(x.clone());
        Ok(Tensor::Flat(y))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = grad_out.as_flat()?;
        let x = self
            .cache_x
            .as_ref()
            .ok_or_else(|| Error::Data("dense backward before forward".into()))?;
        self.gw += &x.t().dot(g);
        self.gb += &g.sum_axis(Axis(0));
        Ok(Tensor::Flat(g.dot(&self.w.t())))
    }

    fn params(&mut self) -> Vec<ParamPair<'_>> {
        vec![
            ParamPair {
                value: self.w.as_slice_mut().expect("contiguous"),
                grad: self.gw.as_slice_mut().expect("contiguous"),
            },
            ParamPair {
                value: self.b.as_slice_mut().expect("contiguous"),
                grad: self.gb.as_slice_mut().expect("contiguous"),
            },
        ]
    }

    fn param_values(&self) -> Vec<&[f32]> {
        vec![
            self.w.as_slice().expect("contiguous"),
            self.b.as_slice().expect("contiguous"),
        ]
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// Conv2d (im2col)
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_channels, in_channels * kernel * kernel]`
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    gw: Array2<f32>,
    gb: Array1<f32>,
    cache_x: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let w = Array2::from_shape_vec(
            (out_channels, fan_in),
            glorot_uniform(fan_in, fan_out, out_channels * fan_in, rng),
        )
        .expect("shape matches length");
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            w,
            b: Array1::zeros(out_channels),
            gw: Array2::zeros((out_channels, fan_in)),
            gb: Array1::zeros(out_channels),
            cache_x: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |dim: usize| -> Result<usize> {
            let padded = dim + 2 * self.pad;
            if padded < self.kernel {
                return Err(Error::Geometry(format!(
                    "conv kernel {} exceeds padded input {padded}",
                    self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    /// Unfold one image into `[in_c * k * k, out_h * out_w]` columns.
    fn im2col(&self, x: &ndarray::ArrayView3<f32>, oh: usize, ow: usize) -> Array2<f32> {
        let k = self.kernel;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut cols = Array2::zeros((self.in_channels * k * k, oh * ow));
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..oh {
                        let sy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if sy < 0 || sy as usize >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let sx = (ox * self.stride + kj) as isize - self.pad as isize;
                            if sx < 0 || sx as usize >= w {
                                continue;
                            }
                            cols[[row, oy * ow + ox]] = x[[c, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add the column gradient back onto an input-shaped image.
    fn col2im(&self, cols: &Array2<f32>, h: usize, w: usize, oh: usize, ow: usize) -> ndarray::Array3<f32> {
        let k = self.kernel;
        let mut img = ndarray::Array3::zeros((self.in_channels, h, w));
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..oh {
                        let sy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if sy < 0 || sy as usize >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let sx = (ox * self.stride + kj) as isize - self.pad as isize;
                            if sx < 0 || sx as usize >= w {
                                continue;
                            }
                            img[[c, sy as usize, sx as usize]] += cols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
        img
    }
}

impl Layer for Conv2d {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let x = input.as_map()?;
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if c != self.in_channels {
            return Err(Error::Geometry(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.out_hw(h, w)?;
        let mut out = Array4::zeros((b, self.out_channels, oh, ow));
        for i in 0..b {
            let cols = self.im2col(&x.index_axis(Axis(0), i), oh, ow);
            let y = self.w.dot(&cols); // [out_c, oh*ow]
            let mut target = out.index_axis_mut(Axis(0), i);
            for oc in 0..self.out_channels {
                let bias = self.b[oc];
                for oy in 0..oh {
                    for ox in 0..ow {
                        target[[oc, oy, ox]] = y[[oc, oy * ow + ox]] + bias;
                    }
                }
            }
        }
        self.cache_x = Some(x.clone());
        Ok(Tensor::Map(out))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = grad_out.as_map()?;
        let x = self
            .cache_x
            .as_ref()
            .ok_or_else(|| Error::Data("conv backward before forward".into()))?;
        let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let mut gx = Array4::zeros((b, self.in_channels, h, w));
        for i in 0..b {
            let gi = g.index_axis(Axis(0), i);
            let g_mat = gi
                .to_shape((self.out_channels, oh * ow))
                .expect("contiguous gradient")
                .to_owned();
            let cols = self.im2col(&x.index_axis(Axis(0), i), oh, ow);
            self.gw += &g_mat.dot(&cols.t());
            self.gb += &g_mat.sum_axis(Axis(1));
            let col_grad = self.w.t().dot(&g_mat);
            gx.index_axis_mut(Axis(0), i)
                .assign(&self.col2im(&col_grad, h, w, oh, ow));
        }
        Ok(Tensor::Map(gx))
    }

    fn params(&mut self) -> Vec<ParamPair<'_>> {
        vec![
            ParamPair {
                value: self.w.as_slice_mut().expect("contiguous"),
                grad: self.gw.as_slice_mut().expect("contiguous"),
            },
            ParamPair {
                value: self.b.as_slice_mut().expect("contiguous"),
                grad: self.gb.as_slice_mut().expect("contiguous"),
            },
        ]
    }

    fn param_values(&self) -> Vec<&[f32]> {
        vec![
            self.w.as_slice().expect("contiguous"),
            self.b.as_slice().expect("contiguous"),
        ]
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }
}

// ---------------------------------------------------------------------------
// Activations and pooling
// ---------------------------------------------------------------------------

pub struct Relu {
    mask: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = match input {
            Tensor::Map(a) => Tensor::Map(a.mapv(|v| v.max(0.0))),
            Tensor::Flat(a) => Tensor::Flat(a.mapv(|v| v.max(0.0))),
        };
        self.mask = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Data("relu backward before forward".into()))?;
        match (grad_out, mask) {
            (Tensor::Map(g), Tensor::Map(m)) => {
                let mut gx = g.clone();
                gx.zip_mut_with(m, |gv, &mv| {
                    if mv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                Ok(Tensor::Map(gx))
            }
            (Tensor::Flat(g), Tensor::Flat(m)) => {
                let mut gx = g.clone();
                gx.zip_mut_with(m, |gv, &mv| {
                    if mv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                Ok(Tensor::Flat(gx))
            }
            _ => Err(Error::Geometry("relu gradient shape mismatch".into())),
        }
    }
}

/// Gaussian error linear unit (tanh form); the ViT-style head activation.
pub struct Gelu {
    cache_x: Option<Array2<f32>>,
}

impl Gelu {
    pub fn new() -> Self {
        Gelu { cache_x: None }
    }

    fn value(x: f64) -> f64 {
        const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const B: f64 = 0.044715;
        0.5 * x * (1.0 + (A * (x + B * x.powi(3))).tanh())
    }

    fn derivative(x: f64) -> f64 {
        const A: f64 = 0.797_884_560_802_865_4;
        const B: f64 = 0.044715;
        let u = A * (x + B * x.powi(3));
        let t = u.tanh();
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x)
    }
}

impl Default for Gelu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let x = input.as_flat()?;
        self.cache_x = Some(x.clone());
        Ok(Tensor::Flat(x.mapv(|v| Self::value(f64::from(v)) as f32)))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = grad_out.as_flat()?;
        let x = self
            .cache_x
            .as_ref()
            .ok_or_else(|| Error::Data("gelu backward before forward".into()))?;
        let mut gx = g.clone();
        gx.zip_mut_with(x, |gv, &xv| {
            *gv *= Self::derivative(f64::from(xv)) as f32;
        });
        Ok(Tensor::Flat(gx))
    }
}

/// Non-overlapping average pooling (kernel == stride); trailing pixels that
/// do not fill a window are dropped.
pub struct AvgPool2d {
    pub k: usize,
    cache_shape: Option<(usize, usize, usize, usize)>,
}

impl AvgPool2d {
    pub fn new(k: usize) -> Self {
        AvgPool2d {
            k,
            cache_shape: None,
        }
    }
}

impl Layer for AvgPool2d {
    fn name(&self) -> &'static str {
        "avg_pool"
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let x = input.as_map()?;
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / self.k, w / self.k);
        if oh == 0 || ow == 0 {
            return Err(Error::Geometry(format!(
                "avg pool {0}x{0} on {h}x{w} input",
                self.k
            )));
        }
        let norm = (self.k * self.k) as f32;
        let mut out = Array4::zeros((b, c, oh, ow));
        for i in 0..b {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                acc += x[[i, ch, oy * self.k + ky, ox * self.k + kx]];
                            }
                        }
                        out[[i, ch, oy, ox]] = acc / norm;
                    }
                }
            }
        }
        self.cache_shape = Some((b, c, h, w));
        Ok(Tensor::Map(out))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = grad_out.as_map()?;
        let (b, c, h, w) = self
            .cache_shape
            .ok_or_else(|| Error::Data("avg pool backward before forward".into()))?;
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let norm = (self.k * self.k) as f32;
        let mut gx = Array4::zeros((b, c, h, w));
        for i in 0..b {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let share = g[[i, ch, oy, ox]] / norm;
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                gx[[i, ch, oy * self.k + ky, ox * self.k + kx]] = share;
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::Map(gx))
    }
}

/// Mean over all spatial positions: `[b, c, h, w] -> [b, c]`.
pub struct GlobalAvgPool {
    cache_shape: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache_shape: None }
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let x = input.as_map()?;
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let norm = (h * w) as f32;
        let mut out = Array2::zeros((b, c));
        for i in 0..b {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for y in 0..h {
                    for xx in 0..w {
                        acc += x[[i, ch, y, xx]];
                    }
                }
                out[[i, ch]] = acc / norm;
            }
        }
        self.cache_shape = Some((b, c, h, w));
        Ok(Tensor::Flat(out))
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = grad_out.as_flat()?;
        let (b, c, h, w) = self
            .cache_shape
            .ok_or_else(|| Error::Data("global avg pool backward before forward".into()))?;
        let norm = (h * w) as f32;
        let mut gx = Array4::zeros((b, c, h, w));
        for i in 0..b {
            for ch in 0..c {
                let share = g[[i, ch]] / norm;
                gx.slice_mut(ndarray::s![i, ch, .., ..]).fill(share);
            }
        }
        Ok(Tensor::Map(gx))
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Row-wise stable softmax, computed in f64.
pub fn softmax(logits: &Array2<f32>) -> Array2<f64> {
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Array2::zeros((b, n));
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let mut denom = 0.0f64;
        for j in 0..n {
            let e = (f64::from(row[j]) - max).exp();
            out[[i, j]] = e;
            denom += e;
        }
        for j in 0..n {
            out[[i, j]] /= denom;
        }
    }
    out
}

/// Mean categorical cross-entropy of logits against one-hot targets, plus the
/// logit gradient `(softmax - onehot) / batch`. A perfectly confident correct
/// prediction scores 0; a uniform N-class prediction scores ln(N).
pub fn softmax_cross_entropy(
    logits: &Array2<f32>,
    targets: &[usize],
) -> Result<(f64, Array2<f32>, Array2<f64>)> {
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != b {
        return Err(Error::Data(format!(
            "{} targets for a batch of {b}",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Data(format!("target index {bad} out of {n} classes")));
    }
    let probs = softmax(logits);
    let mut loss = 0.0f64;
    let mut grad = Array2::zeros((b, n));
    for i in 0..b {
        // clamp avoids -inf on a fully collapsed float-32 probability
        loss -= probs[[i, targets[i]]].max(1e-300).ln();
        for j in 0..n {
            let delta = probs[[i, j]] - if j == targets[i] { 1.0 } else { 0.0 };
            grad[[i, j]] = (delta / b as f64) as f32;
        }
    }
    Ok((loss / b as f64, grad, probs))
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

pub trait Optimizer {
    fn step(&mut self, params: &mut [ParamPair<'_>]);
    fn set_lr(&mut self, lr: f64);
    fn lr(&self) -> f64;
}

/// Adam with the common framework defaults (beta1 0.9, beta2 0.999, eps 1e-7).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [ParamPair<'_>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to another parameter set");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            for k in 0..p.value.len() {
                let g = f64::from(p.grad[k]);
                let m = &mut self.m[idx][k];
                let v = &mut self.v[idx][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / b1t) / ((*v / b2t).sqrt() + self.eps);
                p.value[k] = (f64::from(p.value[k]) - update) as f32;
            }
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn lr(&self) -> f64 {
        self.lr
    }
}

/// RMSProp with rho 0.9 and eps 1e-7; the stage-2 fine-tuning optimizer.
pub struct RmsProp {
    lr: f64,
    rho: f64,
    eps: f64,
    ms: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            rho: 0.9,
            eps: 1e-7,
            ms: Vec::new(),
        }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, params: &mut [ParamPair<'_>]) {
        if self.ms.is_empty() {
            self.ms = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        assert_eq!(self.ms.len(), params.len(), "optimizer bound to another parameter set");
        for (idx, p) in params.iter_mut().enumerate() {
            for k in 0..p.value.len() {
                let g = f64::from(p.grad[k]);
                let ms = &mut self.ms[idx][k];
                *ms = self.rho * *ms + (1.0 - self.rho) * g * g;
                let update = self.lr * g / (ms.sqrt() + self.eps);
                p.value[k] = (f64::from(p.value[k]) - update) as f32;
            }
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn lr(&self) -> f64 {
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;
    use ndarray::Array3;

    /// Scalar objective for gradient checks: sum of outputs weighted by fixed
    /// pseudo-random coefficients, so every output position contributes.
    fn weighted_sum(t: &Tensor, coeffs: &[f32]) -> f64 {
        let vals: Vec<f32> = match t {
            Tensor::Map(a) => a.iter().copied().collect(),
            Tensor::Flat(a) => a.iter().copied().collect(),
        };
        vals.iter()
            .zip(coeffs)
            .map(|(&v, &c)| f64::from(v) * f64::from(c))
            .sum()
    }

    fn coeff_grad_like(t: &Tensor, coeffs: &[f32]) -> Tensor {
        match t {
            Tensor::Map(a) => {
                let mut g = a.clone();
                for (gv, &c) in g.iter_mut().zip(coeffs) {
                    *gv = c;
                }
                Tensor::Map(g)
            }
            Tensor::Flat(a) => {
                let mut g = a.clone();
                for (gv, &c) in g.iter_mut().zip(coeffs) {
                    *gv = c;
                }
                Tensor::Flat(g)
            }
        }
    }

    fn tensor_len(t: &Tensor) -> usize {
        match t {
            Tensor::Map(a) => a.len(),
            Tensor::Flat(a) => a.len(),
        }
    }

    /// Central-difference check of input and parameter gradients.
    fn check_gradients(layer: &mut dyn Layer, input: Tensor, seed: u64) {
        let out = layer.forward(&input).unwrap();
        let mut rng = derive(seed, &[crate::rng::tag("coeff")]);
        let coeffs: Vec<f32> = (0..tensor_len(&out))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        layer.zero_grad();
        layer.forward(&input).unwrap();
        let gin = layer.backward(&coeff_grad_like(&out, coeffs.as_slice())).unwrap();

        let eps = 1e-2f32;
        let tol = |fd: f64| 2e-3 + 2e-2 * fd.abs();

        // input gradient
        let analytic_in: Vec<f32> = match &gin {
            Tensor::Map(a) => a.iter().copied().collect(),
            Tensor::Flat(a) => a.iter().copied().collect(),
        };
        let n_in = tensor_len(&input);
        let probe = |which: usize| n_in <= 64 || which % 7 == 0; // sample large inputs
        for i in 0..n_in {
            if !probe(i) {
                continue;
            }
            let perturb = |sign: f32, layer: &mut dyn Layer| {
                let mut x = input.clone();
                match &mut x {
                    Tensor::Map(a) => a.as_slice_mut().unwrap()[i] += sign * eps,
                    Tensor::Flat(a) => a.as_slice_mut().unwrap()[i] += sign * eps,
                }
                weighted_sum(&layer.forward(&x).unwrap(), &coeffs)
            };
            let plus = perturb(1.0, layer);
            let minus = perturb(-1.0, layer);
            let fd = (plus - minus) / (2.0 * f64::from(eps));
            assert!(
                (f64::from(analytic_in[i]) - fd).abs() <= tol(fd),
                "input grad {i}: analytic {} vs fd {fd}",
                analytic_in[i]
            );
        }

        // parameter gradients
        layer.forward(&input).unwrap(); // restore caches consumed above
        let n_params = layer.params().len();
        for p_idx in 0..n_params {
            let len = layer.params()[p_idx].value.len();
            for k in 0..len {
                if !(len <= 64 || k % 13 == 0) {
                    continue;
                }
                let analytic = f64::from(layer.params()[p_idx].grad[k]);
                let orig = layer.params()[p_idx].value[k];
                layer.params()[p_idx].value[k] = orig + eps;
                let plus = weighted_sum(&layer.forward(&input).unwrap(), &coeffs);
                layer.params()[p_idx].value[k] = orig - eps;
                let minus = weighted_sum(&layer.forward(&input).unwrap(), &coeffs);
                layer.params()[p_idx].value[k] = orig;
                let fd = (plus - minus) / (2.0 * f64::from(eps));
                assert!(
                    (analytic - fd).abs() <= tol(fd),
                    "param {p_idx}[{k}]: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    fn random_map(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = derive(seed, &[]);
        let data: Vec<f32> = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::Map(Array4::from_shape_vec((b, c, h, w), data).unwrap())
    }

    fn random_flat(b: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = derive(seed, &[]);
        let data: Vec<f32> = (0..b * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::Flat(Array2::from_shape_vec((b, f), data).unwrap())
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = derive(1, &[]);
        let mut layer = Dense::new(5, 4, &mut rng);
        check_gradients(&mut layer, random_flat(3, 5, 2), 3);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = derive(4, &[]);
        let mut layer = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        check_gradients(&mut layer, random_map(2, 2, 5, 5, 5), 6);
    }

    #[test]
    fn relu_gelu_pool_gradients_match_finite_differences() {
        // offset inputs away from relu's kink so finite differences are valid
        let Tensor::Map(mut m) = random_map(2, 2, 4, 4, 7) else {
            unreachable!()
        };
        m.mapv_inplace(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check_gradients(&mut Relu::new(), Tensor::Map(m), 8);

        check_gradients(&mut Gelu::new(), random_flat(3, 6, 9), 10);
        check_gradients(&mut AvgPool2d::new(2), random_map(2, 2, 6, 6, 11), 12);
        check_gradients(&mut GlobalAvgPool::new(), random_map(2, 3, 4, 4, 13), 14);
    }

    /// Direct dense convolution, the independent oracle for the im2col path.
    fn conv_oracle(
        x: &Array3<f32>,
        w: &Array2<f32>,
        b: &Array1<f32>,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Array3<f32> {
        let (h, wd) = (x.shape()[1], x.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Array3::zeros((out_c, oh, ow));
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = f64::from(b[oc]);
                    for c in 0..in_c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let sy = (oy * stride + ki) as isize - pad as isize;
                                let sx = (ox * stride + kj) as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy as usize >= h || sx as usize >= wd {
                                    continue;
                                }
                                let weight = w[[oc, (c * k + ki) * k + kj]];
                                acc += f64::from(weight) * f64::from(x[[c, sy as usize, sx as usize]]);
                            }
                        }
                    }
                    out[[oc, oy, ox]] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_direct_convolution_oracle() {
        let mut rng = derive(20, &[]);
        let mut conv = Conv2d::new(3, 4, 3, 2, 1, &mut rng);
        let input = random_map(2, 3, 7, 9, 21);
        let out = conv.forward(&input).unwrap();
        let Tensor::Map(out) = out else { unreachable!() };
        let Tensor::Map(x) = input else { unreachable!() };
        for i in 0..2 {
            let expected = conv_oracle(
                &x.index_axis(Axis(0), i).to_owned(),
                &conv.w,
                &conv.b,
                3,
                4,
                3,
                2,
                1,
            );
            for (a, b) in out.index_axis(Axis(0), i).iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn softmax_rows_are_probabilities() {
        let logits = Array2::from_shape_vec((2, 8), (0..16).map(|v| v as f32 / 3.0).collect()).unwrap();
        let p = softmax(&logits);
        for i in 0..2 {
            let sum: f64 = p.row(i).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        // all-equal logits: uniform prediction, loss = ln(8)
        let logits = Array2::zeros((4, 8));
        let (loss, grad, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        assert!((loss - 8.0f64.ln()).abs() < 1e-6, "{loss}");
        // gradient rows sum to ~0 (softmax simplex tangent)
        for i in 0..4 {
            let s: f32 = grad.row(i).sum();
            assert!(s.abs() < 1e-6);
        }

        // near-one-hot logits: loss ~ 0
        let mut confident = Array2::from_elem((1, 8), -40.0f32);
        confident[[0, 3]] = 40.0;
        let (loss, _, probs) = softmax_cross_entropy(&confident, &[3]).unwrap();
        assert!(loss.abs() < 1e-6, "{loss}");
        assert!((probs[[0, 3]] - 1.0).abs() < 1e-12);

        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1, 2, 9]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = derive(30, &[]);
        let data: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = Array2::from_shape_vec((3, 4), data).unwrap();
        let targets = [1usize, 0, 3];
        let (_, grad, _) = softmax_cross_entropy(&logits, &targets).unwrap();
        let eps = 1e-3f32;
        for idx in 0..logits.len() {
            let mut plus = logits.clone();
            plus.as_slice_mut().unwrap()[idx] += eps;
            let mut minus = logits.clone();
            minus.as_slice_mut().unwrap()[idx] -= eps;
            let (lp, _, _) = softmax_cross_entropy(&plus, &targets).unwrap();
            let (lm, _, _) = softmax_cross_entropy(&minus, &targets).unwrap();
            let fd = (lp - lm) / (2.0 * f64::from(eps));
            let analytic = f64::from(grad.as_slice().unwrap()[idx]);
            assert!((analytic - fd).abs() < 1e-4, "{analytic} vs {fd}");
        }
    }

    /// One-dimensional quadratic: both optimizers must descend.
    #[test]
    fn optimizers_descend_on_quadratic() {
        for opt in [true, false] {
            let mut value = vec![3.0f32];
            let mut grad = vec![0.0f32];
            let mut adam = Adam::new(0.1);
            let mut rms = RmsProp::new(0.1);
            let mut losses = Vec::new();
            for _ in 0..200 {
                losses.push(f64::from(value[0]) * f64::from(value[0]));
                grad[0] = 2.0 * value[0];
                let mut params = [ParamPair {
                    value: &mut value,
                    grad: &mut grad,
                }];
                if opt {
                    adam.step(&mut params);
                } else {
                    rms.step(&mut params);
                }
            }
            assert!(losses[199] < 1e-2 * losses[0], "{losses:?}");
        }
    }

    #[test]
    fn optimizer_lr_is_adjustable() {
        let mut rms = RmsProp::new(1e-4);
        assert_eq!(rms.lr(), 1e-4);
        rms.set_lr(2e-5);
        assert_eq!(rms.lr(), 2e-5);
    }

    #[test]
    fn layer_param_counts() {
        let mut rng = derive(40, &[]);
        let dense = Dense::new(32, 8, &mut rng);
        assert_eq!(dense.param_count(), 32 * 8 + 8);
        let conv = Conv2d::new(16, 24, 3, 2, 1, &mut rng);
        assert_eq!(conv.param_count(), 24 * 16 * 9 + 24);
        assert_eq!(Relu::new().param_count(), 0);
        assert_eq!(AvgPool2d::new(2).param_count(), 0);
        assert_eq!(GlobalAvgPool::new().param_count(), 0);
    }
}
