//! Layer implementations: forward caches, explicit backward passes.

use rand::Rng;
use rand::RngCore;

use super::{NnError, Tensor};

/// Whether stochastic layers and batch statistics are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}

// ---- batch norm ----

/// Per-feature batch normalization over the batch axis. Training mode uses
/// minibatch statistics and maintains exponential running estimates; infer
/// mode applies the running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    grad_gamma: Tensor,
    grad_beta: Tensor,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
    in_shape: Vec<usize>,
}

impl BatchNorm {
    pub fn new(features: usize) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::from_vec(&[features], vec![1.0; features]).unwrap(),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::from_vec(&[features], vec![1.0; features]).unwrap(),
            momentum: 0.9,
            eps: 1e-5,
            grad_gamma: Tensor::zeros(&[features]),
            grad_beta: Tensor::zeros(&[features]),
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        let f = self.features();
        if x.per_sample() != f {
            return Err(shape_err(
                "batch_norm",
                format!("expected {f} features per sample, got {}", x.per_sample()),
            ));
        }
        let n = x.batch();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for s in 0..n {
                    for j in 0..f {
                        mean[j] += x.data()[s * f + j];
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                for s in 0..n {
                    for j in 0..f {
                        let d = x.data()[s * f + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= n as f64;
                }
                for j in 0..f {
                    let rm = &mut self.running_mean.data_mut()[j];
                    *rm = self.momentum * *rm + (1.0 - self.momentum) * mean[j];
                    let rv = &mut self.running_var.data_mut()[j];
                    *rv = self.momentum * *rv + (1.0 - self.momentum) * var[j];
                }
                (mean, var)
            }
            Mode::Infer => (self.running_mean.data().to_vec(), self.running_var.data().to_vec()),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for s in 0..n {
            for j in 0..f {
                let h = (x.data()[s * f + j] - mean[j]) * inv_std[j];
                xhat[s * f + j] = h;
                y[s * f + j] = self.gamma.data()[j] * h + self.beta.data()[j];
            }
        }
        self.cache = Some(BnCache {
            xhat: Tensor::from_vec(&[n, f], xhat)?,
            inv_std,
            mode,
            in_shape: x.shape().to_vec(),
        });
        Tensor::from_vec(x.shape(), y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let cache = self.cache.as_ref().ok_or(NnError::DomainError {
            reason: "batch_norm backward before forward".into(),
        })?;
        let f = self.features();
        if grad.per_sample() != f || grad.shape() != cache.in_shape.as_slice() {
            return Err(shape_err(
                "batch_norm",
                format!("gradient shape {:?} does not match forward", grad.shape()),
            ));
        }
        let n = grad.batch();
        let mut dgamma = vec![0.0; f];
        let mut dbeta = vec![0.0; f];
        for s in 0..n {
            for j in 0..f {
                let g = grad.data()[s * f + j];
                dgamma[j] += g * cache.xhat.data()[s * f + j];
                dbeta[j] += g;
            }
        }
        let mut dx = vec![0.0; grad.len()];
        match cache.mode {
            Mode::Train => {
                // Full gradient through the minibatch mean and variance.
                for s in 0..n {
                    for j in 0..f {
                        let g = grad.data()[s * f + j];
                        let h = cache.xhat.data()[s * f + j];
                        dx[s * f + j] = self.gamma.data()[j] * cache.inv_std[j]
                            * (g - dbeta[j] / n as f64 - h * dgamma[j] / n as f64);
                    }
                }
            }
            Mode::Infer => {
                for s in 0..n {
                    for j in 0..f {
                        dx[s * f + j] =
                            grad.data()[s * f + j] * self.gamma.data()[j] * cache.inv_std[j];
                    }
                }
            }
        }
        for j in 0..f {
            self.grad_gamma.data_mut()[j] += dgamma[j];
            self.grad_beta.data_mut()[j] += dbeta[j];
        }
        Tensor::from_vec(&cache.in_shape, dx)
    }
}

// ---- dense ----

/// Fully connected layer: `y = x W^T + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
    /// L2 penalty coefficient on `w` (0 disables it).
    pub l2: f64,
    grad_w: Tensor,
    grad_b: Tensor,
    cache_x: Option<Tensor>,
}

impl Dense {
    pub fn new(w: Tensor, b: Tensor, l2: f64) -> Result<Dense, NnError> {
        if w.rank() != 2 || b.rank() != 1 || b.len() != w.shape()[0] {
            return Err(shape_err(
                "dense",
                format!("weight {:?} and bias {:?} do not agree", w.shape(), b.shape()),
            ));
        }
        let (gw, gb) = (Tensor::zeros(w.shape()), Tensor::zeros(b.shape()));
        Ok(Dense { w, b, l2, grad_w: gw, grad_b: gb, cache_x: None })
    }

    pub fn out_features(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.w.shape()[1]
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor, NnError> {
        let (out_f, in_f) = (self.out_features(), self.in_features());
        if x.rank() != 2 || x.shape()[1] != in_f {
            return Err(shape_err(
                "dense",
                format!("expected (N, {in_f}), got {:?}", x.shape()),
            ));
        }
        let n = x.shape()[0];
        let mut y = vec![0.0; n * out_f];
        for s in 0..n {
            let row = &x.data()[s * in_f..(s + 1) * in_f];
            for o in 0..out_f {
                let wrow = &self.w.data()[o * in_f..(o + 1) * in_f];
                let mut acc = self.b.data()[o];
                for i in 0..in_f {
                    acc += wrow[i] * row[i];
                }
                y[s * out_f + o] = acc;
            }
        }
        self.cache_x = Some(x.clone());
        Tensor::from_vec(&[n, out_f], y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let x = self.cache_x.as_ref().ok_or(NnError::DomainError {
            reason: "dense backward before forward".into(),
        })?;
        let (out_f, in_f) = (self.out_features(), self.in_features());
        let n = x.shape()[0];
        if grad.shape() != [n, out_f] {
            return Err(shape_err(
                "dense",
                format!("gradient shape {:?}, expected ({n}, {out_f})", grad.shape()),
            ));
        }
        let mut dx = vec![0.0; n * in_f];
        for s in 0..n {
            for o in 0..out_f {
                let g = grad.data()[s * out_f + o];
                self.grad_b.data_mut()[o] += g;
                for i in 0..in_f {
                    self.grad_w.data_mut()[o * in_f + i] += g * x.data()[s * in_f + i];
                    dx[s * in_f + i] += g * self.w.data()[o * in_f + i];
                }
            }
        }
        Tensor::from_vec(&[n, in_f], dx)
    }
}

// ---- dropout ----

/// Inverted dropout: active in training mode only.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    mask: Option<Tensor>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Dropout, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::ConfigInvalid {
                reason: format!("dropout rate {rate} outside [0, 1)"),
            });
        }
        Ok(Dropout { rate, mask: None })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Tensor {
        match mode {
            Mode::Infer => {
                self.mask = None;
                x.clone()
            }
            Mode::Train => {
                let keep = 1.0 - self.rate;
                let mut mask = vec![0.0; x.len()];
                for m in &mut mask {
                    if rng.gen::<f64>() >= self.rate {
                        *m = 1.0 / keep;
                    }
                }
                let mask = Tensor::from_vec(x.shape(), mask).unwrap();
                let mut y = x.clone();
                for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
                self.mask = Some(mask);
                y
            }
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        match &self.mask {
            None => Ok(grad.clone()),
            Some(mask) => {
                if mask.shape() != grad.shape() {
                    return Err(shape_err(
                        "dropout",
                        format!("gradient shape {:?} does not match forward", grad.shape()),
                    ));
                }
                let mut dx = grad.clone();
                for (v, m) in dx.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
                Ok(dx)
            }
        }
    }
}

// ---- reshape / flatten ----

/// Reshape each sample to a fixed target shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Reshape {
    /// Per-sample target (batch dimension excluded).
    pub target: Vec<usize>,
    in_shape: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(target: Vec<usize>) -> Reshape {
        Reshape { target, in_shape: None }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let want: usize = self.target.iter().product();
        if x.per_sample() != want {
            return Err(shape_err(
                "reshape",
                format!("sample has {} elements, target {:?} wants {want}", x.per_sample(), self.target),
            ));
        }
        let mut shape = vec![x.batch()];
        shape.extend_from_slice(&self.target);
        self.in_shape = Some(x.shape().to_vec());
        x.reshaped(&shape)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let shape = self.in_shape.clone().ok_or(NnError::DomainError {
            reason: "reshape backward before forward".into(),
        })?;
        grad.reshaped(&shape)
    }
}

/// Collapse each sample to a flat vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Flatten {
    in_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Flatten {
        Flatten::default()
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        self.in_shape = Some(x.shape().to_vec());
        x.reshaped(&[x.batch(), x.per_sample()])
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let shape = self.in_shape.clone().ok_or(NnError::DomainError {
            reason: "flatten backward before forward".into(),
        })?;
        grad.reshaped(&shape)
    }
}

// ---- conv2d ----

/// 2-D cross-correlation, stride 1, NHWC layout, weights `(fh, fw, in, out)`.
/// `padded` selects same-size zero padding (asymmetric low/high split for
/// even windows); otherwise the convolution is valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2D {
    pub w: Tensor,
    pub b: Tensor,
    pub padded: bool,
    grad_w: Tensor,
    grad_b: Tensor,
    cache_x: Option<Tensor>,
}

impl Conv2D {
    pub fn new(w: Tensor, b: Tensor, padded: bool) -> Result<Conv2D, NnError> {
        if w.rank() != 4 || b.rank() != 1 || b.len() != w.shape()[3] {
            return Err(shape_err(
                "conv2d",
                format!("weight {:?} and bias {:?} do not agree", w.shape(), b.shape()),
            ));
        }
        let (gw, gb) = (Tensor::zeros(w.shape()), Tensor::zeros(b.shape()));
        Ok(Conv2D { w, b, padded, grad_w: gw, grad_b: gb, cache_x: None })
    }

    /// Output spatial size for an input extent `n` under window `f`.
    pub fn out_extent(n: usize, f: usize, padded: bool) -> Option<usize> {
        if padded {
            Some(n)
        } else if n >= f {
            Some(n - f + 1)
        } else {
            None
        }
    }

    fn pads(&self) -> (isize, isize) {
        if self.padded {
            let (fh, fw) = (self.w.shape()[0], self.w.shape()[1]);
            (((fh - 1) / 2) as isize, ((fw - 1) / 2) as isize)
        } else {
            (0, 0)
        }
    }

    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor, NnError> {
        let ws = self.w.shape().to_vec();
        let (fh, fw, cin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        if x.rank() != 4 || x.shape()[3] != cin {
            return Err(shape_err(
                "conv2d",
                format!("expected (N, H, W, {cin}), got {:?}", x.shape()),
            ));
        }
        let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let oh = Self::out_extent(h, fh, self.padded).ok_or_else(|| {
            shape_err("conv2d", format!("window {fh} exceeds input height {h}"))
        })?;
        let ow = Self::out_extent(w, fw, self.padded).ok_or_else(|| {
            shape_err("conv2d", format!("window {fw} exceeds input width {w}"))
        })?;
        let (pt, pl) = self.pads();

        let mut y = Tensor::zeros(&[n, oh, ow, cout]);
        for s in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..cout {
                        let mut acc = self.b.data()[k];
                        for a in 0..fh {
                            let ih = i as isize + a as isize - pt;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for bb in 0..fw {
                                let iw = j as isize + bb as isize - pl;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                for c in 0..cin {
                                    acc += x.at4(s, ih as usize, iw as usize, c)
                                        * self.w.data()
                                            [((a * fw + bb) * cin + c) * cout + k];
                                }
                            }
                        }
                        let idx = y.idx4(s, i, j, k);
                        y.data_mut()[idx] = acc;
                    }
                }
            }
        }
        self.cache_x = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let x = self.cache_x.as_ref().ok_or(NnError::DomainError {
            reason: "conv2d backward before forward".into(),
        })?;
        let ws = self.w.shape().to_vec();
        let (fh, fw, cin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let oh = Self::out_extent(h, fh, self.padded).unwrap();
        let ow = Self::out_extent(w, fw, self.padded).unwrap();
        if grad.shape() != [n, oh, ow, cout] {
            return Err(shape_err(
                "conv2d",
                format!("gradient shape {:?}, expected ({n}, {oh}, {ow}, {cout})", grad.shape()),
            ));
        }
        let (pt, pl) = self.pads();

        let mut dx = Tensor::zeros(x.shape());
        for s in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..cout {
                        let g = grad.at4(s, i, j, k);
                        if g == 0.0 {
                            continue;
                        }
                        self.grad_b.data_mut()[k] += g;
                        for a in 0..fh {
                            let ih = i as isize + a as isize - pt;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for bb in 0..fw {
                                let iw = j as isize + bb as isize - pl;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                for c in 0..cin {
                                    let widx = ((a * fw + bb) * cin + c) * cout + k;
                                    self.grad_w.data_mut()[widx] +=
                                        g * x.at4(s, ih as usize, iw as usize, c);
                                    let didx = dx.idx4(s, ih as usize, iw as usize, c);
                                    dx.data_mut()[didx] += g * self.w.data()[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

// ---- upsample ----

/// Nearest-neighbor upsampling by an integer factor on both spatial axes.
#[derive(Debug, Clone, PartialEq)]
pub struct UpSample2D {
    pub factor: usize,
    in_shape: Option<Vec<usize>>,
}

impl UpSample2D {
    pub fn new(factor: usize) -> Result<UpSample2D, NnError> {
        if factor == 0 {
            return Err(NnError::ConfigInvalid { reason: "upsample factor 0".into() });
        }
        Ok(UpSample2D { factor, in_shape: None })
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.rank() != 4 {
            return Err(shape_err("upsample2d", format!("expected rank 4, got {:?}", x.shape())));
        }
        let u = self.factor;
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut y = Tensor::zeros(&[n, h * u, w * u, c]);
        for s in 0..n {
            for i in 0..h * u {
                for j in 0..w * u {
                    for k in 0..c {
                        let idx = y.idx4(s, i, j, k);
                        y.data_mut()[idx] = x.at4(s, i / u, j / u, k);
                    }
                }
            }
        }
        self.in_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let shape = self.in_shape.clone().ok_or(NnError::DomainError {
            reason: "upsample2d backward before forward".into(),
        })?;
        let u = self.factor;
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        if grad.shape() != [n, h * u, w * u, c] {
            return Err(shape_err(
                "upsample2d",
                format!("gradient shape {:?} does not match forward", grad.shape()),
            ));
        }
        let mut dx = Tensor::zeros(&shape);
        for s in 0..n {
            for i in 0..h * u {
                for j in 0..w * u {
                    for k in 0..c {
                        let idx = dx.idx4(s, i / u, j / u, k);
                        dx.data_mut()[idx] += grad.at4(s, i, j, k);
                    }
                }
            }
        }
        Ok(dx)
    }
}

// ---- max pool ----

/// Square max pooling with an explicit stride. Ties resolve to the first
/// (row-major) maximum so gradients are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool2D {
    pub size: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>, // (input shape, argmax flat indices)
}

impl MaxPool2D {
    pub fn new(size: usize, stride: usize) -> Result<MaxPool2D, NnError> {
        if size == 0 || stride == 0 {
            return Err(NnError::ConfigInvalid { reason: "pool size/stride 0".into() });
        }
        Ok(MaxPool2D { size, stride, cache: None })
    }

    /// Output spatial extent for input extent `n`.
    pub fn out_extent(n: usize, size: usize, stride: usize) -> Option<usize> {
        if n < size {
            None
        } else {
            Some((n - size) / stride + 1)
        }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.rank() != 4 {
            return Err(shape_err("maxpool2d", format!("expected rank 4, got {:?}", x.shape())));
        }
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let oh = Self::out_extent(h, self.size, self.stride).ok_or_else(|| {
            shape_err("maxpool2d", format!("pool {} exceeds input height {h}", self.size))
        })?;
        let ow = Self::out_extent(w, self.size, self.stride).ok_or_else(|| {
            shape_err("maxpool2d", format!("pool {} exceeds input width {w}", self.size))
        })?;
        let mut y = Tensor::zeros(&[n, oh, ow, c]);
        let mut argmax = vec![0usize; y.len()];
        for s in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for k in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for a in 0..self.size {
                            for b in 0..self.size {
                                let v = x.at4(s, i * self.stride + a, j * self.stride + b, k);
                                if v > best {
                                    best = v;
                                    best_idx =
                                        x.idx4(s, i * self.stride + a, j * self.stride + b, k);
                                }
                            }
                        }
                        let oidx = y.idx4(s, i, j, k);
                        y.data_mut()[oidx] = best;
                        argmax[oidx] = best_idx;
                    }
                }
            }
        }
        self.cache = Some((x.shape().to_vec(), argmax));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let (in_shape, argmax) = self.cache.clone().ok_or(NnError::DomainError {
            reason: "maxpool2d backward before forward".into(),
        })?;
        if grad.len() != argmax.len() {
            return Err(shape_err(
                "maxpool2d",
                format!("gradient shape {:?} does not match forward", grad.shape()),
            ));
        }
        let mut dx = Tensor::zeros(&in_shape);
        for (o, &src) in argmax.iter().enumerate() {
            dx.data_mut()[src] += grad.data()[o];
        }
        Ok(dx)
    }
}

// ---- activations ----

/// Elementwise or row-wise nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Sigmoid { cache_y: Option<Tensor> },
    LeakyReLU { slope: f64, cache_x: Option<Tensor> },
    /// Softmax over each sample's features.
    Softmax { cache_y: Option<Tensor> },
}

impl Activation {
    pub fn sigmoid() -> Activation {
        Activation::Sigmoid { cache_y: None }
    }

    pub fn leaky_relu(slope: f64) -> Activation {
        Activation::LeakyReLU { slope, cache_x: None }
    }

    pub fn softmax() -> Activation {
        Activation::Softmax { cache_y: None }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Activation::Sigmoid { cache_y } => {
                let y = x.map(sigmoid_scalar);
                *cache_y = Some(y.clone());
                Ok(y)
            }
            Activation::LeakyReLU { slope, cache_x } => {
                let a = *slope;
                let y = x.map(|v| if v > 0.0 { v } else { a * v });
                *cache_x = Some(x.clone());
                Ok(y)
            }
            Activation::Softmax { cache_y } => {
                let f = x.per_sample();
                if f == 0 {
                    return Err(shape_err("softmax", "empty sample".into()));
                }
                let n = x.batch();
                let mut y = vec![0.0; x.len()];
                for s in 0..n {
                    let row = &x.data()[s * f..(s + 1) * f];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..f {
                        let e = (row[j] - max).exp();
                        y[s * f + j] = e;
                        denom += e;
                    }
                    for j in 0..f {
                        y[s * f + j] /= denom;
                    }
                }
                let y = Tensor::from_vec(x.shape(), y)?;
                *cache_y = Some(y.clone());
                Ok(y)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let missing =
            || NnError::DomainError { reason: "activation backward before forward".into() };
        match self {
            Activation::Sigmoid { cache_y } => {
                let y = cache_y.as_ref().ok_or_else(missing)?;
                if y.shape() != grad.shape() {
                    return Err(shape_err("sigmoid", "gradient shape mismatch".into()));
                }
                let mut dx = grad.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    *g *= v * (1.0 - v);
                }
                Ok(dx)
            }
            Activation::LeakyReLU { slope, cache_x } => {
                let x = cache_x.as_ref().ok_or_else(missing)?;
                if x.shape() != grad.shape() {
                    return Err(shape_err("leaky_relu", "gradient shape mismatch".into()));
                }
                let a = *slope;
                let mut dx = grad.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    *g *= if v > 0.0 { 1.0 } else { a };
                }
                Ok(dx)
            }
            Activation::Softmax { cache_y } => {
                let y = cache_y.as_ref().ok_or_else(missing)?;
                if y.shape() != grad.shape() {
                    return Err(shape_err("softmax", "gradient shape mismatch".into()));
                }
                let f = y.per_sample();
                let n = y.batch();
                let mut dx = vec![0.0; y.len()];
                for s in 0..n {
                    let mut dot = 0.0;
                    for j in 0..f {
                        dot += grad.data()[s * f + j] * y.data()[s * f + j];
                    }
                    for j in 0..f {
                        dx[s * f + j] = y.data()[s * f + j] * (grad.data()[s * f + j] - dot);
                    }
                }
                Tensor::from_vec(y.shape(), dx)
            }
        }
    }
}

fn sigmoid_scalar(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

// ---- the layer enum ----

/// One layer of a [`super::Net`].
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    BatchNorm(BatchNorm),
    Dense(Dense),
    Dropout(Dropout),
    Reshape(Reshape),
    Conv2D(Conv2D),
    UpSample2D(UpSample2D),
    MaxPool2D(MaxPool2D),
    Flatten(Flatten),
    Activation(Activation),
}

impl Layer {
    pub fn forward(
        &mut self,
        x: &Tensor,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor, NnError> {
        match self {
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Dense(l) => l.forward(x, mode),
            Layer::Dropout(l) => Ok(l.forward(x, mode, rng)),
            Layer::Reshape(l) => l.forward(x),
            Layer::Conv2D(l) => l.forward(x, mode),
            Layer::UpSample2D(l) => l.forward(x),
            Layer::MaxPool2D(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
            Layer::Activation(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Dense(l) => l.backward(grad),
            Layer::Dropout(l) => l.backward(grad),
            Layer::Reshape(l) => l.backward(grad),
            Layer::Conv2D(l) => l.backward(grad),
            Layer::UpSample2D(l) => l.backward(grad),
            Layer::MaxPool2D(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
            Layer::Activation(l) => l.backward(grad),
        }
    }

    /// Trainable (parameter, gradient) pairs; running statistics excluded.
    pub fn params_grads_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::BatchNorm(l) => {
                vec![(&mut l.gamma, &mut l.grad_gamma), (&mut l.beta, &mut l.grad_beta)]
            }
            Layer::Dense(l) => vec![(&mut l.w, &mut l.grad_w), (&mut l.b, &mut l.grad_b)],
            Layer::Conv2D(l) => vec![(&mut l.w, &mut l.grad_w), (&mut l.b, &mut l.grad_b)],
            _ => Vec::new(),
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, g) in self.params_grads_mut() {
            g.data_mut().fill(0.0);
        }
    }

    /// L2 penalty contribution: `l2 * sum(w^2)` for flagged dense layers.
    pub fn l2_penalty(&self) -> f64 {
        match self {
            Layer::Dense(l) if l.l2 > 0.0 => {
                l.l2 * l.w.data().iter().map(|v| v * v).sum::<f64>()
            }
            _ => 0.0,
        }
    }

    /// Add the penalty gradient `2 * l2 * w` for flagged dense layers.
    pub fn add_l2_to_grads(&mut self) {
        if let Layer::Dense(l) = self {
            if l.l2 > 0.0 {
                let coeff = 2.0 * l.l2;
                for (g, &w) in l.grad_w.data_mut().iter_mut().zip(l.w.data()) {
                    *g += coeff * w;
                }
            }
        }
    }
}

// ---- functional wrappers ----

fn as_batch(x: &Tensor) -> Tensor {
    if x.rank() == 1 {
        x.reshaped(&[1, x.len()]).unwrap()
    } else {
        x.clone()
    }
}

fn like_input(y: Tensor, x: &Tensor) -> Tensor {
    if x.rank() == 1 {
        let n = y.len();
        y.reshaped(&[n]).unwrap()
    } else {
        y
    }
}

/// `max(x, 0) + slope * min(x, 0)`, elementwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// Logistic sigmoid, elementwise.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Row-wise softmax (whole tensor for rank-1 input).
pub fn softmax(x: &Tensor) -> Result<Tensor, NnError> {
    let mut l = Activation::softmax();
    Ok(like_input(l.forward(&as_batch(x))?, x))
}

/// `y = W x + b` with `W` as `(out, in)`; accepts a single vector or a batch.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let mut l = Dense::new(w.clone(), b.clone(), 0.0)?;
    Ok(like_input(l.forward(&as_batch(x), Mode::Infer)?, x))
}

/// Stride-1 cross-correlation over NHWC input.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, padded: bool) -> Result<Tensor, NnError> {
    Conv2D::new(w.clone(), b.clone(), padded)?.forward(x, Mode::Infer)
}

/// Nearest-neighbor upsampling.
pub fn upsample2d(x: &Tensor, factor: usize) -> Result<Tensor, NnError> {
    UpSample2D::new(factor)?.forward(x)
}

/// Square max pooling.
pub fn maxpool2d(x: &Tensor, size: usize, stride: usize) -> Result<Tensor, NnError> {
    MaxPool2D::new(size, stride)?.forward(x)
}

/// Threshold at strictly greater than 0.5.
pub fn binarize(x: &Tensor) -> Vec<bool> {
    x.data().iter().map(|&v| v > 0.5).collect()
}

// ---- tests ----

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn leaky_relu_closed_forms() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y.data(), &[-0.01, 0.0, 2.0]);
        let y = leaky_relu(&x, 0.1);
        assert!((y.data()[0] - -0.1).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_closed_forms() {
        let x = Tensor::vector(vec![0.0, 3.0, -3.0]);
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        // Symmetry: sigma(x) + sigma(-x) = 1.
        assert!((y.data()[1] + y.data()[2] - 1.0).abs() < 1e-12);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_closed_forms() {
        let y = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // (0, ln 3) -> (0.25, 0.75).
        let y = softmax(&Tensor::vector(vec![0.0, 3.0f64.ln()])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
        // Shift invariance.
        let a = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let b = softmax(&Tensor::vector(vec![101.0, 102.0, 103.0])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // Rows sum to one.
        let m = softmax(&t(&[2, 2], vec![0.3, -1.2, 5.0, 5.0])).unwrap();
        assert!((m.data()[0] + m.data()[1] - 1.0).abs() < 1e-12);
        assert!((m.data()[2] + m.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dense_orientation_is_w_times_x() {
        let x = Tensor::vector(vec![3.0, 7.0]);
        let id = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let swap = t(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let b0 = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(dense(&x, &id, &b0).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(dense(&x, &swap, &b0).unwrap().data(), &[7.0, 3.0]);
        // Non-square with bias: y = [1*3 + 2*7 + 10] = [27].
        let w = t(&[1, 2], vec![1.0, 2.0]);
        let b = Tensor::vector(vec![10.0]);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[27.0]);
        // Batched input keeps its rank.
        let xb = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = dense(&xb, &swap, &b0).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let x = t(&[1, 3, 3, 1], (1..=9).map(f64::from).collect());
        let w = t(&[1, 1, 1, 1], vec![1.0]);
        let b = Tensor::vector(vec![0.0]);
        let y = conv2d(&x, &w, &b, false).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 1]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_ones_kernel_matches_nested_loop_oracle() {
        // Independent oracle: plain quadruple loop over window sums.
        let x = t(&[1, 4, 5, 1], (0..20).map(f64::from).collect());
        let w = t(&[2, 2, 1, 1], vec![1.0; 4]);
        let b = Tensor::vector(vec![0.5]);
        let y = conv2d(&x, &w, &b, false).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 1]);
        for i in 0..3 {
            for j in 0..4 {
                let mut want = 0.5;
                for a in 0..2 {
                    for bb in 0..2 {
                        want += x.at4(0, i + a, j + bb, 0);
                    }
                }
                assert_eq!(y.at4(0, i, j, 0), want, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn padded_conv_preserves_spatial_size() {
        let x = t(&[1, 4, 4, 2], (0..32).map(f64::from).collect());
        let w = t(&[3, 3, 2, 5], vec![0.1; 90]);
        let b = Tensor::vector(vec![0.0; 5]);
        let y = conv2d(&x, &w, &b, true).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 5]);
        // Even window: low-side pad 0, high-side pad 1 (floor split).
        let w2 = t(&[2, 2, 2, 1], vec![1.0; 8]);
        let y2 = conv2d(&x, &w2, &Tensor::vector(vec![0.0]), true).unwrap();
        assert_eq!(y2.shape(), &[1, 4, 4, 1]);
        // Corner (3,3) sees only the in-bounds quarter of the window.
        let want = x.at4(0, 3, 3, 0) + x.at4(0, 3, 3, 1);
        assert_eq!(y2.at4(0, 3, 3, 0), want);
    }

    #[test]
    fn conv_rejects_oversized_valid_window() {
        let x = t(&[1, 2, 2, 1], vec![0.0; 4]);
        let w = t(&[3, 3, 1, 1], vec![0.0; 9]);
        assert!(conv2d(&x, &w, &Tensor::vector(vec![0.0]), false).is_err());
    }

    #[test]
    fn upsample_replicates_and_pool_inverts_it() {
        let x = t(&[1, 1, 2, 1], vec![3.0, 4.0]);
        let y = upsample2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 1]);
        assert_eq!(y.data(), &[3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);

        // maxpool(upsample(x)) with matching size/stride is the identity.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..24).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let x = t(&[2, 2, 3, 2], data);
        let up = upsample2d(&x, 2).unwrap();
        let back = maxpool2d(&up, 2, 2).unwrap();
        assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data().iter().zip(x.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn maxpool_closed_forms() {
        let x = t(&[1, 2, 2, 1], vec![1.0, 5.0, 2.0, 0.0]);
        let y = maxpool2d(&x, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
        // Constant input stays constant.
        let c = t(&[1, 4, 4, 1], vec![7.0; 16]);
        let y = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
    }

    #[test]
    fn binarize_is_strictly_greater() {
        let x = Tensor::vector(vec![0.7, 0.5, 0.2, 0.51, 0.49]);
        assert_eq!(binarize(&x), vec![true, false, false, true, false]);
    }

    #[test]
    fn dropout_scales_and_respects_mode() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let x = t(&[4, 8], vec![1.0; 32]);
        let mut d = Dropout::new(0.5).unwrap();
        let y = d.forward(&x, Mode::Train, &mut rng);
        // Kept units are scaled by 1/(1-rate); dropped are exactly zero.
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(y.data().iter().any(|&v| v == 0.0));
        assert!(y.data().iter().any(|&v| v == 2.0));
        let y = d.forward(&x, Mode::Infer, &mut rng);
        assert_eq!(y.data(), x.data());
        // Zero rate is the identity even in training.
        let mut d0 = Dropout::new(0.0).unwrap();
        let y = d0.forward(&x, Mode::Train, &mut rng);
        assert_eq!(y.data(), x.data());
        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn batch_norm_normalizes_per_feature() {
        let x = t(&[2, 2], vec![1.0, 10.0, 3.0, 30.0]);
        let mut bn = BatchNorm::new(2);
        let y = bn.forward(&x, Mode::Train).unwrap();
        // Per feature: values (1,3) and (10,30) normalize to (-1, +1).
        assert!((y.data()[0] + 1.0).abs() < 1e-2);
        assert!((y.data()[2] - 1.0).abs() < 1e-2);
        assert!((y.data()[1] + 1.0).abs() < 1e-2);
        assert!((y.data()[3] - 1.0).abs() < 1e-2);
        // Running stats moved toward the batch stats.
        assert!(bn.running_mean.data()[0] > 0.0);
        // Infer mode uses the running stats and is deterministic.
        let y1 = bn.forward(&x, Mode::Infer).unwrap();
        let y2 = bn.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn reshape_and_flatten_round_trip() {
        let x = t(&[2, 12], (0..24).map(f64::from).collect());
        let mut r = Reshape::new(vec![2, 3, 2]);
        let y = r.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 2]);
        let back = r.backward(&y).unwrap();
        assert_eq!(back.shape(), x.shape());
        let mut fl = Flatten::new();
        let z = fl.forward(&y).unwrap();
        assert_eq!(z.shape(), &[2, 12]);
        assert_eq!(z.data(), x.data());
        // Wrong element count is a shape error.
        assert!(Reshape::new(vec![5, 5]).forward(&x).is_err());
    }
}
