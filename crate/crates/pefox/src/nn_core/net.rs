//! Layer-stack container, config-driven builders, optimizer, checkpoints.
//!
//! Checkpoint layout (all integers little-endian): magic `MFOXNN1`, `u32`
//! layer count, then one record per layer: a `u8` kind tag followed by the
//! kind's fixed fields and parameter tensors. A tensor is stored as `u32`
//! rank, `u32` extents, then the row-major `f64` values. The trailing `1`
//! in the magic is the format version.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::RngCore;

use super::layers::{
    Activation, BatchNorm, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, Mode, Reshape,
    UpSample2D,
};
use super::{NnError, Tensor};

/// First bytes of every checkpoint file; the final digit is the version.
pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MFOXNN1";

fn cfg_err(reason: String) -> NnError {
    NnError::ConfigInvalid { reason }
}

fn mul(a: usize, b: usize) -> Result<usize, NnError> {
    a.checked_mul(b).ok_or_else(|| cfg_err(format!("dimension product {a}*{b} overflows")))
}

// ---- net ----

/// An ordered layer stack with a train/infer mode switch.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    layers: Vec<Layer>,
    mode: Mode,
}

impl Net {
    pub fn from_layers(layers: Vec<Layer>) -> Net {
        Net { layers, mode: Mode::Infer }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Run the stack front to back. `rng` feeds dropout masks in train mode.
    pub fn forward(&mut self, x: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor, NnError> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, self.mode, rng)?;
        }
        Ok(cur)
    }

    /// Propagate `grad` (w.r.t. the net output) back to the input,
    /// accumulating parameter gradients along the way.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grads();
        }
    }

    /// Sum of the l2 penalties of every flagged dense layer.
    pub fn l2_penalty(&self) -> f64 {
        self.layers.iter().map(Layer::l2_penalty).sum()
    }

    /// Fold the l2 penalty gradients into the accumulated gradients.
    pub fn add_l2_to_grads(&mut self) {
        for layer in &mut self.layers {
            layer.add_l2_to_grads();
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        for layer in &mut self.layers {
            for (p, _) in layer.params_grads_mut() {
                n += p.len();
            }
        }
        n
    }

    /// Snapshot of every trainable parameter, in a fixed layer order.
    pub fn params_flat(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for (p, _) in layer.params_grads_mut() {
                out.extend_from_slice(p.data());
            }
        }
        out
    }
}

// ---- optimizer ----

/// Gradient descent with per-parameter first/second moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moment1: Vec<Vec<f64>>,
    moment2: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moment1: Vec::new(), moment2: Vec::new() }
    }

    /// Apply one update from the gradients currently accumulated in `net`.
    /// Moment buffers are allocated lazily on the first step.
    pub fn step(&mut self, net: &mut Net) -> Result<(), NnError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut slot = 0;
        for layer in net.layers_mut() {
            for (p, g) in layer.params_grads_mut() {
                if slot == self.moment1.len() {
                    self.moment1.push(vec![0.0; p.len()]);
                    self.moment2.push(vec![0.0; p.len()]);
                }
                let m = &mut self.moment1[slot];
                let v = &mut self.moment2[slot];
                if m.len() != p.len() {
                    return Err(cfg_err(format!(
                        "optimizer state ({}) does not match parameter tensor ({})",
                        m.len(),
                        p.len()
                    )));
                }
                for i in 0..p.len() {
                    let grad = g.data()[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad * grad;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
                slot += 1;
            }
        }
        Ok(())
    }
}

// ---- configs ----

/// Shape summary computed by `validate` without allocating parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetSummary {
    pub input_width: usize,
    pub output_width: usize,
    pub param_count: usize,
}

/// Generator hyperparameters. The net consumes `m + z` inputs (feature
/// vector concatenated with the noise triple) and emits `ne3` values in
/// (0, 1), one per perturbation method.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Feature vector width (vocabulary size).
    pub m: usize,
    /// Noise dimension; must equal `ne3`.
    pub z: usize,
    pub ne1: usize,
    pub ne2: usize,
    pub ne3: usize,
    /// L2 penalty on the first dense layer.
    pub re: f64,
    /// Dropout rate.
    pub r: f64,
    /// LeakyReLU slope.
    pub alpha: f64,
    /// Per-sample target (height, width, channels) ahead of the convs.
    pub reshape: (usize, usize, usize),
    /// Filter counts of the three valid convolutions.
    pub filters: (usize, usize, usize),
    /// Square window extents of the three convolutions.
    pub windows: (usize, usize, usize),
    /// Nearest-neighbor upsample factor applied after each convolution.
    pub upsample: usize,
}

impl GeneratorConfig {
    /// Check every invariant and compose the layer shapes without
    /// allocating a single parameter tensor.
    pub fn validate(&self) -> Result<NetSummary, NnError> {
        let (a, b, c) = self.reshape;
        let (cf1, cf2, cf3) = self.filters;
        let (w1, w2, w3) = self.windows;
        for (name, v) in [
            ("m", self.m),
            ("z", self.z),
            ("ne1", self.ne1),
            ("ne2", self.ne2),
            ("ne3", self.ne3),
            ("reshape height", a),
            ("reshape width", b),
            ("reshape channels", c),
            ("cf1", cf1),
            ("cf2", cf2),
            ("cf3", cf3),
            ("window 1", w1),
            ("window 2", w2),
            ("window 3", w3),
            ("upsample", self.upsample),
        ] {
            if v == 0 {
                return Err(cfg_err(format!("generator {name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.r) {
            return Err(cfg_err(format!("generator dropout {} outside [0, 1)", self.r)));
        }
        if self.alpha <= 0.0 {
            return Err(cfg_err(format!("generator slope {} must be positive", self.alpha)));
        }
        if self.re < 0.0 {
            return Err(cfg_err(format!("generator l2 penalty {} is negative", self.re)));
        }
        if mul(mul(a, b)?, c)? != self.ne2 {
            return Err(cfg_err(format!(
                "reshape {a}x{b}x{c} = {} does not equal ne2 = {}",
                a * b * c,
                self.ne2
            )));
        }
        if self.ne3 != self.z {
            return Err(cfg_err(format!(
                "output width ne3 = {} must equal noise dimension z = {}",
                self.ne3, self.z
            )));
        }

        let valid = |n: usize, f: usize, what: &str| -> Result<usize, NnError> {
            if n < f {
                Err(cfg_err(format!("generator {what}: window {f} exceeds extent {n}")))
            } else {
                Ok(n - f + 1)
            }
        };
        let u = self.upsample;
        let (mut h, mut w) = (a, b);
        h = mul(valid(h, w1, "conv 1")?, u)?;
        w = mul(valid(w, w1, "conv 1")?, u)?;
        h = mul(valid(h, w2, "conv 2")?, u)?;
        w = mul(valid(w, w2, "conv 2")?, u)?;
        h = mul(valid(h, w3, "conv 3")?, u)?;
        w = mul(valid(w, w3, "conv 3")?, u)?;
        let flatten = mul(mul(h, w)?, cf3)?;

        let input_width = self.m + self.z;
        let mut params = mul(2, input_width)?; // batch norm scale + shift
        params += mul(self.ne1, input_width)? + self.ne1;
        params += mul(self.ne2, self.ne1)? + self.ne2;
        params += mul(mul(w1, w1)?, mul(c, cf1)?)? + cf1;
        params += mul(mul(w2, w2)?, mul(cf1, cf2)?)? + cf2;
        params += mul(mul(w3, w3)?, mul(cf2, cf3)?)? + cf3;
        params += mul(self.ne3, flatten)? + self.ne3;

        Ok(NetSummary { input_width, output_width: self.ne3, param_count: params })
    }
}

/// Discriminator hyperparameters. The net consumes `m + z` inputs (feature
/// vector plus path bits) and emits `fc3 = 2` softmax class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    /// Feature vector width the net is paired with.
    pub m: usize,
    /// Path width appended to the features (3 throughout this crate).
    pub z: usize,
    /// Recorded minibatch size; batching itself is the trainer's business.
    pub n: usize,
    /// Reshape extents: input becomes an (n_step, n_input, 1) image.
    pub n_step: usize,
    pub n_input: usize,
    /// Filter counts of the four convolutions (first three zero-padded,
    /// the last valid).
    pub filters: (usize, usize, usize, usize),
    /// Square window extent shared by all four convolutions.
    pub window: usize,
    /// LeakyReLU slope.
    pub sc: f64,
    /// Max-pool stride.
    pub st: usize,
    /// Max-pool size.
    pub ps: usize,
    /// Dropout rate.
    pub r: f64,
    /// Dense widths; fc3 must be 2.
    pub fc: (usize, usize, usize),
    /// L2 penalty on the first two dense layers.
    pub re: f64,
}

impl DiscriminatorConfig {
    /// Check every invariant and compose the layer shapes without
    /// allocating parameters. The full-scale configuration would need
    /// several gigabytes for its first dense layer, so this is the only
    /// safe way to inspect it.
    pub fn validate(&self) -> Result<NetSummary, NnError> {
        let (cf1, cf2, cf3, cf4) = self.filters;
        let (fc1, fc2, fc3) = self.fc;
        for (name, v) in [
            ("m", self.m),
            ("z", self.z),
            ("n", self.n),
            ("n_step", self.n_step),
            ("n_input", self.n_input),
            ("cf1", cf1),
            ("cf2", cf2),
            ("cf3", cf3),
            ("cf4", cf4),
            ("window", self.window),
            ("stride", self.st),
            ("pool size", self.ps),
            ("fc1", fc1),
            ("fc2", fc2),
            ("fc3", fc3),
        ] {
            if v == 0 {
                return Err(cfg_err(format!("discriminator {name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.r) {
            return Err(cfg_err(format!("discriminator dropout {} outside [0, 1)", self.r)));
        }
        if self.sc <= 0.0 {
            return Err(cfg_err(format!("discriminator slope {} must be positive", self.sc)));
        }
        if self.re < 0.0 {
            return Err(cfg_err(format!("discriminator l2 penalty {} is negative", self.re)));
        }
        if mul(self.n_step, self.n_input)? != self.m + self.z {
            return Err(cfg_err(format!(
                "reshape {}x{} = {} does not equal m + z = {}",
                self.n_step,
                self.n_input,
                self.n_step * self.n_input,
                self.m + self.z
            )));
        }
        if fc3 != 2 {
            return Err(cfg_err(format!("fc3 = {fc3}, the class head must have width 2")));
        }

        let pool = |n: usize, what: &str| -> Result<usize, NnError> {
            MaxPool2D::out_extent(n, self.ps, self.st)
                .ok_or_else(|| cfg_err(format!("discriminator {what}: pool {} exceeds extent {n}", self.ps)))
        };
        let (mut h, mut w) = (self.n_step, self.n_input); // padded convs keep extents
        h = pool(h, "pool 1")?;
        w = pool(w, "pool 1")?;
        h = pool(h, "pool 2")?;
        w = pool(w, "pool 2")?;
        h = pool(h, "pool 3")?;
        w = pool(w, "pool 3")?;
        let f = self.window;
        if h < f || w < f {
            return Err(cfg_err(format!(
                "discriminator conv 4: window {f} exceeds extent {h}x{w}"
            )));
        }
        let (h, w) = (h - f + 1, w - f + 1);
        let flatten = mul(mul(h, w)?, cf4)?;

        let input_width = self.m + self.z;
        let win2 = mul(f, f)?;
        let mut params = mul(2, input_width)?;
        params += mul(win2, cf1)? + cf1; // one input channel
        params += mul(win2, mul(cf1, cf2)?)? + cf2;
        params += mul(win2, mul(cf2, cf3)?)? + cf3;
        params += mul(win2, mul(cf3, cf4)?)? + cf4;
        params += mul(fc1, flatten)? + fc1;
        params += mul(fc2, fc1)? + fc2;
        params += mul(fc3, fc2)? + fc3;

        Ok(NetSummary { input_width, output_width: fc3, param_count: params })
    }
}

/// Full-scale generator hyperparameters (vocabulary width 16 156).
pub fn reference_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        m: 16156,
        z: 3,
        ne1: 82,
        ne2: 1248,
        ne3: 3,
        re: 0.01,
        r: 0.5,
        alpha: 0.1,
        reshape: (8, 13, 12),
        filters: (32, 64, 256),
        windows: (5, 2, 2),
        upsample: 2,
    }
}

/// Full-scale discriminator hyperparameters. Validate it freely; building
/// it would allocate roughly half a billion parameters.
pub fn reference_discriminator_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        m: 16156,
        z: 3,
        n: 32,
        n_step: 143,
        n_input: 113,
        filters: (512, 256, 64, 32),
        window: 2,
        sc: 0.1,
        st: 1,
        ps: 2,
        r: 0.5,
        fc: (1024, 2, 2),
        re: 0.01,
    }
}

// ---- builders ----

fn glorot_dense(
    rng: &mut dyn RngCore,
    out_f: usize,
    in_f: usize,
    l2: f64,
) -> Result<Dense, NnError> {
    let bound = (6.0 / (in_f + out_f) as f64).sqrt();
    let data = (0..out_f * in_f).map(|_| rng.gen_range(-bound..bound)).collect();
    Dense::new(Tensor::from_vec(&[out_f, in_f], data)?, Tensor::zeros(&[out_f]), l2)
}

fn glorot_conv(
    rng: &mut dyn RngCore,
    window: usize,
    cin: usize,
    cout: usize,
    padded: bool,
) -> Result<Conv2D, NnError> {
    let fan_in = window * window * cin;
    let fan_out = window * window * cout;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * cout).map(|_| rng.gen_range(-bound..bound)).collect();
    Conv2D::new(
        Tensor::from_vec(&[window, window, cin, cout], data)?,
        Tensor::zeros(&[cout]),
        padded,
    )
}

/// Assemble the generator stack. Weights are Glorot-uniform draws from
/// `rng`; biases start at zero. The returned net starts in infer mode.
pub fn build_generator(cfg: &GeneratorConfig, rng: &mut dyn RngCore) -> Result<Net, NnError> {
    let summary = cfg.validate()?;
    let (a, b, c) = cfg.reshape;
    let (cf1, cf2, cf3) = cfg.filters;
    let (w1, w2, w3) = cfg.windows;
    let flatten = {
        // Recompose the conv chain; validate() proved it fits.
        let u = cfg.upsample;
        let (mut h, mut w) = (a, b);
        h = (h - w1 + 1) * u;
        w = (w - w1 + 1) * u;
        h = (h - w2 + 1) * u;
        w = (w - w2 + 1) * u;
        h = (h - w3 + 1) * u;
        w = (w - w3 + 1) * u;
        h * w * cf3
    };

    let layers = vec![
        Layer::BatchNorm(BatchNorm::new(summary.input_width)),
        Layer::Dense(glorot_dense(rng, cfg.ne1, summary.input_width, cfg.re)?),
        Layer::Activation(Activation::sigmoid()),
        Layer::Dropout(Dropout::new(cfg.r)?),
        Layer::Dense(glorot_dense(rng, cfg.ne2, cfg.ne1, 0.0)?),
        Layer::Activation(Activation::leaky_relu(cfg.alpha)),
        Layer::Dropout(Dropout::new(cfg.r)?),
        Layer::Reshape(Reshape::new(vec![a, b, c])),
        Layer::Conv2D(glorot_conv(rng, w1, c, cf1, false)?),
        Layer::UpSample2D(UpSample2D::new(cfg.upsample)?),
        Layer::Dropout(Dropout::new(cfg.r)?),
        Layer::Activation(Activation::leaky_relu(cfg.alpha)),
        Layer::Conv2D(glorot_conv(rng, w2, cf1, cf2, false)?),
        Layer::Dropout(Dropout::new(cfg.r)?),
        Layer::UpSample2D(UpSample2D::new(cfg.upsample)?),
        Layer::Conv2D(glorot_conv(rng, w3, cf2, cf3, false)?),
        Layer::UpSample2D(UpSample2D::new(cfg.upsample)?),
        Layer::Activation(Activation::leaky_relu(cfg.alpha)),
        Layer::Flatten(Flatten::new()),
        Layer::Dense(glorot_dense(rng, cfg.ne3, flatten, 0.0)?),
        Layer::Activation(Activation::sigmoid()),
    ];
    Ok(Net::from_layers(layers))
}

/// Assemble the discriminator stack: three zero-padded convolutions with
/// interleaved pooling, one valid convolution, then the dense head ending
/// in a two-class softmax.
pub fn build_discriminator(
    cfg: &DiscriminatorConfig,
    rng: &mut dyn RngCore,
) -> Result<Net, NnError> {
    let summary = cfg.validate()?;
    let (cf1, cf2, cf3, cf4) = cfg.filters;
    let (fc1, fc2, fc3) = cfg.fc;
    let flatten = {
        let pool = |n: usize| (n - cfg.ps) / cfg.st + 1;
        let h = pool(pool(pool(cfg.n_step))) - cfg.window + 1;
        let w = pool(pool(pool(cfg.n_input))) - cfg.window + 1;
        h * w * cf4
    };

    let layers = vec![
        Layer::BatchNorm(BatchNorm::new(summary.input_width)),
        Layer::Reshape(Reshape::new(vec![cfg.n_step, cfg.n_input, 1])),
        Layer::Conv2D(glorot_conv(rng, cfg.window, 1, cf1, true)?),
        Layer::Activation(Activation::leaky_relu(cfg.sc)),
        Layer::MaxPool2D(MaxPool2D::new(cfg.ps, cfg.st)?),
        Layer::Conv2D(glorot_conv(rng, cfg.window, cf1, cf2, true)?),
        Layer::MaxPool2D(MaxPool2D::new(cfg.ps, cfg.st)?),
        Layer::Dropout(Dropout::new(cfg.r)?),
        Layer::Conv2D(glorot_conv(rng, cfg.window, cf2, cf3, true)?),
        Layer::Activation(Activation::leaky_relu(cfg.sc)),
        Layer::MaxPool2D(MaxPool2D::new(cfg.ps, cfg.st)?),
        Layer::Dropout(Dropout::new(cfg.r)?),
        Layer::Conv2D(glorot_conv(rng, cfg.window, cf3, cf4, false)?),
        Layer::Activation(Activation::leaky_relu(cfg.sc)),
        Layer::Dropout(Dropout::new(cfg.r)?),
        Layer::Flatten(Flatten::new()),
        Layer::Dense(glorot_dense(rng, fc1, flatten, cfg.re)?),
        Layer::Dropout(Dropout::new(cfg.r)?),
        Layer::Dense(glorot_dense(rng, fc2, fc1, cfg.re)?),
        Layer::Activation(Activation::leaky_relu(cfg.sc)),
        Layer::Dropout(Dropout::new(cfg.r)?),
        Layer::Activation(Activation::sigmoid()),
        Layer::Dense(glorot_dense(rng, fc3, fc2, 0.0)?),
        Layer::Activation(Activation::softmax()),
    ];
    Ok(Net::from_layers(layers))
}

// ---- checkpoints ----

struct ByteWriter {
    out: Vec<u8>,
}

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Checkpoint {
                reason: format!("truncated at offset {}: needed {n} more bytes", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Tensor, NnError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(NnError::Checkpoint { reason: format!("tensor rank {rank} implausible") });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Tensor::from_vec(&shape, data)
    }
}

fn encode_net(net: &Net) -> Vec<u8> {
    let mut w = ByteWriter { out: CHECKPOINT_MAGIC.to_vec() };
    w.u32(net.layers().len() as u32);
    for layer in net.layers() {
        match layer {
            Layer::BatchNorm(l) => {
                w.u8(0);
                w.u32(l.features() as u32);
                w.f64(l.momentum);
                w.f64(l.eps);
                w.tensor(&l.gamma);
                w.tensor(&l.beta);
                w.tensor(&l.running_mean);
                w.tensor(&l.running_var);
            }
            Layer::Dense(l) => {
                w.u8(1);
                w.f64(l.l2);
                w.tensor(&l.w);
                w.tensor(&l.b);
            }
            Layer::Dropout(l) => {
                w.u8(2);
                w.f64(l.rate);
            }
            Layer::Reshape(l) => {
                w.u8(3);
                w.u32(l.target.len() as u32);
                for &d in &l.target {
                    w.u32(d as u32);
                }
            }
            Layer::Conv2D(l) => {
                w.u8(4);
                w.u8(l.padded as u8);
                w.tensor(&l.w);
                w.tensor(&l.b);
            }
            Layer::UpSample2D(l) => {
                w.u8(5);
                w.u32(l.factor as u32);
            }
            Layer::MaxPool2D(l) => {
                w.u8(6);
                w.u32(l.size as u32);
                w.u32(l.stride as u32);
            }
            Layer::Flatten(_) => w.u8(7),
            Layer::Activation(Activation::Sigmoid { .. }) => w.u8(8),
            Layer::Activation(Activation::LeakyReLU { slope, .. }) => {
                w.u8(9);
                w.f64(*slope);
            }
            Layer::Activation(Activation::Softmax { .. }) => w.u8(10),
        }
    }
    w.out
}

fn decode_net(buf: &[u8]) -> Result<Net, NnError> {
    if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint { reason: "bad magic; not a checkpoint file".into() });
    }
    let mut r = ByteReader { buf, pos: CHECKPOINT_MAGIC.len() };
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = r.u8()?;
        let layer = match tag {
            0 => {
                let features = r.u32()? as usize;
                let momentum = r.f64()?;
                let eps = r.f64()?;
                let gamma = r.tensor()?;
                let beta = r.tensor()?;
                let running_mean = r.tensor()?;
                let running_var = r.tensor()?;
                for t in [&gamma, &beta, &running_mean, &running_var] {
                    if t.rank() != 1 || t.len() != features {
                        return Err(NnError::Checkpoint {
                            reason: format!("layer {i}: batch-norm tensor does not have {features} entries"),
                        });
                    }
                }
                let mut bn = BatchNorm::new(features);
                bn.momentum = momentum;
                bn.eps = eps;
                bn.gamma = gamma;
                bn.beta = beta;
                bn.running_mean = running_mean;
                bn.running_var = running_var;
                Layer::BatchNorm(bn)
            }
            1 => {
                let l2 = r.f64()?;
                let w = r.tensor()?;
                let b = r.tensor()?;
                Layer::Dense(Dense::new(w, b, l2).map_err(|e| NnError::Checkpoint {
                    reason: format!("layer {i}: {e}"),
                })?)
            }
            2 => Layer::Dropout(Dropout::new(r.f64()?).map_err(|e| NnError::Checkpoint {
                reason: format!("layer {i}: {e}"),
            })?),
            3 => {
                let rank = r.u32()? as usize;
                if rank > 8 {
                    return Err(NnError::Checkpoint {
                        reason: format!("layer {i}: reshape rank {rank} implausible"),
                    });
                }
                let mut target = Vec::with_capacity(rank);
                for _ in 0..rank {
                    target.push(r.u32()? as usize);
                }
                Layer::Reshape(Reshape::new(target))
            }
            4 => {
                let padded = r.u8()? != 0;
                let w = r.tensor()?;
                let b = r.tensor()?;
                Layer::Conv2D(Conv2D::new(w, b, padded).map_err(|e| NnError::Checkpoint {
                    reason: format!("layer {i}: {e}"),
                })?)
            }
            5 => Layer::UpSample2D(UpSample2D::new(r.u32()? as usize).map_err(|e| {
                NnError::Checkpoint { reason: format!("layer {i}: {e}") }
            })?),
            6 => {
                let size = r.u32()? as usize;
                let stride = r.u32()? as usize;
                Layer::MaxPool2D(MaxPool2D::new(size, stride).map_err(|e| NnError::Checkpoint {
                    reason: format!("layer {i}: {e}"),
                })?)
            }
            7 => Layer::Flatten(Flatten::new()),
            8 => Layer::Activation(Activation::sigmoid()),
            9 => Layer::Activation(Activation::leaky_relu(r.f64()?)),
            10 => Layer::Activation(Activation::softmax()),
            other => {
                return Err(NnError::Checkpoint {
                    reason: format!("layer {i}: unknown kind tag {other}"),
                })
            }
        };
        layers.push(layer);
    }
    if r.pos != buf.len() {
        return Err(NnError::Checkpoint {
            reason: format!("{} trailing bytes after the last layer", buf.len() - r.pos),
        });
    }
    Ok(Net::from_layers(layers))
}

/// Write `net` to `path` in the documented binary layout.
pub fn save_checkpoint(net: &Net, path: &Path) -> Result<(), NnError> {
    fs::write(path, encode_net(net)).map_err(|e| NnError::Checkpoint {
        reason: format!("{}: {e}", path.display()),
    })
}

/// Read a net back from `path`. The net starts in infer mode with empty
/// forward caches.
pub fn load_checkpoint(path: &Path) -> Result<Net, NnError> {
    let buf = fs::read(path).map_err(|e| NnError::Checkpoint {
        reason: format!("{}: {e}", path.display()),
    })?;
    decode_net(&buf)
}

// ---- tests ----

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn desk_generator_config() -> GeneratorConfig {
        GeneratorConfig {
            m: 64,
            z: 3,
            ne1: 16,
            ne2: 32,
            ne3: 3,
            re: 0.01,
            r: 0.25,
            alpha: 0.1,
            reshape: (2, 4, 4),
            filters: (8, 8, 8),
            windows: (2, 2, 2),
            upsample: 2,
        }
    }

    fn desk_discriminator_config() -> DiscriminatorConfig {
        DiscriminatorConfig {
            m: 61,
            z: 3,
            n: 4,
            n_step: 8,
            n_input: 8,
            filters: (8, 8, 4, 4),
            window: 2,
            sc: 0.1,
            st: 1,
            ps: 2,
            r: 0.25,
            fc: (32, 2, 2),
            re: 0.01,
        }
    }

    #[test]
    fn reference_generator_shape_summary() {
        let s = reference_generator_config().validate().unwrap();
        assert_eq!(s.input_width, 16159);
        assert_eq!(s.output_width, 3);
        // Hand-summed: 2*16159 batch-norm + (82*16159 + 82) + (1248*82 +
        // 1248) + (5*5*12*32 + 32) + (2*2*32*64 + 64) + (2*2*64*256 + 256)
        // + (3*439296 + 3), where 439296 = 26*66*256 is the flatten width.
        assert_eq!(s.param_count, 2_862_593);
    }

    #[test]
    fn reference_discriminator_validates_without_allocating() {
        let s = reference_discriminator_config().validate().unwrap();
        assert_eq!(s.input_width, 16159);
        assert_eq!(s.output_width, 2);
        // Hand-summed: 2*16159 + (2*2*1*512 + 512) + (2*2*512*256 + 256)
        // + (2*2*256*64 + 64) + (2*2*64*32 + 32) + (1024*484832 + 1024)
        // + (2*1024 + 2) + (2*2 + 2), where 484832 = 139*109*32 after the
        // three stride-1 pools (143,113) -> (140,110) and the valid conv.
        assert_eq!(s.param_count, 497_104_294);
        // Building this would allocate ~4 GB for the dense weights alone,
        // which is exactly why validate() never touches parameter memory.
        assert!(s.param_count > 400_000_000);
    }

    #[test]
    fn desk_generator_builds_and_forward_passes() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let cfg = desk_generator_config();
        let s = cfg.validate().unwrap();
        assert_eq!(s.input_width, 67);
        assert_eq!(s.output_width, 3);
        let mut net = build_generator(&cfg, &mut rng).unwrap();
        assert_eq!(net.param_count(), s.param_count);
        let x = Tensor::from_vec(&[2, 67], (0..134).map(|i| (i % 2) as f64).collect()).unwrap();
        let y = net.forward(&x, &mut rng).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // Infer mode is deterministic: a second pass gives identical bits.
        let y2 = net.forward(&x, &mut rng).unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn desk_discriminator_softmax_rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let cfg = desk_discriminator_config();
        let s = cfg.validate().unwrap();
        assert_eq!(s.input_width, 64);
        assert_eq!(s.output_width, 2);
        let mut net = build_discriminator(&cfg, &mut rng).unwrap();
        assert_eq!(net.param_count(), s.param_count);
        let data: Vec<f64> = (0..3 * 64).map(|i| ((i * 7) % 5) as f64 / 5.0).collect();
        let x = Tensor::from_vec(&[3, 64], data).unwrap();
        let y = net.forward(&x, &mut rng).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        for s in 0..3 {
            let sum = y.data()[2 * s] + y.data()[2 * s + 1];
            assert!((sum - 1.0).abs() < 1e-9, "row {s} sums to {sum}");
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        // Reshape product != ne2.
        let mut g = desk_generator_config();
        g.reshape = (2, 4, 5);
        assert!(matches!(g.validate(), Err(NnError::ConfigInvalid { .. })));
        assert!(build_generator(&g, &mut rng).is_err());
        // Output width != noise width.
        let mut g = desk_generator_config();
        g.ne3 = 4;
        assert!(g.validate().is_err());
        // Window larger than the reshaped image.
        let mut g = desk_generator_config();
        g.windows = (3, 2, 2);
        assert!(g.validate().is_err());
        // Discriminator reshape must cover m + z exactly.
        let mut d = desk_discriminator_config();
        d.n_input = 9;
        assert!(matches!(d.validate(), Err(NnError::ConfigInvalid { .. })));
        assert!(build_discriminator(&d, &mut rng).is_err());
        // Class head must have width 2.
        let mut d = desk_discriminator_config();
        d.fc = (32, 2, 3);
        assert!(d.validate().is_err());
        // Pool cannot exceed the image.
        let mut d = desk_discriminator_config();
        d.ps = 9;
        assert!(d.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trips_desk_generator() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let mut net = build_generator(&desk_generator_config(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(net.params_flat(), loaded.params_flat());
        let x = Tensor::from_vec(&[1, 67], vec![0.5; 67]).unwrap();
        let y1 = net.forward(&x, &mut rng).unwrap();
        let y2 = loaded.forward(&x, &mut rng).unwrap();
        assert_eq!(y1.data(), y2.data());
        // Corrupt the magic and the loader refuses.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(NnError::Checkpoint { .. })));
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let w = Tensor::from_vec(&[1, 1], vec![5.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let mut net =
            Net::from_layers(vec![Layer::Dense(Dense::new(w, b, 0.0).unwrap())]);
        // Push a gradient in by hand.
        for (_, g) in net.layers_mut()[0].params_grads_mut() {
            if g.len() == 1 && g.shape().len() == 2 {
                g.data_mut()[0] = 3.0;
            }
        }
        let mut adam = Adam::new(1e-3);
        adam.step(&mut net).unwrap();
        let p = net.params_flat();
        // First step: m-hat = g, v-hat = g^2, so the move is lr * sign(g)
        // up to the epsilon in the denominator.
        assert!((p[0] - (5.0 - 1e-3)).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn l2_penalty_counts_only_flagged_layers() {
        let w = Tensor::from_vec(&[1, 2], vec![2.0, -3.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let flagged = Dense::new(w.clone(), b.clone(), 0.01).unwrap();
        let plain = Dense::new(w, b, 0.0).unwrap();
        let mut net = Net::from_layers(vec![Layer::Dense(flagged), Layer::Dense(plain)]);
        assert!((net.l2_penalty() - 0.01 * 13.0).abs() < 1e-12);
        net.add_l2_to_grads();
        // Gradient of the penalty is 2 * re * w on the flagged layer only.
        let mut seen = Vec::new();
        for layer in net.layers_mut() {
            for (_, g) in layer.params_grads_mut() {
                seen.extend_from_slice(g.data());
            }
        }
        assert_eq!(seen, vec![0.04, -0.06, 0.0, 0.0, 0.0, 0.0]);
    }
}
