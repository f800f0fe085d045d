//! Alternating generator/discriminator training with the PE editor in the
//! loop and the black-box detector labeling adversarial examples.
//!
//! Each epoch: sample a malware minibatch with Gaussian noise triples, run
//! the generator (infer mode) to obtain perturbation paths, apply them to
//! produce adversarial files, then update the discriminator on a benign
//! minibatch against the adversarial (feature vector, path) inputs. A
//! second, fresh adversarial batch is scanned by the detector and only the
//! examples still labeled malicious feed the generator update. The run
//! stops when the mean absolute parameter change of *both* nets falls
//! under the configured threshold, or at the epoch cap.
//!
//! The raw Gaussian noise feeds the generator input; its normal-CDF image
//! in `[0, 1)` picks payload instances. During the generator update the
//! discriminator consumes the generator's *continuous* outputs in place of
//! the binarized path bits — that is the only path gradients can take back
//! to the generator; binarization happens only at the editor/detector
//! boundary.

use std::fmt;

use rand::Rng;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::detector::{detection_rate, Detector, DetectorError};
use crate::nn_core::{
    binarize, loss_discriminator, loss_discriminator_grads, loss_generator, loss_generator_grad,
    Adam, Mode, Net, NnError, Tensor,
};
use crate::pe_editor::{
    apply_path, EditError, Method, PerturbationPath, StubRegistry,
};
use crate::pe_model::{serialize_pe, PeImage};
use crate::pe_parser::FeatureVector;

// ---- errors ----

#[derive(Debug)]
pub enum TrainError {
    /// Feature vectors disagree about the vocabulary width, or a net was
    /// built for a different width.
    VocabMismatch { expected: usize, got: usize },
    /// No malware or no benignware to sample from.
    EmptyDataset { which: &'static str },
    /// A perturbation method has no registered payload.
    EmptyRegistry(Method),
    /// Too many consecutive per-sample editor failures while filling one
    /// minibatch.
    EditorExhausted { attempts: usize, last: String },
    /// A config document fails validation or cannot be parsed.
    BadConfig { reason: String },
    Edit(EditError),
    Detector(DetectorError),
    Nn(NnError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::VocabMismatch { expected, got } => {
                write!(f, "vocabulary width mismatch: expected {expected}, got {got}")
            }
            TrainError::EmptyDataset { which } => write!(f, "empty dataset: no {which} samples"),
            TrainError::EmptyRegistry(m) => write!(f, "no payloads registered for {m}"),
            TrainError::EditorExhausted { attempts, last } => {
                write!(f, "editor failed {attempts} consecutive draws; last error: {last}")
            }
            TrainError::BadConfig { reason } => write!(f, "invalid train config: {reason}"),
            TrainError::Edit(e) => write!(f, "editor: {e}"),
            TrainError::Detector(e) => write!(f, "detector: {e}"),
            TrainError::Nn(e) => write!(f, "net: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<EditError> for TrainError {
    fn from(e: EditError) -> Self {
        TrainError::Edit(e)
    }
}

impl From<DetectorError> for TrainError {
    fn from(e: DetectorError) -> Self {
        TrainError::Detector(e)
    }
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Nn(e)
    }
}

// ---- config ----

/// How raw noise becomes instance-selection values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScheme {
    /// Standard-normal draws mapped through the normal CDF.
    GaussianCdf,
}

impl fmt::Display for NoiseScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseScheme::GaussianCdf => write!(f, "gaussian_cdf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Samples per class per update.
    pub minibatch: usize,
    pub max_epochs: usize,
    /// Convergence threshold on the mean absolute parameter change.
    pub delta: f64,
    pub seed: u64,
    /// Optimizer step size for both nets.
    pub lr: f64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    pub noise: NoiseScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch: 32,
            max_epochs: 200,
            delta: 1e-4,
            seed: 7,
            lr: 1e-3,
            checkpoint_interval: 0,
            noise: NoiseScheme::GaussianCdf,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.minibatch == 0 {
            return Err(TrainError::BadConfig { reason: "minibatch must be at least 1".into() });
        }
        if !(self.delta > 0.0) {
            return Err(TrainError::BadConfig {
                reason: format!("delta {} must be positive", self.delta),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadConfig {
                reason: format!("lr {} must be positive", self.lr),
            });
        }
        Ok(())
    }

    pub fn to_document(&self) -> String {
        format!(
            "minibatch {}\nmax_epochs {}\ndelta {}\nseed {}\nlr {}\ncheckpoint_interval {}\nnoise {}\n",
            self.minibatch,
            self.max_epochs,
            self.delta,
            self.seed,
            self.lr,
            self.checkpoint_interval,
            self.noise,
        )
    }

    /// Parse the `key value` document produced by [`Self::to_document`].
    pub fn from_document(text: &str) -> Result<TrainConfig, TrainError> {
        let mut cfg = TrainConfig::default();
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(char::is_whitespace).ok_or_else(|| {
                TrainError::BadConfig { reason: format!("line {lineno}: missing value") }
            })?;
            let value = value.trim();
            let bad = |what: &str| TrainError::BadConfig {
                reason: format!("line {lineno}: {what} `{value}` is not valid"),
            };
            match key {
                "minibatch" => cfg.minibatch = value.parse().map_err(|_| bad("minibatch"))?,
                "max_epochs" => cfg.max_epochs = value.parse().map_err(|_| bad("max_epochs"))?,
                "delta" => cfg.delta = value.parse().map_err(|_| bad("delta"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
                "checkpoint_interval" => {
                    cfg.checkpoint_interval =
                        value.parse().map_err(|_| bad("checkpoint_interval"))?
                }
                "noise" => {
                    cfg.noise = match value {
                        "gaussian_cdf" => NoiseScheme::GaussianCdf,
                        _ => return Err(bad("noise scheme")),
                    }
                }
                other => {
                    return Err(TrainError::BadConfig {
                        reason: format!("line {lineno}: unknown key `{other}`"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---- noise ----

/// One three-dimensional noise draw in both of its roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseTriple {
    /// Standard-normal values; these feed the generator input.
    pub raw: [f64; 3],
    /// Normal-CDF images in `[0, 1)`; these pick payload instances.
    pub mapped: [f64; 3],
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl NoiseTriple {
    pub fn from_raw(raw: [f64; 3]) -> NoiseTriple {
        let mut mapped = [0.0; 3];
        for (m, &x) in mapped.iter_mut().zip(&raw) {
            // erf saturates for huge |x|; keep the invariant mapped < 1.
            *m = normal_cdf(x).min(1.0 - f64::EPSILON);
        }
        NoiseTriple { raw, mapped }
    }
}

/// Draw one noise triple from `rng`.
pub fn sample_noise(rng: &mut dyn RngCore) -> NoiseTriple {
    let mut raw = [0.0; 3];
    for v in &mut raw {
        *v = rng.sample(StandardNormal);
    }
    NoiseTriple::from_raw(raw)
}

// ---- example generation ----

/// Concatenate feature bits and the path's binary bits into one
/// discriminator input row of width `expected_width`.
pub fn discriminator_input(
    fv: &FeatureVector,
    path: &PerturbationPath,
    expected_width: usize,
) -> Result<Tensor, NnError> {
    let width = fv.bits().len() + 3;
    if width != expected_width {
        return Err(NnError::ShapeMismatch {
            op: "discriminator_input",
            detail: format!("feature width {} + 3 != expected {expected_width}", fv.bits().len()),
        });
    }
    let mut data = Vec::with_capacity(width);
    data.extend(fv.bits().iter().map(|&b| b as f64));
    data.extend(path.bits.iter().map(|&b| b as u8 as f64));
    Tensor::from_vec(&[width], data)
}

/// Run the generator (infer mode) on `concat(fv, noise.raw)`, binarize the
/// output into a perturbation path, and apply it to `image`. Returns the
/// rewritten file bytes and the path that produced them.
pub fn generate_example(
    image: &PeImage,
    fv: &FeatureVector,
    gen: &mut Net,
    noise: &NoiseTriple,
    registry: &StubRegistry,
    rng: &mut dyn RngCore,
) -> Result<(Vec<u8>, PerturbationPath), TrainError> {
    gen.set_mode(Mode::Infer);
    let output = gen.forward(&generator_input(fv, noise), rng)?;
    if output.len() != 3 {
        return Err(TrainError::Nn(NnError::ShapeMismatch {
            op: "generate_example",
            detail: format!("generator emitted {} values, path needs 3", output.len()),
        }));
    }
    let bits = binarize(&output);
    let path = PerturbationPath::new([bits[0], bits[1], bits[2]], noise.mapped);
    let (edited, _report) = apply_path(image, &path, registry)?;
    let bytes = serialize_pe(&edited).map_err(EditError::from)?;
    Ok((bytes, path))
}

fn generator_input(fv: &FeatureVector, noise: &NoiseTriple) -> Tensor {
    let mut data: Vec<f64> = fv.bits().iter().map(|&b| b as f64).collect();
    data.extend_from_slice(&noise.raw);
    Tensor::from_vec(&[1, data.len()], data).unwrap()
}

// ---- history ----

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub disc_accuracy: f64,
    pub mean_detection_rate: f64,
    pub mean_evasive_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// True when the run ended on the parameter-delta criterion rather
    /// than the epoch cap.
    pub converged: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,loss_d,loss_g,disc_accuracy,mean_detection_rate,mean_evasive_rate\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.loss_d, r.loss_g, r.disc_accuracy, r.mean_detection_rate, r.mean_evasive_rate
            ));
        }
        out
    }
}

// ---- training ----

struct DrawnExample {
    index: usize,
    noise: NoiseTriple,
    bytes: Vec<u8>,
    path: PerturbationPath,
}

/// Fill one adversarial minibatch, redrawing any sample whose edit fails.
fn draw_batch(
    malware: &[(PeImage, FeatureVector)],
    gen: &mut Net,
    registry: &StubRegistry,
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<DrawnExample>, TrainError> {
    let mut out = Vec::with_capacity(cfg.minibatch);
    let cap = 8 * cfg.minibatch;
    let mut attempts = 0;
    let mut last_error = String::new();
    while out.len() < cfg.minibatch {
        if attempts >= cap {
            return Err(TrainError::EditorExhausted { attempts, last: last_error });
        }
        attempts += 1;
        let index = rng.gen_range(0..malware.len());
        let noise = sample_noise(rng);
        let (image, fv) = &malware[index];
        match generate_example(image, fv, gen, &noise, registry, rng) {
            Ok((bytes, path)) => out.push(DrawnExample { index, noise, bytes, path }),
            // Per-sample skip-and-redraw: one bad file never aborts a run.
            Err(TrainError::Edit(e)) => last_error = e.to_string(),
            Err(other) => return Err(other),
        }
    }
    Ok(out)
}

fn malicious_probs(output: &Tensor) -> Result<Vec<f64>, TrainError> {
    if output.per_sample() != 2 {
        return Err(TrainError::Nn(NnError::ShapeMismatch {
            op: "malicious_probs",
            detail: format!("expected 2 class columns, got {}", output.per_sample()),
        }));
    }
    // Column 0 is the benign class, column 1 the malicious class.
    Ok((0..output.batch()).map(|s| output.data()[2 * s + 1]).collect())
}

fn class_grad_tensor(batch: usize, malicious_grads: &[f64]) -> Tensor {
    let mut data = vec![0.0; batch * 2];
    for (s, &g) in malicious_grads.iter().enumerate() {
        data[2 * s + 1] = g;
    }
    Tensor::from_vec(&[batch, 2], data).unwrap()
}

/// One discriminator step on fixed benign/adversarial input batches.
/// Returns the recorded loss (data loss plus l2 penalty) and the fraction
/// of the 2n inputs classified correctly.
fn discriminator_update(
    disc: &mut Net,
    opt: &mut Adam,
    benign_x: &Tensor,
    adversarial_x: &Tensor,
    rng: &mut ChaCha20Rng,
) -> Result<(f64, f64), TrainError> {
    disc.set_mode(Mode::Train);
    disc.zero_grads();

    let out_b = disc.forward(benign_x, rng)?;
    let probs_b = malicious_probs(&out_b)?;
    // Backward must run while this forward's caches are still live.
    let (grads_b, _) = loss_discriminator_grads(&probs_b, &[0.5])?;
    disc.backward(&class_grad_tensor(probs_b.len(), &grads_b))?;

    let out_m = disc.forward(adversarial_x, rng)?;
    let probs_m = malicious_probs(&out_m)?;
    let (_, grads_m) = loss_discriminator_grads(&[0.5], &probs_m)?;
    disc.backward(&class_grad_tensor(probs_m.len(), &grads_m))?;

    let loss = loss_discriminator(&probs_b, &probs_m)? + disc.l2_penalty();
    disc.add_l2_to_grads();
    opt.step(disc)?;

    let correct = probs_b.iter().filter(|&&p| p <= 0.5).count()
        + probs_m.iter().filter(|&&p| p > 0.5).count();
    let accuracy = correct as f64 / (probs_b.len() + probs_m.len()) as f64;
    Ok((loss, accuracy))
}

fn mean_abs_delta(before: &[f64], after: &[f64]) -> f64 {
    if before.is_empty() {
        return 0.0;
    }
    before.iter().zip(after).map(|(a, b)| (a - b).abs()).sum::<f64>() / before.len() as f64
}

/// Run the full training loop. See [`train_with_hook`].
pub fn train(
    cfg: &TrainConfig,
    malware: &[(PeImage, FeatureVector)],
    benign: &[FeatureVector],
    gen: Net,
    disc: Net,
    registry: &StubRegistry,
    detector: &dyn Detector,
) -> Result<(Net, Net, TrainHistory), TrainError> {
    train_with_hook(cfg, malware, benign, gen, disc, registry, detector, &mut |_, _, _| Ok(()))
}

/// Run the full training loop, invoking `hook(gen, disc, record)` after
/// every epoch (checkpointing lives there). Deterministic for fixed
/// config, data, and initial nets.
#[allow(clippy::too_many_arguments)]
pub fn train_with_hook(
    cfg: &TrainConfig,
    malware: &[(PeImage, FeatureVector)],
    benign: &[FeatureVector],
    mut gen: Net,
    mut disc: Net,
    registry: &StubRegistry,
    detector: &dyn Detector,
    hook: &mut dyn FnMut(&Net, &Net, &EpochRecord) -> Result<(), TrainError>,
) -> Result<(Net, Net, TrainHistory), TrainError> {
    cfg.validate()?;
    if malware.is_empty() {
        return Err(TrainError::EmptyDataset { which: "malware" });
    }
    if benign.is_empty() {
        return Err(TrainError::EmptyDataset { which: "benignware" });
    }
    let m = malware[0].1.bits().len();
    for (_, fv) in malware {
        if fv.bits().len() != m {
            return Err(TrainError::VocabMismatch { expected: m, got: fv.bits().len() });
        }
    }
    for fv in benign {
        if fv.bits().len() != m {
            return Err(TrainError::VocabMismatch { expected: m, got: fv.bits().len() });
        }
    }
    for method in [Method::Obfusmal, Method::Stealmal, Method::Hollowmal] {
        if registry.instance_count(method) == 0 {
            return Err(TrainError::EmptyRegistry(method));
        }
    }

    let width = m + 3;
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 {
        return Ok((gen, disc, history));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut opt_g = Adam::new(cfg.lr);
    let mut opt_d = Adam::new(cfg.lr);

    // Baseline verdicts for the evasive-rate metric, scanned once.
    let mut orig_n = Vec::with_capacity(malware.len());
    for (image, _) in malware {
        let bytes = serialize_pe(image).map_err(EditError::from)?;
        orig_n.push(detector.scan(&bytes)?.n());
    }

    let identity = PerturbationPath::new([false; 3], [0.0; 3]);
    for epoch in 0..cfg.max_epochs {
        let gen_before = gen.params_flat();
        let disc_before = disc.params_flat();

        // -- discriminator phase (adversarial paths from the frozen
        //    generator against a fresh benign minibatch) --
        let batch = draw_batch(malware, &mut gen, registry, cfg, &mut rng)?;
        let mut adv_rows = Vec::with_capacity(cfg.minibatch * width);
        for ex in &batch {
            let row = discriminator_input(&malware[ex.index].1, &ex.path, width)?;
            adv_rows.extend_from_slice(row.data());
        }
        let adversarial_x = Tensor::from_vec(&[cfg.minibatch, width], adv_rows)?;

        let mut benign_rows = Vec::with_capacity(cfg.minibatch * width);
        for _ in 0..cfg.minibatch {
            let fv = &benign[rng.gen_range(0..benign.len())];
            let row = discriminator_input(fv, &identity, width)?;
            benign_rows.extend_from_slice(row.data());
        }
        let benign_x = Tensor::from_vec(&[cfg.minibatch, width], benign_rows)?;

        let (loss_d, disc_accuracy) =
            discriminator_update(&mut disc, &mut opt_d, &benign_x, &adversarial_x, &mut rng)?;

        // -- generator phase (fresh noise and examples, detector-labeled) --
        let batch = draw_batch(malware, &mut gen, registry, cfg, &mut rng)?;
        let mut rates = Vec::with_capacity(batch.len());
        let mut evasive = Vec::new();
        let mut kept = Vec::new();
        for ex in &batch {
            let verdict = detector.scan(&ex.bytes)?;
            rates.push(detection_rate(&verdict));
            if orig_n[ex.index] > 0 {
                evasive.push(
                    (orig_n[ex.index] as f64 - verdict.n() as f64) / orig_n[ex.index] as f64,
                );
            }
            if verdict.n() > 0 {
                kept.push(ex);
            }
        }
        let mean_detection_rate = rates.iter().sum::<f64>() / rates.len() as f64;
        let mean_evasive_rate = if evasive.is_empty() {
            0.0
        } else {
            evasive.iter().sum::<f64>() / evasive.len() as f64
        };

        let loss_g = if kept.is_empty() {
            0.0 // every example already evades; nothing to learn from
        } else {
            gen.set_mode(Mode::Train);
            disc.set_mode(Mode::Train);
            let mut gen_rows = Vec::with_capacity(kept.len() * width);
            for ex in &kept {
                let x = generator_input(&malware[ex.index].1, &ex.noise);
                gen_rows.extend_from_slice(x.data());
            }
            let gen_x = Tensor::from_vec(&[kept.len(), width], gen_rows)?;
            let o = gen.forward(&gen_x, &mut rng)?;

            // Discriminator input: feature bits with the continuous
            // generator outputs in the three path columns.
            let mut d_rows = Vec::with_capacity(kept.len() * width);
            for (s, ex) in kept.iter().enumerate() {
                d_rows.extend(malware[ex.index].1.bits().iter().map(|&b| b as f64));
                d_rows.extend_from_slice(&o.data()[3 * s..3 * s + 3]);
            }
            let d_x = Tensor::from_vec(&[kept.len(), width], d_rows)?;
            let d_out = disc.forward(&d_x, &mut rng)?;
            let probs = malicious_probs(&d_out)?;
            let loss = loss_generator(&probs)?;
            let grads = loss_generator_grad(&probs)?;

            // The discriminator stays frozen: its gradients are discarded
            // (zeroed again before its next update); only the input
            // gradient's path columns flow back into the generator.
            disc.zero_grads();
            let d_input_grad = disc.backward(&class_grad_tensor(kept.len(), &grads))?;
            let mut o_grad = vec![0.0; kept.len() * 3];
            for s in 0..kept.len() {
                for j in 0..3 {
                    o_grad[3 * s + j] = d_input_grad.data()[s * width + m + j];
                }
            }
            gen.zero_grads();
            gen.backward(&Tensor::from_vec(&[kept.len(), 3], o_grad)?)?;
            opt_g.step(&mut gen)?;
            loss
        };

        let gen_after = gen.params_flat();
        let disc_after = disc.params_flat();
        let record = EpochRecord {
            epoch,
            loss_d,
            loss_g,
            disc_accuracy,
            mean_detection_rate,
            mean_evasive_rate,
        };
        hook(&gen, &disc, &record)?;
        history.records.push(record);

        if mean_abs_delta(&gen_before, &gen_after) < cfg.delta
            && mean_abs_delta(&disc_before, &disc_after) < cfg.delta
        {
            history.converged = true;
            break;
        }
    }

    gen.set_mode(Mode::Infer);
    disc.set_mode(Mode::Infer);
    Ok((gen, disc, history))
}

// ---- tests ----
