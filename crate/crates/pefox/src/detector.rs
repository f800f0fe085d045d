//! Black-box detector abstraction, a simulated multi-entity ensemble, and
//! the evaluation metrics.
//!
//! The ensemble stands in for an online multi-engine scanning service: it
//! is built once from a designated corpus, is immutable afterwards, and
//! exposes only verdicts. Every entity layers up to three checks — a
//! content-hash blocklist, a perceptron over a random subset of the import
//! vocabulary, and a byte-entropy threshold on executable sections — and
//! flags a file when any of its enabled checks fires. Entities cycle
//! through four check profiles (hash only, hash+classifier, hash+entropy,
//! all three) so that the different structural transforms defeat different
//! subsets of entities. The entropy score is the mean Shannon entropy of
//! the executable sections; averaging is deliberately naive, since
//! appending a low-entropy executable section dilutes the score — exactly
//! the kind of weakness a structural rewrite exploits.
//!
//! No network calls are made anywhere in this module, and no scanned file
//! is ever executed.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::pe_model::{parse_pe, PeImage};
use crate::pe_parser::{build_vocabulary, extract_features, vectorize, Vocabulary};

// ---- errors ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectorError {
    /// The detector backend cannot be reached. Never produced by the
    /// simulated ensemble; part of the abstract interface contract.
    Unavailable { reason: String },
    /// An ensemble config fails validation or cannot be parsed.
    BadConfig { reason: String },
    /// A corpus sample cannot be consumed at build time.
    BadCorpus { id: String, reason: String },
}

impl fmt::Display for DetectorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectorError::Unavailable { reason } => write!(f, "detector unavailable: {reason}"),
            DetectorError::BadConfig { reason } => write!(f, "invalid ensemble config: {reason}"),
            DetectorError::BadCorpus { id, reason } => write!(f, "corpus sample {id}: {reason}"),
        }
    }
}

impl std::error::Error for DetectorError {}

/// Errors for ratios whose denominators can legitimately be zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricError {
    /// accuracy() with a zero total count.
    DivisionByZero,
    /// evasive_rate() for a sample no entity detected in the first place.
    UndefinedForUndetected,
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::DivisionByZero => {
                write!(f, "accuracy undefined: total count is zero")
            }
            MetricError::UndefinedForUndetected => {
                write!(f, "evasive rate undefined: the original sample was never detected")
            }
        }
    }
}

impl std::error::Error for MetricError {}

// ---- verdicts ----

/// Per-entity flags for one scanned file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorVerdict {
    flags: Vec<bool>,
}

impl DetectorVerdict {
    /// Wrap raw entity flags; at least one entity is required.
    pub fn from_flags(flags: Vec<bool>) -> Result<DetectorVerdict, DetectorError> {
        if flags.is_empty() {
            return Err(DetectorError::BadConfig {
                reason: "a verdict needs at least one entity".into(),
            });
        }
        Ok(DetectorVerdict { flags })
    }

    /// Number of entities that flagged the file.
    pub fn n(&self) -> usize {
        self.flags.iter().filter(|&&b| b).count()
    }

    /// Number of entities consulted.
    pub fn total(&self) -> usize {
        self.flags.len()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Flags as a compact `0`/`1` string, entity order preserved.
    pub fn bit_string(&self) -> String {
        self.flags.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Anything that can label a candidate file. Implementations must be
/// deterministic for fixed internal state and input.
pub trait Detector {
    fn scan(&self, file: &[u8]) -> Result<DetectorVerdict, DetectorError>;
}

// ---- metrics ----

/// The three evaluation ratios, bundled for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub detection_rate: f64,
    pub evasive_rate: f64,
}

/// Fraction of correct predictions: `a / total`.
pub fn accuracy(a: usize, total: usize) -> Result<f64, MetricError> {
    if total == 0 {
        return Err(MetricError::DivisionByZero);
    }
    Ok(a as f64 / total as f64)
}

/// Fraction of entities that flagged the file: `n / N`.
pub fn detection_rate(verdict: &DetectorVerdict) -> f64 {
    verdict.n() as f64 / verdict.total() as f64
}

/// `(n_orig - n_adv) / n_orig`: how much of the original detection the
/// transformed file shook off. Negative when the transform made things
/// worse; undefined when the original was never detected.
pub fn evasive_rate(n_orig: usize, n_adv: usize) -> Result<f64, MetricError> {
    if n_orig == 0 {
        return Err(MetricError::UndefinedForUndetected);
    }
    Ok((n_orig as f64 - n_adv as f64) / n_orig as f64)
}

// ---- entropy ----

/// Shannon entropy of the byte histogram, in bits (0 to 8). Empty input
/// scores 0.
pub fn shannon_entropy(bytes: &[u8]) -> f64 {
    if bytes.is_empty() {
        return 0.0;
    }
    let mut hist = [0u64; 256];
    for &b in bytes {
        hist[b as usize] += 1;
    }
    let total = bytes.len() as f64;
    let mut h = 0.0;
    for &count in &hist {
        if count > 0 {
            let p = count as f64 / total;
            h -= p * p.log2();
        }
    }
    h
}

/// Mean Shannon entropy over the raw data of executable sections; 0 when
/// the image has none.
pub fn mean_executable_entropy(image: &PeImage) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for section in &image.sections {
        if section.header.is_executable() {
            sum += shannon_entropy(&section.data);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

// ---- ensemble config ----

/// Build-time knobs of the simulated ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEnsembleConfig {
    /// Number of simulated entities (N).
    pub entity_count: usize,
    /// Seed for every per-entity random draw.
    pub seed: u64,
    /// Probability that a designated-malicious hash lands in a given
    /// entity's blocklist; 1.0 puts every hash in every blocklist.
    pub blocklist_coverage: f64,
    /// Fraction of the vocabulary each entity's classifier sees.
    pub feature_fraction: f64,
    /// Perceptron learning rate.
    pub perceptron_lr: f64,
    /// Perceptron passes over the corpus at build time.
    pub perceptron_epochs: usize,
    /// Center of the per-entity entropy thresholds, in bits.
    pub entropy_threshold: f64,
    /// Half-width of the uniform jitter applied to each threshold.
    pub entropy_jitter: f64,
}

impl Default for SimEnsembleConfig {
    fn default() -> Self {
        SimEnsembleConfig {
            entity_count: 16,
            seed: 7,
            blocklist_coverage: 1.0,
            feature_fraction: 0.5,
            perceptron_lr: 0.1,
            perceptron_epochs: 10,
            entropy_threshold: 7.2,
            entropy_jitter: 0.3,
        }
    }
}

impl SimEnsembleConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |reason: String| Err(DetectorError::BadConfig { reason });
        if self.entity_count == 0 {
            return bad("entity_count must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.blocklist_coverage) {
            return bad(format!("blocklist_coverage {} outside [0, 1]", self.blocklist_coverage));
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return bad(format!("feature_fraction {} outside (0, 1]", self.feature_fraction));
        }
        if !self.perceptron_lr.is_finite() || self.perceptron_lr <= 0.0 {
            return bad(format!("perceptron_lr {} must be positive", self.perceptron_lr));
        }
        if !self.entropy_threshold.is_finite() {
            return bad("entropy_threshold must be finite".into());
        }
        if !self.entropy_jitter.is_finite() || self.entropy_jitter < 0.0 {
            return bad(format!("entropy_jitter {} must be nonnegative", self.entropy_jitter));
        }
        Ok(())
    }

    /// Render as a line-oriented `key value` document.
    pub fn to_document(&self) -> String {
        format!(
            "entity_count {}\nseed {}\nblocklist_coverage {}\nfeature_fraction {}\n\
             perceptron_lr {}\nperceptron_epochs {}\nentropy_threshold {}\nentropy_jitter {}\n",
            self.entity_count,
            self.seed,
            self.blocklist_coverage,
            self.feature_fraction,
            self.perceptron_lr,
            self.perceptron_epochs,
            self.entropy_threshold,
            self.entropy_jitter,
        )
    }

    /// Parse the `key value` document produced by [`Self::to_document`].
    /// Unknown keys are rejected; omitted keys keep their defaults.
    pub fn from_document(text: &str) -> Result<SimEnsembleConfig, DetectorError> {
        let mut cfg = SimEnsembleConfig::default();
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(char::is_whitespace).ok_or_else(|| {
                DetectorError::BadConfig { reason: format!("line {lineno}: missing value") }
            })?;
            let value = value.trim();
            let bad = |what: &str| DetectorError::BadConfig {
                reason: format!("line {lineno}: {what} `{value}` is not a number"),
            };
            match key {
                "entity_count" => {
                    cfg.entity_count = value.parse().map_err(|_| bad("entity_count"))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "blocklist_coverage" => {
                    cfg.blocklist_coverage = value.parse().map_err(|_| bad("blocklist_coverage"))?
                }
                "feature_fraction" => {
                    cfg.feature_fraction = value.parse().map_err(|_| bad("feature_fraction"))?
                }
                "perceptron_lr" => {
                    cfg.perceptron_lr = value.parse().map_err(|_| bad("perceptron_lr"))?
                }
                "perceptron_epochs" => {
                    cfg.perceptron_epochs = value.parse().map_err(|_| bad("perceptron_epochs"))?
                }
                "entropy_threshold" => {
                    cfg.entropy_threshold = value.parse().map_err(|_| bad("entropy_threshold"))?
                }
                "entropy_jitter" => {
                    cfg.entropy_jitter = value.parse().map_err(|_| bad("entropy_jitter"))?
                }
                other => {
                    return Err(DetectorError::BadConfig {
                        reason: format!("line {lineno}: unknown key `{other}`"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---- ensemble ----

/// One labeled build-time sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSample {
    pub id: String,
    pub bytes: Vec<u8>,
    pub malicious: bool,
}

#[derive(Debug, Clone)]
struct Entity {
    blocklist: BTreeSet<[u8; 32]>,
    /// Vocabulary indices this entity's classifier sees.
    subset: Vec<usize>,
    weights: Vec<f64>,
    bias: f64,
    entropy_threshold: f64,
    use_classifier: bool,
    use_entropy: bool,
}

impl Entity {
    fn classify_malicious(&self, bits: &[u8]) -> bool {
        let mut score = self.bias;
        for (j, &idx) in self.subset.iter().enumerate() {
            score += self.weights[j] * bits[idx] as f64;
        }
        score > 0.0
    }
}

/// A frozen ensemble of simulated scan entities.
#[derive(Debug, Clone)]
pub struct SimEnsemble {
    vocab: Vocabulary,
    entities: Vec<Entity>,
}

impl SimEnsemble {
    /// Build the ensemble from its corpus: derive the vocabulary, seed the
    /// blocklists with the designated-malicious hashes, draw per-entity
    /// feature subsets and entropy thresholds, and train each entity's
    /// perceptron. Deterministic for a fixed config and corpus.
    pub fn build(
        config: &SimEnsembleConfig,
        corpus: &[CorpusSample],
    ) -> Result<SimEnsemble, DetectorError> {
        config.validate()?;

        let mut sets = Vec::with_capacity(corpus.len());
        let mut malicious_hashes = Vec::new();
        for sample in corpus {
            let image = parse_pe(&sample.bytes).map_err(|e| DetectorError::BadCorpus {
                id: sample.id.clone(),
                reason: e.to_string(),
            })?;
            let features = extract_features(&image).map_err(|e| DetectorError::BadCorpus {
                id: sample.id.clone(),
                reason: e.to_string(),
            })?;
            sets.push(features);
            if sample.malicious {
                malicious_hashes.push(sha256_digest(&sample.bytes));
            }
        }
        let vocab = build_vocabulary(&sets);
        let vectors: Vec<(Vec<u8>, bool)> = sets
            .iter()
            .zip(corpus)
            .map(|(set, sample)| (vectorize(set, &vocab).bits().to_vec(), sample.malicious))
            .collect();

        let mut entities = Vec::with_capacity(config.entity_count);
        for i in 0..config.entity_count {
            let mut rng = ChaCha20Rng::seed_from_u64(
                config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)),
            );

            let mut blocklist = BTreeSet::new();
            for hash in &malicious_hashes {
                if rng.gen::<f64>() < config.blocklist_coverage {
                    blocklist.insert(*hash);
                }
            }

            let mut subset: Vec<usize> =
                (0..vocab.len()).filter(|_| rng.gen::<f64>() < config.feature_fraction).collect();
            if subset.is_empty() && vocab.len() > 0 {
                subset.push(rng.gen_range(0..vocab.len()));
            }

            let entropy_threshold =
                config.entropy_threshold + config.entropy_jitter * (rng.gen::<f64>() * 2.0 - 1.0);

            // Check profile cycle: every entity holds a blocklist; the
            // classifier and entropy checks come and go so the ensemble is
            // heterogeneous in what it reacts to.
            let use_classifier = i % 4 == 1 || i % 4 == 3;
            let use_entropy = i % 4 == 2 || i % 4 == 3;

            let mut weights = vec![0.0; subset.len()];
            let mut bias = 0.0;
            if use_classifier {
                for _ in 0..config.perceptron_epochs {
                    for (bits, malicious) in &vectors {
                        let mut score = bias;
                        for (j, &idx) in subset.iter().enumerate() {
                            score += weights[j] * bits[idx] as f64;
                        }
                        let predicted = score > 0.0;
                        let err = (*malicious as i8 - predicted as i8) as f64;
                        if err != 0.0 {
                            for (j, &idx) in subset.iter().enumerate() {
                                weights[j] += config.perceptron_lr * err * bits[idx] as f64;
                            }
                            bias += config.perceptron_lr * err;
                        }
                    }
                }
            }

            entities.push(Entity {
                blocklist,
                subset,
                weights,
                bias,
                entropy_threshold,
                use_classifier,
                use_entropy,
            });
        }

        Ok(SimEnsemble { vocab, entities })
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// The vocabulary the ensemble derived from its own corpus.
    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn all_flagged(&self) -> DetectorVerdict {
        DetectorVerdict { flags: vec![true; self.entities.len()] }
    }
}

impl Detector for SimEnsemble {
    /// Label one candidate file. Files that fail to parse — or whose
    /// import table cannot be walked — are flagged by every entity, the
    /// way scanners treat actively malformed input.
    fn scan(&self, file: &[u8]) -> Result<DetectorVerdict, DetectorError> {
        let image = match parse_pe(file) {
            Ok(image) => image,
            Err(_) => return Ok(self.all_flagged()),
        };
        let features = match extract_features(&image) {
            Ok(features) => features,
            Err(_) => return Ok(self.all_flagged()),
        };
        let bits = vectorize(&features, &self.vocab);
        let hash = sha256_digest(file);
        let entropy = mean_executable_entropy(&image);

        let flags = self
            .entities
            .iter()
            .map(|e| {
                e.blocklist.contains(&hash)
                    || (e.use_classifier && e.classify_malicious(bits.bits()))
                    || (e.use_entropy && entropy > e.entropy_threshold)
            })
            .collect();
        DetectorVerdict::from_flags(flags)
    }
}

fn sha256_digest(bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().into()
}

// ---- CSV export ----

/// Quote a CSV field when it contains a delimiter, quote, or newline.
pub(crate) fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render verdicts as `sample_id,bits,n,N` rows.
pub fn verdicts_to_csv(rows: &[(String, DetectorVerdict)]) -> String {
    let mut out = String::from("sample_id,bits,n,N\n");
    for (id, verdict) in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(id),
            verdict.bit_string(),
            verdict.n(),
            verdict.total()
        ));
    }
    out
}

// ---- tests ----
