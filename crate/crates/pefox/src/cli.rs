//! Command-line surface: parse, features, perturb, train, evaluate, and a
//! synth command that writes a ready-to-train demo workspace.
//!
//! Exit codes are a stable contract: 0 success, 1 partial failure (some
//! inputs processed), 2 usage or configuration error, 3 editor error,
//! 4 training runtime error. All randomness flows from explicit seeds;
//! rerunning any command with identical inputs produces byte-identical
//! outputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::demo;
use crate::detector::{
    csv_field, detection_rate, evasive_rate, verdicts_to_csv, Detector, DetectorVerdict,
    MetricError, SimEnsemble, SimEnsembleConfig,
};
use crate::nn_core::save_checkpoint;
use crate::pe_editor::{apply_path_with_key, PerturbationPath, StubRegistry};
use crate::pe_model::{parse_pe, PeImage};
use crate::pe_parser::{
    build_vocabulary, extract_features, vectorize, walk_imports, FeatureVector, Vocabulary,
};
use crate::trainer::{train_with_hook, TrainConfig, TrainError};

// ---- errors and exit codes ----

/// Command failure with its contractual exit code.
#[derive(Debug)]
pub enum CliError {
    /// Some inputs succeeded, some failed (exit 1).
    Partial { failed: usize, total: usize },
    /// Bad usage, arguments, or configuration (exit 2).
    Config(String),
    /// Editor failure while rewriting a file (exit 3).
    Editor(String),
    /// Failure inside a training run (exit 4).
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Partial { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Editor(_) => 3,
            CliError::Training(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Partial { failed, total } => {
                write!(f, "{failed} of {total} inputs failed")
            }
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Editor(msg) => write!(f, "{msg}"),
            CliError::Training(msg) => write!(f, "{msg}"),
        }
    }
}

fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| {
                CliError::Config(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    fs::write(path, bytes)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Format with six significant digits; integral and special values print
/// through unchanged.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor();
    let scale = 10f64.powf(5.0 - magnitude);
    format!("{}", (v * scale).round() / scale)
}

// ---- argument surface ----

#[derive(Parser, Debug)]
#[command(name = "pefox", version, about = "PE parsing, perturbation, and GAN training pipeline")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print header, section, and import details of one PE file.
    Parse { file: PathBuf },
    /// Extract feature vectors; builds the vocabulary when absent.
    Features {
        /// PE files to vectorize.
        files: Vec<PathBuf>,
        /// Feature-vector output file.
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary to use; built from the inputs (and written here) if
        /// the file does not exist yet.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Apply a perturbation path to one file.
    Perturb {
        file: PathBuf,
        /// Three-character bit string selecting the methods, e.g. 110.
        #[arg(long)]
        path: String,
        /// Registry manifest of payload files.
        #[arg(long)]
        registry: PathBuf,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// XOR key as a hex byte.
        #[arg(long, default_value = "15")]
        key: String,
    },
    /// Run the training loop described by a run manifest.
    Train {
        manifest: PathBuf,
        /// Override the configured epoch cap.
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Override the configured minibatch size.
        #[arg(long)]
        minibatch: Option<usize>,
    },
    /// Scan samples with a simulated ensemble and write verdict/metric CSVs.
    Evaluate {
        /// Files to scan.
        samples: Vec<PathBuf>,
        /// Dataset manifest providing the ensemble's labeled corpus.
        #[arg(long)]
        dataset: PathBuf,
        /// Ensemble configuration document.
        #[arg(long)]
        ensemble: PathBuf,
        /// Verdict CSV of the original samples, matched to the scanned
        /// files by position; enables the evasive-rate column.
        #[arg(long)]
        originals: Option<PathBuf>,
        /// Output directory for verdicts.csv and metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a complete demo workspace: corpus, payloads, configs, manifest.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Malicious sample count.
        #[arg(long, default_value_t = 100)]
        malicious: usize,
        /// Benign sample count.
        #[arg(long, default_value_t = 100)]
        benign: usize,
    },
}

/// Parse `args` and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Parse { file } => cmd_parse(&file),
        Command::Features { files, out, vocab } => cmd_features(&files, &out, vocab.as_deref()),
        Command::Perturb { file, path, registry, out, key } => {
            cmd_perturb(&file, &path, &registry, &out, &key)
        }
        Command::Train { manifest, max_epochs, minibatch } => {
            cmd_train(&manifest, max_epochs, minibatch)
        }
        Command::Evaluate { samples, dataset, ensemble, originals, out } => {
            cmd_evaluate(&samples, &dataset, &ensemble, originals.as_deref(), &out)
        }
        Command::Synth { out, seed, malicious, benign } => cmd_synth(&out, seed, malicious, benign),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---- parse ----

fn cmd_parse(file: &Path) -> Result<(), CliError> {
    let bytes = read_file(file)?;
    let image = parse_pe(&bytes).map_err(config_err)?;
    let opt = &image.optional;
    println!(
        "machine {:#06x}  sections {}  characteristics {:#06x}",
        image.file_header.machine,
        image.file_header.number_of_sections,
        image.file_header.characteristics
    );
    println!(
        "{:?}  entry {:#010x}  image_base {:#x}  alignment {}/{}  size_of_image {:#x}",
        opt.kind,
        opt.entry_point_rva,
        opt.image_base,
        opt.file_alignment,
        opt.section_alignment,
        opt.size_of_image
    );
    println!("{:<10} {:>10} {:>10} {:>10} {:>10}  flags", "section", "vsize", "rva", "raw", "foa");
    for s in &image.sections {
        let h = &s.header;
        println!(
            "{:<10} {:>#10x} {:>#10x} {:>#10x} {:>#10x}  {:#010x}{}",
            h.name_str(),
            h.virtual_size,
            h.virtual_address,
            h.size_of_raw_data,
            h.pointer_to_raw_data,
            h.characteristics,
            if h.is_executable() { " exec" } else { "" }
        );
    }
    let imports = walk_imports(&image).map_err(config_err)?;
    println!("imports: {} descriptor(s)", imports.len());
    for entry in &imports {
        println!("  {}", entry.dll_name);
        for f in &entry.function_names {
            println!("    {f}");
        }
        if entry.by_ordinal_count > 0 {
            println!("    ({} by ordinal)", entry.by_ordinal_count);
        }
    }
    Ok(())
}

// ---- features ----

fn sample_id(path: &Path) -> String {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    name.split_whitespace().collect::<Vec<_>>().join("_")
}

fn cmd_features(files: &[PathBuf], out: &Path, vocab_path: Option<&Path>) -> Result<(), CliError> {
    if files.is_empty() {
        return Err(CliError::Config("no input files".into()));
    }
    let mut parsed = Vec::new();
    let mut failed = 0usize;
    for file in files {
        let outcome = read_file(file).and_then(|bytes| {
            let image = parse_pe(&bytes).map_err(config_err)?;
            extract_features(&image).map_err(config_err)
        });
        match outcome {
            Ok(set) => parsed.push((sample_id(file), set)),
            Err(e) => {
                eprintln!("{}: {e}", file.display());
                failed += 1;
            }
        }
    }

    let vocab = match vocab_path {
        Some(p) if p.exists() => Vocabulary::from_document(&read_text(p)?).map_err(config_err)?,
        _ => {
            let sets: Vec<_> = parsed.iter().map(|(_, s)| s.clone()).collect();
            let vocab = build_vocabulary(&sets);
            let target = vocab_path
                .map(Path::to_path_buf)
                .unwrap_or_else(|| out.with_extension("vocab"));
            write_file(&target, vocab.to_document().as_bytes())?;
            println!("vocabulary ({} names) -> {}", vocab.len(), target.display());
            vocab
        }
    };

    let samples: Vec<(String, FeatureVector)> =
        parsed.iter().map(|(id, set)| (id.clone(), vectorize(set, &vocab))).collect();
    let doc = crate::pe_parser::write_feature_vectors(&vocab, &samples).map_err(config_err)?;
    write_file(out, doc.as_bytes())?;
    println!("{} vector(s) -> {}", samples.len(), out.display());
    if failed > 0 {
        return Err(CliError::Partial { failed, total: files.len() });
    }
    Ok(())
}

// ---- perturb ----

fn cmd_perturb(
    file: &Path,
    path_literal: &str,
    registry_path: &Path,
    out: &Path,
    key_literal: &str,
) -> Result<(), CliError> {
    let path = PerturbationPath::from_bit_string(path_literal).ok_or_else(|| {
        CliError::Config(format!("invalid path literal '{path_literal}': want three bits like 110"))
    })?;
    let key = u8::from_str_radix(key_literal, 16)
        .map_err(|_| CliError::Config(format!("invalid key '{key_literal}': want a hex byte")))?;
    let bytes = read_file(file)?;
    let image = parse_pe(&bytes).map_err(config_err)?;
    let registry = StubRegistry::from_manifest_file(registry_path)
        .map_err(|e| CliError::Editor(e.to_string()))?;
    let (edited, report) = apply_path_with_key(&image, &path, &registry, key)
        .map_err(|e| CliError::Editor(e.to_string()))?;
    let out_bytes =
        crate::pe_model::serialize_pe(&edited).map_err(|e| CliError::Editor(e.to_string()))?;
    write_file(out, &out_bytes)?;
    print!("{}", report.to_document());
    println!("output -> {}", out.display());
    Ok(())
}

// ---- run manifest ----

/// Paths and the master seed for one training run. Relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub dataset: PathBuf,
    pub vocabulary: PathBuf,
    pub registry: PathBuf,
    pub ensemble: PathBuf,
    pub train_config: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl RunManifest {
    pub fn to_document(&self) -> String {
        format!(
            "dataset {}\nvocabulary {}\nregistry {}\nensemble {}\ntrain_config {}\nout_dir {}\nseed {}\n",
            self.dataset.display(),
            self.vocabulary.display(),
            self.registry.display(),
            self.ensemble.display(),
            self.train_config.display(),
            self.out_dir.display(),
            self.seed
        )
    }

    pub fn from_document(text: &str, base_dir: &Path) -> Result<RunManifest, CliError> {
        let mut fields: std::collections::BTreeMap<&str, String> = Default::default();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(char::is_whitespace).ok_or_else(|| {
                CliError::Config(format!("manifest line {}: missing value", idx + 1))
            })?;
            fields.insert(key, value.trim().to_string());
        }
        let mut path_of = |key: &str| -> Result<PathBuf, CliError> {
            let value = fields
                .remove(key)
                .ok_or_else(|| CliError::Config(format!("manifest is missing '{key}'")))?;
            Ok(base_dir.join(value))
        };
        let manifest = RunManifest {
            dataset: path_of("dataset")?,
            vocabulary: path_of("vocabulary")?,
            registry: path_of("registry")?,
            ensemble: path_of("ensemble")?,
            train_config: path_of("train_config")?,
            out_dir: path_of("out_dir")?,
            seed: {
                let value = fields
                    .remove("seed")
                    .ok_or_else(|| CliError::Config("manifest is missing 'seed'".into()))?;
                value
                    .parse()
                    .map_err(|_| CliError::Config(format!("seed '{value}' is not an integer")))?
            },
        };
        if let Some(key) = fields.keys().next() {
            return Err(CliError::Config(format!("manifest has unknown key '{key}'")));
        }
        for (name, path) in [
            ("dataset", &manifest.dataset),
            ("vocabulary", &manifest.vocabulary),
            ("registry", &manifest.registry),
            ("ensemble", &manifest.ensemble),
            ("train_config", &manifest.train_config),
        ] {
            if !path.exists() {
                return Err(CliError::Config(format!(
                    "{name} path {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(manifest)
    }
}

/// One labeled dataset entry: `label<TAB>path` per line.
fn read_dataset_manifest(path: &Path) -> Result<Vec<(bool, PathBuf)>, CliError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (idx, raw_line) in read_text(path)?.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, rel) = line.split_once('\t').ok_or_else(|| {
            CliError::Config(format!("dataset line {}: expected 'label<TAB>path'", idx + 1))
        })?;
        let malicious = match label.trim() {
            "malicious" => true,
            "benign" => false,
            other => {
                return Err(CliError::Config(format!(
                    "dataset line {}: unknown label '{other}'",
                    idx + 1
                )))
            }
        };
        out.push((malicious, base.join(rel.trim())));
    }
    if out.is_empty() {
        return Err(CliError::Config(format!("dataset manifest {} is empty", path.display())));
    }
    Ok(out)
}

fn build_ensemble(
    dataset: &[(bool, PathBuf, Vec<u8>)],
    config_path: &Path,
) -> Result<SimEnsemble, CliError> {
    let cfg = SimEnsembleConfig::from_document(&read_text(config_path)?).map_err(config_err)?;
    let corpus: Vec<crate::detector::CorpusSample> = dataset
        .iter()
        .map(|(malicious, path, bytes)| crate::detector::CorpusSample {
            id: sample_id(path),
            bytes: bytes.clone(),
            malicious: *malicious,
        })
        .collect();
    SimEnsemble::build(&cfg, &corpus).map_err(config_err)
}

// ---- train ----

fn cmd_train(
    manifest_path: &Path,
    max_epochs: Option<usize>,
    minibatch: Option<usize>,
) -> Result<(), CliError> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest = RunManifest::from_document(&read_text(manifest_path)?, base)?;

    let mut train_cfg =
        TrainConfig::from_document(&read_text(&manifest.train_config)?).map_err(config_err)?;
    train_cfg.seed = manifest.seed;
    if let Some(v) = max_epochs {
        train_cfg.max_epochs = v;
    }
    if let Some(v) = minibatch {
        train_cfg.minibatch = v;
    }
    train_cfg.validate().map_err(config_err)?;

    let vocab =
        Vocabulary::from_document(&read_text(&manifest.vocabulary)?).map_err(config_err)?;
    let entries = read_dataset_manifest(&manifest.dataset)?;
    let mut dataset = Vec::with_capacity(entries.len());
    for (malicious, path) in entries {
        let bytes = read_file(&path)?;
        dataset.push((malicious, path, bytes));
    }

    let mut malware: Vec<(PeImage, FeatureVector)> = Vec::new();
    let mut benign: Vec<FeatureVector> = Vec::new();
    for (malicious, path, bytes) in &dataset {
        let image = parse_pe(bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let features = extract_features(&image)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let fv = vectorize(&features, &vocab);
        if *malicious {
            malware.push((image, fv));
        } else {
            benign.push(fv);
        }
    }

    let registry = StubRegistry::from_manifest_file(&manifest.registry).map_err(config_err)?;
    let ensemble = build_ensemble(&dataset, &manifest.ensemble)?;

    let mut rng = ChaCha20Rng::seed_from_u64(manifest.seed);
    let gen = crate::nn_core::build_generator(&demo::generator_config(vocab.len()), &mut rng)
        .map_err(config_err)?;
    let disc =
        crate::nn_core::build_discriminator(&demo::discriminator_config(vocab.len()), &mut rng)
            .map_err(config_err)?;

    fs::create_dir_all(&manifest.out_dir).map_err(|e| {
        CliError::Config(format!("cannot create {}: {e}", manifest.out_dir.display()))
    })?;
    let out_dir = manifest.out_dir.clone();
    let interval = train_cfg.checkpoint_interval;
    let mut hook = move |g: &crate::nn_core::Net,
                         d: &crate::nn_core::Net,
                         record: &crate::trainer::EpochRecord|
          -> Result<(), TrainError> {
        if interval > 0 && (record.epoch + 1) % interval == 0 {
            let tag = record.epoch + 1;
            save_checkpoint(g, &out_dir.join(format!("generator-epoch-{tag}.ckpt")))?;
            save_checkpoint(d, &out_dir.join(format!("discriminator-epoch-{tag}.ckpt")))?;
        }
        Ok(())
    };

    let (gen, disc, history) = train_with_hook(
        &train_cfg,
        &malware,
        &benign,
        gen,
        disc,
        &registry,
        &ensemble,
        &mut hook,
    )
    .map_err(|e| CliError::Training(e.to_string()))?;

    let mut csv = String::from(
        "epoch,loss_d,loss_g,disc_accuracy,mean_detection_rate,mean_evasive_rate\n",
    );
    for r in &history.records {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            fmt_sig6(r.loss_d),
            fmt_sig6(r.loss_g),
            fmt_sig6(r.disc_accuracy),
            fmt_sig6(r.mean_detection_rate),
            fmt_sig6(r.mean_evasive_rate)
        ));
    }
    write_file(&manifest.out_dir.join("history.csv"), csv.as_bytes())?;
    save_checkpoint(&gen, &manifest.out_dir.join("generator.ckpt"))
        .map_err(|e| CliError::Training(e.to_string()))?;
    save_checkpoint(&disc, &manifest.out_dir.join("discriminator.ckpt"))
        .map_err(|e| CliError::Training(e.to_string()))?;
    println!(
        "{} epoch(s), converged: {}, artifacts -> {}",
        history.records.len(),
        history.converged,
        manifest.out_dir.display()
    );
    Ok(())
}

// ---- evaluate ----

/// Read `n` per row of a verdicts CSV produced by a previous evaluate run.
fn read_verdict_counts(path: &Path) -> Result<Vec<usize>, CliError> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("sample_id,bits,n,N") => {}
        other => {
            return Err(CliError::Config(format!(
                "{}: expected verdict CSV header, got '{}'",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let n = line
            .rsplit(',')
            .nth(1)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| {
                CliError::Config(format!("{}: bad verdict row {}", path.display(), idx + 2))
            })?;
        out.push(n);
    }
    Ok(out)
}

fn cmd_evaluate(
    samples: &[PathBuf],
    dataset_path: &Path,
    ensemble_path: &Path,
    originals: Option<&Path>,
    out_dir: &Path,
) -> Result<(), CliError> {
    if samples.is_empty() {
        return Err(CliError::Config("no samples to evaluate".into()));
    }
    let entries = read_dataset_manifest(dataset_path)?;
    let mut dataset = Vec::with_capacity(entries.len());
    for (malicious, path) in entries {
        let bytes = read_file(&path)?;
        dataset.push((malicious, path, bytes));
    }
    let ensemble = build_ensemble(&dataset, ensemble_path)?;

    let orig_counts = originals.map(read_verdict_counts).transpose()?;
    if let Some(counts) = &orig_counts {
        if counts.len() != samples.len() {
            return Err(CliError::Config(format!(
                "{} original verdict(s) for {} sample(s); rows match by position",
                counts.len(),
                samples.len()
            )));
        }
    }

    let mut failed = 0usize;
    let mut rows: Vec<(String, DetectorVerdict)> = Vec::new();
    let mut scanned_indices = Vec::new();
    for (i, path) in samples.iter().enumerate() {
        match read_file(path) {
            Ok(bytes) => {
                let verdict = ensemble.scan(&bytes).map_err(config_err)?;
                rows.push((sample_id(path), verdict));
                scanned_indices.push(i);
            }
            Err(e) => {
                eprintln!("{e}");
                failed += 1;
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Config("every sample was unreadable".into()));
    }

    let mut metrics = String::from("sample_id,detection_rate,evasive_rate\n");
    let mut rates = Vec::new();
    let mut evasives = Vec::new();
    for (row_idx, (id, verdict)) in rows.iter().enumerate() {
        let rate = detection_rate(verdict);
        rates.push(rate);
        let evasive_text = match &orig_counts {
            Some(counts) => {
                let n_orig = counts[scanned_indices[row_idx]];
                match evasive_rate(n_orig, verdict.n()) {
                    Ok(v) => {
                        evasives.push(v);
                        fmt_sig6(v)
                    }
                    Err(MetricError::UndefinedForUndetected) => String::new(),
                    Err(e) => return Err(config_err(e)),
                }
            }
            None => String::new(),
        };
        metrics.push_str(&format!("{},{},{}\n", csv_field(id), fmt_sig6(rate), evasive_text));
    }

    let aggregate = |values: &[f64], f: fn(&[f64]) -> f64| -> String {
        if values.is_empty() {
            String::new()
        } else {
            fmt_sig6(f(values))
        }
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    for (name, f) in [("Average", mean as fn(&[f64]) -> f64), ("Max", max), ("Min", min)] {
        metrics.push_str(&format!(
            "{},{},{}\n",
            name,
            aggregate(&rates, f),
            aggregate(&evasives, f)
        ));
    }

    write_file(&out_dir.join("verdicts.csv"), verdicts_to_csv(&rows).as_bytes())?;
    write_file(&out_dir.join("metrics.csv"), metrics.as_bytes())?;
    println!("{} verdict(s) -> {}", rows.len(), out_dir.display());
    if failed > 0 {
        return Err(CliError::Partial { failed, total: samples.len() });
    }
    Ok(())
}

// ---- synth ----

fn cmd_synth(out: &Path, seed: u64, malicious: usize, benign: usize) -> Result<(), CliError> {
    let spec = demo::CorpusSpec {
        malicious_count: malicious,
        benign_count: benign,
        seed,
        ..demo::CorpusSpec::default()
    };
    let corpus = demo::build_corpus(&spec).map_err(config_err)?;

    let mut dataset_lines = String::new();
    for (id, bytes) in corpus.malicious.iter() {
        let rel = format!("dataset/{id}.bin");
        write_file(&out.join(&rel), bytes)?;
        dataset_lines.push_str(&format!("malicious\t{rel}\n"));
    }
    for (id, bytes) in corpus.benign.iter() {
        let rel = format!("dataset/{id}.bin");
        write_file(&out.join(&rel), bytes)?;
        dataset_lines.push_str(&format!("benign\t{rel}\n"));
    }
    write_file(&out.join("dataset.manifest"), dataset_lines.as_bytes())?;

    let mut registry_lines = String::new();
    let mut payload = |kind: &str, method: &str, files: &[Vec<u8>]| -> Result<(), CliError> {
        for (i, bytes) in files.iter().enumerate() {
            let rel = format!("payloads/{kind}-{i}.bin");
            write_file(&out.join(&rel), bytes)?;
            registry_lines.push_str(&format!("{method}\t{rel}\n"));
        }
        Ok(())
    };
    payload("obfusmal", "obfusmal", &corpus.obfusmal_stubs)?;
    payload("stealmal-host", "stealmal", &corpus.stealmal_hosts)?;
    payload("hollowmal-host", "hollowmal-host", &corpus.hollowmal_hosts)?;
    payload("hollowmal-dll", "hollowmal-dll", &corpus.hollowmal_dlls)?;
    write_file(&out.join("registry.manifest"), registry_lines.as_bytes())?;

    let mut sets = Vec::new();
    for (_, bytes) in corpus.malicious.iter().chain(&corpus.benign) {
        let image = parse_pe(bytes).map_err(config_err)?;
        sets.push(extract_features(&image).map_err(config_err)?);
    }
    let vocab = build_vocabulary(&sets);
    write_file(&out.join("vocabulary.txt"), vocab.to_document().as_bytes())?;
    write_file(
        &out.join("ensemble.txt"),
        demo::ensemble_config(seed).to_document().as_bytes(),
    )?;
    write_file(&out.join("train.txt"), demo::train_config(seed).to_document().as_bytes())?;

    let manifest = RunManifest {
        dataset: "dataset.manifest".into(),
        vocabulary: "vocabulary.txt".into(),
        registry: "registry.manifest".into(),
        ensemble: "ensemble.txt".into(),
        train_config: "train.txt".into(),
        out_dir: "run".into(),
        seed,
    };
    write_file(&out.join("run.manifest"), manifest.to_document().as_bytes())?;
    println!(
        "workspace with {} samples, {}-name vocabulary -> {}",
        corpus.malicious.len() + corpus.benign.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}

// ---- tests ----
