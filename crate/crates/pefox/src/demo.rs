//! Self-contained demo corpus: synthesized malicious and benign fixtures
//! drawn from a fixed 64-name import vocabulary, payload material for all
//! three perturbation methods, and desk-scale net configs sized to that
//! vocabulary.
//!
//! The two import pools are disjoint and deliberately caricatured:
//! process-injection, registry, and network names on the malicious side,
//! windowing and file-handling names on the benign side. Round-robin
//! assignment guarantees every pool entry appears in at least one sample,
//! so the built vocabulary is exactly the 8 DLL names plus 56 function
//! names regardless of corpus size.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::detector::{CorpusSample, SimEnsembleConfig};
use crate::nn_core::{DiscriminatorConfig, GeneratorConfig};
use crate::pe_editor::{EditError, StubRegistry};
use crate::pe_model::{synthesize_min_pe, CodePattern, FixtureSpec, ImportSpec, PeError};
use crate::trainer::{NoiseScheme, TrainConfig};

/// DLL names (8) plus function names (28 + 28) = 64 vocabulary entries.
pub const DEMO_VOCAB_SIZE: usize = 64;

const MALICIOUS_IMPORT_POOL: &[(&str, &[&str])] = &[
    (
        "kernel32.dll",
        &[
            "createremotethread",
            "writeprocessmemory",
            "virtualallocex",
            "openprocess",
            "createtoolhelp32snapshot",
            "process32first",
            "process32next",
            "winexec",
            "createmutexa",
            "terminateprocess",
            "isdebuggerpresent",
        ],
    ),
    ("user32.dll", &["setwindowshookexa", "getasynckeystate", "findwindowa"]),
    (
        "advapi32.dll",
        &[
            "regsetvalueexa",
            "regcreatekeyexa",
            "adjusttokenprivileges",
            "openprocesstoken",
            "cryptencrypt",
            "cryptacquirecontexta",
        ],
    ),
    ("wininet.dll", &["internetopena", "internetconnecta", "httpsendrequesta"]),
    ("ws2_32.dll", &["socket", "connect", "send", "recv"]),
    ("shell32.dll", &["shellexecutea"]),
];

const BENIGN_IMPORT_POOL: &[(&str, &[&str])] = &[
    (
        "kernel32.dll",
        &[
            "createfilea",
            "readfile",
            "writefile",
            "closehandle",
            "getmodulehandlea",
            "getcommandlinea",
            "exitprocess",
            "heapalloc",
            "heapfree",
            "getprocessheap",
            "lstrlena",
        ],
    ),
    (
        "user32.dll",
        &[
            "createwindowexa",
            "showwindow",
            "updatewindow",
            "getmessagea",
            "dispatchmessagea",
            "defwindowproca",
            "loadicona",
            "loadcursora",
            "beginpaint",
            "endpaint",
            "messageboxa",
        ],
    ),
    ("gdi32.dll", &["textouta", "getstockobject", "selectobject", "bitblt"]),
    ("ole32.dll", &["cocreateinstance", "coinitialize"]),
];

// ---- corpus ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSpec {
    pub malicious_count: usize,
    pub benign_count: usize,
    /// Obfusmal decryptor payloads to synthesize.
    pub stub_count: usize,
    /// Benign samples doubling as hosts, per hosting method.
    pub host_count: usize,
    /// Hollowmal loader payloads to synthesize.
    pub dll_count: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            malicious_count: 100,
            benign_count: 100,
            stub_count: 2,
            host_count: 2,
            dll_count: 2,
            seed: 7,
        }
    }
}

/// Synthesized samples plus the payload material backing a registry. The
/// host payloads are byte-identical to the leading benign samples, so the
/// detector's training corpus knows the host surfaces as benign.
#[derive(Debug, Clone)]
pub struct DemoCorpus {
    pub malicious: Vec<(String, Vec<u8>)>,
    pub benign: Vec<(String, Vec<u8>)>,
    pub obfusmal_stubs: Vec<Vec<u8>>,
    pub stealmal_hosts: Vec<Vec<u8>>,
    pub hollowmal_hosts: Vec<Vec<u8>>,
    pub hollowmal_dlls: Vec<Vec<u8>>,
}

impl DemoCorpus {
    pub fn registry(&self) -> Result<StubRegistry, EditError> {
        let mut reg = StubRegistry::new();
        for bytes in &self.obfusmal_stubs {
            reg.register_obfusmal_stub(bytes.clone())?;
        }
        for bytes in &self.stealmal_hosts {
            reg.register_stealmal_host(bytes.clone())?;
        }
        for bytes in &self.hollowmal_hosts {
            reg.register_hollowmal_host(bytes.clone())?;
        }
        for bytes in &self.hollowmal_dlls {
            reg.register_hollowmal_dll(bytes.clone())?;
        }
        Ok(reg)
    }

    /// Labeled samples for ensemble construction.
    pub fn detector_corpus(&self) -> Vec<CorpusSample> {
        let mut out = Vec::with_capacity(self.malicious.len() + self.benign.len());
        for (id, bytes) in &self.malicious {
            out.push(CorpusSample { id: id.clone(), bytes: bytes.clone(), malicious: true });
        }
        for (id, bytes) in &self.benign {
            out.push(CorpusSample { id: id.clone(), bytes: bytes.clone(), malicious: false });
        }
        out
    }
}

/// Ordered `(dll, function)` entries of a pool.
fn pool_entries(pool: &[(&'static str, &'static [&'static str])]) -> Vec<(&'static str, &'static str)> {
    let mut out = Vec::new();
    for (dll, functions) in pool {
        for f in *functions {
            out.push((*dll, *f));
        }
    }
    out
}

/// Imports for sample `index` of `count`: the round-robin share of the
/// pool (entry `j` goes to sample `j % count`) plus `extras` random picks.
fn imports_for(
    pool: &[(&'static str, &'static [&'static str])],
    index: usize,
    count: usize,
    extras: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<ImportSpec> {
    let entries = pool_entries(pool);
    let mut chosen: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut j = index;
    while j < entries.len() {
        let (dll, f) = entries[j];
        chosen.entry(dll).or_default().insert(f);
        j += count;
    }
    for _ in 0..extras {
        let (dll, f) = entries[rng.gen_range(0..entries.len())];
        chosen.entry(dll).or_default().insert(f);
    }
    chosen
        .into_iter()
        .map(|(dll, functions)| ImportSpec {
            dll: dll.to_string(),
            functions: functions.into_iter().map(str::to_string).collect(),
            ordinals: Vec::new(),
        })
        .collect()
}

pub fn build_corpus(spec: &CorpusSpec) -> Result<DemoCorpus, PeError> {
    if spec.malicious_count == 0 || spec.benign_count == 0 {
        return Err(PeError::InvariantViolation {
            reason: "corpus needs at least one sample per class".into(),
        });
    }
    if spec.benign_count < 2 * spec.host_count {
        return Err(PeError::InvariantViolation {
            reason: format!(
                "benign count {} cannot supply {} hosts per hosting method",
                spec.benign_count, spec.host_count
            ),
        });
    }
    if spec.stub_count == 0 || spec.host_count == 0 || spec.dll_count == 0 {
        return Err(PeError::InvariantViolation {
            reason: "every perturbation method needs at least one payload".into(),
        });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut malicious = Vec::with_capacity(spec.malicious_count);
    for i in 0..spec.malicious_count {
        let fixture = FixtureSpec {
            imports: imports_for(MALICIOUS_IMPORT_POOL, i, spec.malicious_count, 3, &mut rng),
            code: CodePattern::HighEntropy,
            seed: rng.gen(),
            ..FixtureSpec::default()
        };
        malicious.push((format!("mal-{i:03}"), synthesize_min_pe(&fixture)?));
    }

    let mut benign = Vec::with_capacity(spec.benign_count);
    for i in 0..spec.benign_count {
        let fixture = FixtureSpec {
            imports: imports_for(BENIGN_IMPORT_POOL, i, spec.benign_count, 3, &mut rng),
            code: CodePattern::LowEntropy,
            marker: Some("Hello World".into()),
            seed: rng.gen(),
            ..FixtureSpec::default()
        };
        benign.push((format!("ben-{i:03}"), synthesize_min_pe(&fixture)?));
    }

    let mut obfusmal_stubs = Vec::with_capacity(spec.stub_count);
    for _ in 0..spec.stub_count {
        let fixture = FixtureSpec { seed: rng.gen(), ..FixtureSpec::default() };
        obfusmal_stubs.push(synthesize_min_pe(&fixture)?);
    }

    let mut hollowmal_dlls = Vec::with_capacity(spec.dll_count);
    for _ in 0..spec.dll_count {
        let fixture = FixtureSpec { dll: true, seed: rng.gen(), ..FixtureSpec::default() };
        hollowmal_dlls.push(synthesize_min_pe(&fixture)?);
    }

    let stealmal_hosts: Vec<Vec<u8>> =
        benign[..spec.host_count].iter().map(|(_, b)| b.clone()).collect();
    let hollowmal_hosts: Vec<Vec<u8>> = benign[spec.host_count..2 * spec.host_count]
        .iter()
        .map(|(_, b)| b.clone())
        .collect();

    Ok(DemoCorpus {
        malicious,
        benign,
        obfusmal_stubs,
        stealmal_hosts,
        hollowmal_hosts,
        hollowmal_dlls,
    })
}

// ---- desk-scale configs ----

/// Generator sized for an `m`-name vocabulary with a 3-value noise tail.
pub fn generator_config(m: usize) -> GeneratorConfig {
    GeneratorConfig {
        m,
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

/// Discriminator sized for an `m`-name vocabulary. A single-row reshape
/// with unit windows and pools keeps the conv chain valid for any width.
pub fn discriminator_config(m: usize) -> DiscriminatorConfig {
    DiscriminatorConfig {
        m,
        z: 3,
        n: 16,
        n_step: 1,
        n_input: m + 3,
        filters: (8, 8, 4, 4),
        window: 1,
        sc: 0.1,
        st: 1,
        ps: 1,
        r: 0.25,
        fc: (32, 2, 2),
        re: 0.01,
    }
}

pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        minibatch: 16,
        max_epochs: 15,
        delta: 1e-4,
        seed,
        lr: 1e-3,
        checkpoint_interval: 0,
        noise: NoiseScheme::GaussianCdf,
    }
}

pub fn ensemble_config(seed: u64) -> SimEnsembleConfig {
    SimEnsembleConfig { entity_count: 5, seed, ..SimEnsembleConfig::default() }
}

// ---- tests ----

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::mean_executable_entropy;
    use crate::nn_core::build_generator;
    use crate::pe_editor::Method;
    use crate::pe_model::parse_pe;
    use crate::pe_parser::{build_vocabulary, extract_features};

    fn small_spec() -> CorpusSpec {
        CorpusSpec { malicious_count: 30, benign_count: 30, seed: 11, ..CorpusSpec::default() }
    }

    #[test]
    fn vocabulary_is_exactly_the_pool_names() {
        let corpus = build_corpus(&small_spec()).unwrap();
        let mut sets = Vec::new();
        for (_, bytes) in corpus.malicious.iter().chain(&corpus.benign) {
            sets.push(extract_features(&parse_pe(bytes).unwrap()).unwrap());
        }
        let vocab = build_vocabulary(&sets);
        assert_eq!(vocab.len(), DEMO_VOCAB_SIZE);
        for pool in [MALICIOUS_IMPORT_POOL, BENIGN_IMPORT_POOL] {
            for (dll, functions) in pool {
                assert!(vocab.index_of(dll).is_some(), "missing dll {dll}");
                for f in *functions {
                    assert!(vocab.index_of(f).is_some(), "missing function {f}");
                }
            }
        }
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        let a = build_corpus(&small_spec()).unwrap();
        let b = build_corpus(&small_spec()).unwrap();
        assert_eq!(a.malicious, b.malicious);
        assert_eq!(a.benign, b.benign);
        assert_eq!(a.obfusmal_stubs, b.obfusmal_stubs);
        let c = build_corpus(&CorpusSpec { seed: 12, ..small_spec() }).unwrap();
        assert_ne!(a.malicious[0].1, c.malicious[0].1);
    }

    #[test]
    fn hosts_are_leading_benign_samples() {
        let corpus = build_corpus(&small_spec()).unwrap();
        assert_eq!(corpus.stealmal_hosts[0], corpus.benign[0].1);
        assert_eq!(corpus.stealmal_hosts[1], corpus.benign[1].1);
        assert_eq!(corpus.hollowmal_hosts[0], corpus.benign[2].1);
        assert_eq!(corpus.hollowmal_hosts[1], corpus.benign[3].1);
    }

    #[test]
    fn registry_counts_follow_the_spec_counts() {
        let corpus = build_corpus(&small_spec()).unwrap();
        let reg = corpus.registry().unwrap();
        assert_eq!(reg.instance_count(Method::Obfusmal), 2);
        assert_eq!(reg.instance_count(Method::Stealmal), 2);
        assert_eq!(reg.instance_count(Method::Hollowmal), 4);
    }

    #[test]
    fn detector_corpus_carries_labels() {
        let corpus = build_corpus(&small_spec()).unwrap();
        let samples = corpus.detector_corpus();
        assert_eq!(samples.len(), 60);
        assert_eq!(samples.iter().filter(|s| s.malicious).count(), 30);
        assert!(samples[0].id.starts_with("mal-"));
        assert!(samples[30].id.starts_with("ben-"));
    }

    #[test]
    fn class_entropy_straddles_the_detector_threshold() {
        let corpus = build_corpus(&small_spec()).unwrap();
        for (id, bytes) in &corpus.malicious {
            let e = mean_executable_entropy(&parse_pe(bytes).unwrap());
            assert!(e > 7.5, "{id}: executable entropy {e} too low");
        }
        for (id, bytes) in &corpus.benign {
            let e = mean_executable_entropy(&parse_pe(bytes).unwrap());
            assert!(e < 4.0, "{id}: executable entropy {e} too high");
        }
    }

    #[test]
    fn desk_configs_validate_and_build() {
        let gen_cfg = generator_config(DEMO_VOCAB_SIZE);
        gen_cfg.validate().unwrap();
        let disc_cfg = discriminator_config(DEMO_VOCAB_SIZE);
        disc_cfg.validate().unwrap();
        // The discriminator shape also adapts to any other vocabulary.
        discriminator_config(61).validate().unwrap();
        let summary = gen_cfg.validate().unwrap();
        assert_eq!(summary.input_width, DEMO_VOCAB_SIZE + 3);
        assert_eq!(summary.output_width, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        build_generator(&gen_cfg, &mut rng).unwrap();
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(build_corpus(&CorpusSpec { malicious_count: 0, ..small_spec() }).is_err());
        assert!(build_corpus(&CorpusSpec { benign_count: 3, ..small_spec() }).is_err());
        assert!(build_corpus(&CorpusSpec { dll_count: 0, ..small_spec() }).is_err());
    }
}
