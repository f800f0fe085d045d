//! Exit-code and artifact tests that drive the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

use pefox::pe_model::{synthesize_min_pe, CodePattern, FixtureSpec, ImportSpec};

fn pefox(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pefox"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fixture(spec: &FixtureSpec) -> Vec<u8> {
    synthesize_min_pe(spec).unwrap()
}

fn malware_spec() -> FixtureSpec {
    FixtureSpec {
        imports: vec![ImportSpec {
            dll: "kernel32.dll".into(),
            functions: vec!["createremotethread".into(), "openprocess".into()],
            ordinals: vec![7],
        }],
        code: CodePattern::HighEntropy,
        seed: 21,
        ..FixtureSpec::default()
    }
}

/// Registry payload files plus a manifest; `with_dll` controls whether the
/// hollowmal-dll line is present.
fn write_registry(dir: &Path, with_dll: bool) {
    let stub = fixture(&FixtureSpec { seed: 30, ..FixtureSpec::default() });
    let host = fixture(&FixtureSpec {
        imports: vec![ImportSpec {
            dll: "kernel32.dll".into(),
            functions: vec!["exitprocess".into()],
            ordinals: Vec::new(),
        }],
        section_count: 3,
        seed: 31,
        ..FixtureSpec::default()
    });
    let dll = fixture(&FixtureSpec { dll: true, seed: 32, ..FixtureSpec::default() });
    std::fs::write(dir.join("stub.bin"), &stub).unwrap();
    std::fs::write(dir.join("host.bin"), &host).unwrap();
    std::fs::write(dir.join("dll.bin"), &dll).unwrap();
    let mut manifest = String::from("obfusmal\tstub.bin\nstealmal\thost.bin\nhollowmal-host\thost.bin\n");
    if with_dll {
        manifest.push_str("hollowmal-dll\tdll.bin\n");
    }
    std::fs::write(dir.join("registry.manifest"), manifest).unwrap();
}

// ---- parse ----

#[test]
fn parse_prints_layout_and_imports() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sample.bin"), fixture(&malware_spec())).unwrap();
    let out = pefox(dir.path(), &["parse", "sample.bin"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("machine"), "{text}");
    assert!(text.contains(" exec"), "{text}");
    assert!(text.contains("kernel32.dll"), "{text}");
    assert!(text.contains("createremotethread"), "{text}");
    assert!(text.contains("by ordinal"), "{text}");
}

#[test]
fn parse_rejects_bad_inputs_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = fixture(&malware_spec());
    std::fs::write(dir.path().join("cut.bin"), &bytes[..64]).unwrap();
    let out = pefox(dir.path(), &["parse", "cut.bin"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("truncated"), "{}", stderr(&out));

    let out = pefox(dir.path(), &["parse", "missing.bin"]);
    assert_eq!(code(&out), 2);

    let out = pefox(dir.path(), &["parse", "."]);
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_two_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&pefox(dir.path(), &[])), 2);
    assert_eq!(code(&pefox(dir.path(), &["no-such-command"])), 2);
    assert_eq!(code(&pefox(dir.path(), &["--help"])), 0);
    assert_eq!(code(&pefox(dir.path(), &["perturb"])), 2);
}

// ---- features ----

#[test]
fn features_flags_partial_failure_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("good.bin"), fixture(&malware_spec())).unwrap();
    std::fs::write(dir.path().join("bad.bin"), b"not a pe file").unwrap();

    let out = pefox(
        dir.path(),
        &["features", "good.bin", "bad.bin", "--out", "vectors.fv"],
    );
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("bad.bin"), "{}", stderr(&out));
    let first = std::fs::read(dir.path().join("vectors.fv")).unwrap();
    let first_vocab = std::fs::read(dir.path().join("vectors.vocab")).unwrap();

    // Rerun with only the good file against the now-existing vocabulary:
    // clean exit and the identical vector document.
    let out = pefox(
        dir.path(),
        &["features", "good.bin", "--out", "again.fv", "--vocab", "vectors.vocab"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert_eq!(std::fs::read(dir.path().join("again.fv")).unwrap(), first);
    assert_eq!(std::fs::read(dir.path().join("vectors.vocab")).unwrap(), first_vocab);

    let out = pefox(dir.path(), &["features", "--out", "empty.fv"]);
    assert_eq!(code(&out), 2);
}

// ---- perturb ----

#[test]
fn perturb_identity_path_copies_the_input() {
    let dir = tempfile::tempdir().unwrap();
    write_registry(dir.path(), true);
    let input = fixture(&malware_spec());
    std::fs::write(dir.path().join("malware.bin"), &input).unwrap();
    let out = pefox(
        dir.path(),
        &[
            "perturb",
            "malware.bin",
            "--path",
            "000",
            "--registry",
            "registry.manifest",
            "--out",
            "out.bin",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("applied none"), "{}", stdout(&out));
    assert_eq!(std::fs::read(dir.path().join("out.bin")).unwrap(), input);
}

#[test]
fn perturb_chains_methods_in_bit_order() {
    let dir = tempfile::tempdir().unwrap();
    write_registry(dir.path(), true);
    std::fs::write(dir.path().join("malware.bin"), fixture(&malware_spec())).unwrap();
    let out = pefox(
        dir.path(),
        &[
            "perturb",
            "malware.bin",
            "--path",
            "110",
            "--registry",
            "registry.manifest",
            "--out",
            "out.bin",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("applied obfusmal:0,stealmal:0"), "{text}");
    assert!(text.contains("sections_added 2"), "{text}");
    let produced = std::fs::read(dir.path().join("out.bin")).unwrap();
    pefox::pe_model::parse_pe(&produced).expect("perturbed output re-parses");
}

#[test]
fn perturb_maps_bad_arguments_and_editor_failures() {
    let dir = tempfile::tempdir().unwrap();
    write_registry(dir.path(), true);
    std::fs::write(dir.path().join("malware.bin"), fixture(&malware_spec())).unwrap();

    let base: &[&'static str] =
        &["perturb", "malware.bin", "--registry", "registry.manifest", "--out", "x.bin"];
    let with = |extra: &[&'static str]| -> Vec<&'static str> {
        let mut v = base.to_vec();
        v.extend_from_slice(extra);
        v
    };
    // Digit outside {0,1}: a usage problem, not an editor problem.
    assert_eq!(code(&pefox(dir.path(), &with(&["--path", "102"]))), 2);
    assert_eq!(code(&pefox(dir.path(), &with(&["--path", "11"]))), 2);
    assert_eq!(code(&pefox(dir.path(), &with(&["--path", "001", "--key", "zz"]))), 2);

    // Registry lacks hollowmal dlls and the path selects hollowmal.
    write_registry(dir.path(), false);
    let out = pefox(dir.path(), &with(&["--path", "001"]));
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("hollowmal"), "{}", stderr(&out));
}

// ---- synth / train / evaluate ----

#[test]
fn synth_lays_out_a_complete_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let out = pefox(
        dir.path(),
        &["synth", "--out", "ws", "--seed", "3", "--malicious", "4", "--benign", "4"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    for rel in [
        "dataset.manifest",
        "registry.manifest",
        "vocabulary.txt",
        "ensemble.txt",
        "train.txt",
        "run.manifest",
        "dataset/mal-000.bin",
        "dataset/ben-003.bin",
        "payloads/obfusmal-0.bin",
        "payloads/stealmal-host-0.bin",
        "payloads/hollowmal-host-0.bin",
        "payloads/hollowmal-dll-0.bin",
    ] {
        assert!(dir.path().join("ws").join(rel).exists(), "missing {rel}");
    }
    let manifest = std::fs::read_to_string(dir.path().join("ws/dataset.manifest")).unwrap();
    assert_eq!(manifest.lines().count(), 8);
}

#[test]
fn train_validates_the_manifest_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = pefox(
        dir.path(),
        &["synth", "--out", "ws", "--seed", "3", "--malicious", "4", "--benign", "4"],
    );
    assert_eq!(code(&out), 0);
    std::fs::remove_file(dir.path().join("ws/vocabulary.txt")).unwrap();
    let out = pefox(dir.path(), &["train", "ws/run.manifest"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("vocabulary"), "{}", stderr(&out));

    let out = pefox(dir.path(), &["train", "ws/no-such.manifest"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_writes_history_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = pefox(
        dir.path(),
        &["synth", "--out", "ws", "--seed", "5", "--malicious", "6", "--benign", "6"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = pefox(
        dir.path(),
        &["train", "ws/run.manifest", "--max-epochs", "2", "--minibatch", "4"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let history = std::fs::read_to_string(dir.path().join("ws/run/history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,loss_d,loss_g,disc_accuracy,mean_detection_rate,mean_evasive_rate"
    );
    assert_eq!(lines.count(), 2, "one row per epoch");
    for ckpt in ["generator.ckpt", "discriminator.ckpt"] {
        let bytes = std::fs::read(dir.path().join("ws/run").join(ckpt)).unwrap();
        assert_eq!(&bytes[..7], b"MFOXNN1", "{ckpt} magic");
    }
}

#[test]
fn evaluate_round_trips_verdicts_into_evasive_rates() {
    let dir = tempfile::tempdir().unwrap();
    let out = pefox(
        dir.path(),
        &["synth", "--out", "ws", "--seed", "9", "--malicious", "4", "--benign", "4"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ws = dir.path().join("ws");

    // Pass 1, no originals: detection only, evasive column empty.
    let out = pefox(
        &ws,
        &[
            "evaluate",
            "dataset/mal-000.bin",
            "dataset/mal-001.bin",
            "--dataset",
            "dataset.manifest",
            "--ensemble",
            "ensemble.txt",
            "--out",
            "eval-orig",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let verdicts = std::fs::read_to_string(ws.join("eval-orig/verdicts.csv")).unwrap();
    assert!(verdicts.starts_with("sample_id,bits,n,N\n"), "{verdicts}");
    assert_eq!(verdicts.lines().count(), 3);
    let metrics = std::fs::read_to_string(ws.join("eval-orig/metrics.csv")).unwrap();
    assert!(metrics.starts_with("sample_id,detection_rate,evasive_rate\n"), "{metrics}");
    for line in metrics.lines().skip(1) {
        assert!(line.ends_with(','), "evasive must be empty: {line}");
    }
    assert!(metrics.contains("\nAverage,"), "{metrics}");
    assert!(metrics.contains("\nMax,"), "{metrics}");
    assert!(metrics.contains("\nMin,"), "{metrics}");

    // Pass 2: scan benign files as stand-in adversarial outputs against the
    // originals' verdicts; nothing flags them, so evasive rate is 1.
    let out = pefox(
        &ws,
        &[
            "evaluate",
            "dataset/ben-000.bin",
            "dataset/ben-001.bin",
            "--dataset",
            "dataset.manifest",
            "--ensemble",
            "ensemble.txt",
            "--originals",
            "eval-orig/verdicts.csv",
            "--out",
            "eval-adv",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let metrics = std::fs::read_to_string(ws.join("eval-adv/metrics.csv")).unwrap();
    for line in metrics.lines().skip(1).take(2) {
        assert!(line.ends_with(",1"), "evasive rate 1: {line}");
    }

    // Originals row count must match the sample count.
    let out = pefox(
        &ws,
        &[
            "evaluate",
            "dataset/ben-000.bin",
            "--dataset",
            "dataset.manifest",
            "--ensemble",
            "ensemble.txt",
            "--originals",
            "eval-orig/verdicts.csv",
            "--out",
            "eval-bad",
        ],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));

    // Unreadable samples are reported per file and flip the exit to partial.
    let out = pefox(
        &ws,
        &[
            "evaluate",
            "dataset/mal-000.bin",
            "dataset/gone.bin",
            "--dataset",
            "dataset.manifest",
            "--ensemble",
            "ensemble.txt",
            "--out",
            "eval-partial",
        ],
    );
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("gone.bin"), "{}", stderr(&out));
}
