//! Integration tests for the command-line front end: exit codes, output
//! formats, and the wiring between subcommands.
//!
//! Exit code contract: 0 on success, 1 for usage errors, 2 for data errors,
//! 3 for internal errors.

use std::path::Path;
use std::process::{Command, Output};

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloneflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn assert_code(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout(output),
        stderr(output)
    );
}

/// Generates a small corpus and trains models for it, once per test binary.
/// Trace generation is cheap but training is not, so the expensive steps
/// run in a shared directory.
fn prepared() -> &'static Path {
    use std::sync::OnceLock;
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let gen = run_in(
            dir.path(),
            &["generate", "--out", "traces", "--invocations", "120", "--seed", "3"],
        );
        assert_code(&gen, 0);
        let train = run_in(
            dir.path(),
            &["train", "--traces", "traces", "--models", "models", "--epochs", "40", "--seed", "3"],
        );
        assert_code(&train, 0);
        dir
    })
    .path()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"][..], &["generate", "--help"][..]] {
        let output = run_in(dir.path(), args);
        assert_code(&output, 0);
    }
    let version = run_in(dir.path(), &["--version"]);
    assert!(stdout(&version).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn unknown_flags_and_missing_args_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["generate"][..],
        &["generate", "--out", "t", "--no-such-flag"][..],
        &["frobnicate"][..],
        &[][..],
    ] {
        let output = run_in(dir.path(), args);
        assert_code(&output, 1);
    }
}

#[test]
fn generate_writes_traces_truth_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let output =
        run_in(dir.path(), &["generate", "--out", "traces", "--invocations", "50", "--seed", "1"]);
    assert_code(&output, 0);

    let traces = dir.path().join("traces");
    let trace_count = std::fs::read_dir(&traces)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "trace"))
        .count();
    assert!(trace_count >= 8, "expected a corpus of trace files, found {trace_count}");
    assert!(traces.join("ground_truth.json").is_file());
    assert!(traces.join("manifest.json").is_file());
    assert!(stdout(&output).contains("trace files"));
}

#[test]
fn generate_rejects_zero_invocations_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_in(dir.path(), &["generate", "--out", "traces", "--invocations", "0"]);
    assert_code(&output, 1);
    assert!(stderr(&output).contains("invocations"));
    assert!(!dir.path().join("traces").exists(), "nothing should be written on a usage error");
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let output =
            run_in(dir.path(), &["generate", "--out", out, "--invocations", "40", "--seed", "9"]);
        assert_code(&output, 0);
    }
    let different =
        run_in(dir.path(), &["generate", "--out", "c", "--invocations", "40", "--seed", "10"]);
    assert_code(&different, 0);

    // Manifests record the output directory as given, so only the trace
    // files themselves are comparable across differently named runs.
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".trace"))
        .collect();
    names.sort();
    assert!(names.len() >= 8);
    let mut saw_difference = false;
    for name in &names {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between equal-seed runs");
        let c = std::fs::read(dir.path().join("c").join(name)).unwrap();
        saw_difference |= a != c;
    }
    assert!(saw_difference, "different seeds should change the data");
}

#[test]
fn train_reports_per_model_loss() {
    let dir = prepared();
    let listing = std::fs::read_dir(dir.join("models")).unwrap().count();
    assert!(listing >= 8, "expected one model per variant, found {listing}");

    // Retrain two variants into a fresh directory to inspect the output.
    let small = tempfile::tempdir().unwrap();
    std::fs::create_dir(small.path().join("traces")).unwrap();
    let mut trace_files: Vec<_> = std::fs::read_dir(dir.join("traces"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "trace"))
        .collect();
    trace_files.sort();
    for path in trace_files.iter().take(3) {
        let name = path.file_name().unwrap();
        std::fs::copy(path, small.path().join("traces").join(name)).unwrap();
    }
    let output = run_in(
        small.path(),
        &["train", "--traces", "traces", "--models", "models", "--epochs", "15", "--seed", "2"],
    );
    assert_code(&output, 0);
    let text = stdout(&output);
    assert!(text.contains("final nll"), "stdout: {text}");
    assert!(text.contains("trained"), "stdout: {text}");
}

#[test]
fn train_rejects_invalid_config_and_missing_dir() {
    let dir = tempfile::tempdir().unwrap();
    let bad_config =
        run_in(dir.path(), &["train", "--traces", "traces", "--models", "models", "--layers", "0"]);
    assert_code(&bad_config, 1);

    let missing = run_in(dir.path(), &["train", "--traces", "no-such-dir", "--models", "models"]);
    assert_code(&missing, 2);
}

#[test]
fn detect_writes_report_and_summary() {
    let dir = prepared();
    let output = run_in(
        dir,
        &[
            "detect",
            "--models",
            "models",
            "--traces",
            "traces",
            "--truth",
            "traces/ground_truth.json",
            "--out",
            "report.json",
            "--seed",
            "3",
        ],
    );
    assert_code(&output, 0);
    let text = stdout(&output);
    assert!(text.contains("candidates"), "stdout: {text}");
    assert!(text.contains("mcc"), "stdout: {text}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    for key in ["manifest", "config", "candidates", "clone_classes", "survivors", "timing", "truth"]
    {
        assert!(report.get(key).is_some(), "report is missing {key}");
    }
}

#[test]
fn detect_rejects_bad_rates_and_missing_inputs() {
    let dir = prepared();
    let bad_rate = run_in(
        dir,
        &[
            "detect", "--models", "models", "--traces", "traces", "--d-fpr", "1.5", "--out",
            "r.json",
        ],
    );
    assert_code(&bad_rate, 1);

    let missing_models =
        run_in(dir, &["detect", "--models", "absent", "--traces", "traces", "--out", "r.json"]);
    assert_code(&missing_models, 2);

    let empty = tempfile::tempdir().unwrap();
    std::fs::create_dir(empty.path().join("traces")).unwrap();
    std::fs::create_dir(empty.path().join("models")).unwrap();
    let no_traces = run_in(
        empty.path(),
        &["detect", "--models", "models", "--traces", "traces", "--out", "r.json"],
    );
    assert_code(&no_traces, 2);
}

#[test]
fn evaluate_scores_a_report_against_truth() {
    let dir = prepared();
    let detect = run_in(
        dir,
        &[
            "detect",
            "--models",
            "models",
            "--traces",
            "traces",
            "--out",
            "eval_report.json",
            "--seed",
            "3",
        ],
    );
    assert_code(&detect, 0);

    let output = run_in(
        dir,
        &["evaluate", "--report", "eval_report.json", "--truth", "traces/ground_truth.json"],
    );
    assert_code(&output, 0);
    let text = stdout(&output);
    for field in ["true positives", "false positives", "precision", "recall", "f1", "mcc"] {
        assert!(text.contains(field), "stdout: {text}");
    }
}

#[test]
fn evaluate_rejects_truth_that_misses_ids() {
    let dir = prepared();
    let detect = run_in(
        dir,
        &[
            "detect",
            "--models",
            "models",
            "--traces",
            "traces",
            "--out",
            "partial_report.json",
            "--seed",
            "3",
        ],
    );
    assert_code(&detect, 0);

    std::fs::write(
        dir.join("partial_truth.json"),
        r#"{"classes": {"only": ["factorial.fa", "factorial.fb"]}}"#,
    )
    .unwrap();
    let output = run_in(
        dir,
        &["evaluate", "--report", "partial_report.json", "--truth", "partial_truth.json"],
    );
    assert_code(&output, 2);
    assert!(stderr(&output).contains("missing labels"));
}

#[test]
fn evaluate_rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    std::fs::write(dir.path().join("truth.json"), r#"{"classes": {}}"#).unwrap();
    let output =
        run_in(dir.path(), &["evaluate", "--report", "broken.json", "--truth", "truth.json"]);
    assert_code(&output, 2);
}
