//! Process-level CLI tests: subcommands, exit codes, and thread-cap
//! determinism.

use std::path::Path;
use std::process::Command;

fn pcamil() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pcamil"))
}

/// Small dataset shared by the CLI tests.
fn synth(dir: &Path) {
    let status = pcamil()
        .args([
            "synth",
            "--out-dir",
            dir.to_str().unwrap(),
            "--n-train",
            "36",
            "--n-test",
            "18",
            "--train-msi-fraction",
            "0.25",
            "--test-msi-fraction",
            "0.3",
            "--patches-min",
            "6",
            "--patches-max",
            "14",
            "--feature-dim",
            "12",
            "--signal-rank",
            "2",
            "--noise-sigma",
            "0.6",
            "--seed",
            "5",
        ])
        .status()
        .unwrap();
    assert!(status.success());
}

fn run_args(dir: &Path, out: &str, extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = [
        "run",
        "--train-manifest",
        dir.join("train_manifest.csv").to_str().unwrap(),
        "--test-manifest",
        dir.join("test_manifest.csv").to_str().unwrap(),
        "--output-dir",
        dir.join(out).to_str().unwrap(),
        "--n-folds",
        "3",
        "--k-eigenvectors",
        "8",
        "--d-hidden",
        "16",
        "--d-att",
        "8",
        "--scorer-epochs",
        "40",
        "--seed",
        "9",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

#[test]
fn synth_run_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert!(dir.path().join("train/bags").is_dir());

    let output = pcamil()
        .args(run_args(dir.path(), "out", &[]))
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("CIMIL-CRC"));
    assert!(dir.path().join("out/fold_metrics.csv").exists());
    assert!(dir.path().join("out/summary.json").exists());

    let status = pcamil()
        .args([
            "report",
            "--output-dir",
            dir.path().join("out").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let run_with_threads = |out: &str, threads: &str| {
        let status = pcamil()
            .args(run_args(dir.path(), out, &[]))
            .env("PCAMIL_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success());
    };
    run_with_threads("serial", "1");
    run_with_threads("parallel", "3");
    for file in ["fold_metrics.csv", "scores.csv", "summary.json"] {
        let a = std::fs::read(dir.path().join("serial").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("parallel").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs under fold parallelism");
    }
}

#[test]
fn embed_writes_cache_files() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let status = pcamil()
        .args([
            "embed",
            "--manifest",
            dir.path().join("test_manifest.csv").to_str().unwrap(),
            "--k",
            "6",
            "--out-dir",
            dir.path().join("cache").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let count = std::fs::read_dir(dir.path().join("cache")).unwrap().count();
    assert_eq!(count, 18);
}

#[test]
fn train_subcommand_writes_model_and_history() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args: Vec<String> = run_args(dir.path(), "trainout", &["--fold", "1"]);
    args[0] = "train".to_string();
    let status = pcamil().args(&args).status().unwrap();
    assert!(status.success());
    assert!(dir.path().join("trainout/mil_fold1.milm").exists());
    assert!(dir.path().join("trainout/fold1_history.csv").exists());
}

#[test]
fn sweep_subcommand_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = run_args(dir.path(), "sweepout", &["--axis", "beta", "--values", "0.8,1.0"]);
    args[0] = "sweep".to_string();
    let status = pcamil().args(&args).status().unwrap();
    assert!(status.success());
    let table =
        std::fs::read_to_string(dir.path().join("sweepout/sweep_beta.csv")).unwrap();
    assert!(table.starts_with("axis,value,mean_f1,mean_kappa\n"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn exit_codes_distinguish_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());

    // Invalid config: n_folds below 2.
    let out = pcamil()
        .args(run_args(dir.path(), "bad", &["--n-folds", "1"]))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Data error: missing manifest.
    let out = pcamil()
        .args([
            "run",
            "--train-manifest",
            dir.path().join("absent.csv").to_str().unwrap(),
            "--test-manifest",
            dir.path().join("test_manifest.csv").to_str().unwrap(),
            "--output-dir",
            dir.path().join("bad2").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Usage error from clap also exits 2.
    let out = pcamil().args(["run", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
