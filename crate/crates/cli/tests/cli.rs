//! Drives the `unishuffle` binary on small synthetic configs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unishuffle"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SYNTHETIC: &str = r#"
[run]
seed = 7

[model]
layers = [20, 16, 10]

[training]
learning_rate = 0.2
epochs = 1
batch_size = 16

[federation]
rounds = 4
clients = 5
k = 2
r = 100

[data]
source = "synthetic"
alpha = 0.5
per_class = 30
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, SYNTHETIC).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_all_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    ok(&bin(&["run", "--config", &cfg, "--out", "a"], dir.path()));
    ok(&bin(&["run", "--config", &cfg, "--out", "b"], dir.path()));
    let a = dir.path().join("a");
    for f in [
        "config.toml",
        "seed.txt",
        "metrics.csv",
        "transcript_round004.csv",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("round,mode,train_loss,test_loss,test_acc,u_bits,h_bits")
    );
    assert_eq!(lines.count(), 4);
    assert_eq!(
        metrics,
        fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap()
    );
    assert_eq!(fs::read_to_string(a.join("seed.txt")).unwrap(), "7\n");

    // The snapshot reproduces the run on its own.
    let snapshot = a.join("config.toml").to_string_lossy().into_owned();
    ok(&bin(
        &["run", "--config", &snapshot, "--out", "c"],
        dir.path(),
    ));
    assert_eq!(
        metrics,
        fs::read_to_string(dir.path().join("c/metrics.csv")).unwrap()
    );
}

#[test]
fn attack_and_loss_curve_over_two_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    ok(&bin(
        &[
            "run", "--config", &cfg, "--mode", "standard", "--out", "std",
        ],
        dir.path(),
    ));
    ok(&bin(&["run", "--config", &cfg, "--out", "uq"], dir.path()));
    let table = ok(&bin(&["attack", "std", "uq", "--out", "cmp"], dir.path()));
    assert!(
        table.contains("standard") && table.contains("unary_quant_k2_r100"),
        "{table}"
    );
    let csv = fs::read_to_string(dir.path().join("cmp/attack.csv")).unwrap();
    assert!(csv.starts_with("method,model_accuracy,sia_accuracy,random_baseline\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("cmp/attack.txt").exists());

    let curve = ok(&bin(&["loss-curve", "std", "uq"], dir.path()));
    let header = curve.lines().next().unwrap();
    assert_eq!(
        header,
        "round,standard_train_loss,standard_test_loss,unary_quant_k2_r100_train_loss,unary_quant_k2_r100_test_loss"
    );
    assert_eq!(curve.lines().count(), 5);
    ok(&bin(
        &["loss-curve", "std", "--out", "curve.csv"],
        dir.path(),
    ));
    assert_eq!(
        fs::read_to_string(dir.path().join("curve.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}

#[test]
fn attack_without_transcript_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    ok(&bin(&["run", "--config", &cfg, "--out", "r"], dir.path()));
    fs::remove_file(dir.path().join("r/transcript_round004.csv")).unwrap();
    let out = bin(&["attack", "r"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("transcript_round004.csv"));
    let out = bin(&["loss-curve", "missing"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn budget_prints_unary_bits() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&bin(
        &["budget", "--params", "421642", "--r", "1000"],
        dir.path(),
    ));
    assert!(out.contains("unary bits        421642000"), "{out}");
    let out = ok(&bin(&["budget", "--params", "1", "--r", "1"], dir.path()));
    assert!(out.contains("unary bits        1\n"), "{out}");
    // Default model: 784-32-10.
    let out = ok(&bin(&["budget"], dir.path()));
    assert!(out.contains("parameters        25450"), "{out}");
    assert!(out.contains("unary bits        25450000"), "{out}");
}

#[test]
fn partition_stats_cover_every_example() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = ok(&bin(
        &["partition-stats", "--config", &cfg, "--alpha", "0.1"],
        dir.path(),
    ));
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("client,size,class_0,"));
    let sizes: usize = lines
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(sizes, 300);
}

#[test]
fn invalid_configs_fail_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[federation]\nrounds = 2\nclient = 3\n").unwrap();
    let out = bin(&["run", "--config", "bad.toml", "--out", "x"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(!dir.path().join("x").exists());

    let out = bin(&["run", "--k", "0", "--out", "y"], dir.path());
    assert!(!out.status.success());
    assert!(!dir.path().join("y").exists());
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            unishuffle_cli::ExperimentConfig::load(&path).unwrap();
            seen += 1;
        }
    }
    assert_eq!(seen, 5);
}
