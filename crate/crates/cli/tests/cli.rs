use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fop() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fop"))
}

fn run(args: &[&str]) -> Output {
    fop().args(args).output().expect("spawn fop")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn toy_config(lr: f64, max_iters: u64) -> String {
    format!(
        r#"{{"problem": "booth",
            "optimizer": {{"kind": {{"type": "fop", "base": {{"type": "sgd"}},
                                     "preconditioner": {{"mode": {{"type": "full"}}, "hyper_lr": 1e-4}}}},
                           "lr": {lr}}},
            "max_iters": {max_iters}, "snapshot_every": 20}}"#
    )
}

/// Drops the wall-clock line, the only field allowed to differ between runs.
fn without_clock(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with("wall_clock_s,")).collect::<Vec<_>>().join("\n")
}

#[test]
fn toy_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(dir.path(), "ok.json", &toy_config(0.05, 50_000));
    let capped = write(dir.path(), "capped.json", &toy_config(0.0, 100));
    let wild = write(dir.path(), "wild.json", &toy_config(1.0, 50_000));
    let out_path = dir.path().join("run.txt");

    let out = run(&["toy", "--config", ok.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&out_path).unwrap();
    assert!(text.starts_with("fop-run-record\nversion,1.0\ncommand,toy\n"));
    assert!(text.contains("converged,true"));

    assert_eq!(code(&run(&["toy", "--config", capped.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["toy", "--config", wild.to_str().unwrap()])), 3);
}

#[test]
fn config_errors_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = write(dir.path(), "bad.json", "{ not json");
    let bad_value = write(dir.path(), "neg.json", &toy_config(-1.0, 10));
    assert_eq!(code(&run(&["toy", "--config", bad_json.to_str().unwrap()])), 4);
    assert_eq!(code(&run(&["toy", "--config", bad_value.to_str().unwrap()])), 4);
    assert_eq!(code(&run(&["toy", "--config", "/nonexistent/config.json"])), 4);
    assert_eq!(code(&run(&["toy"])), 4);
    assert_eq!(code(&run(&["frobnicate"])), 4);
}

#[test]
fn toy_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &toy_config(0.05, 50_000));
    let a = run(&["toy", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
    let b = run(&["toy", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&a), 0);
    let (a, b) = (String::from_utf8(a.stdout).unwrap(), String::from_utf8(b.stdout).unwrap());
    assert_eq!(without_clock(&a), without_clock(&b));
    assert!(a.contains("\"seed\":3"));
}

#[test]
fn bench_writes_one_row_per_optimizer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bench.json",
        r#"{"problem": "booth",
            "optimizers": [{"kind": {"type": "sgd"}}, {"kind": {"type": "adam"}, "lr": 0.3}],
            "lr_grid": [0.01, 0.1]}"#,
    );
    let out = run(&["bench", "--config", cfg.to_str().unwrap(), "--jobs", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("optimizer,lr,"));
    assert!(lines[1].starts_with("sgd,0.1,"));
    assert!(lines[2].starts_with("adam,0.3,"));
}

#[test]
fn sweep_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sweep.json",
        r#"{"task": {"type": "toy", "problem": "booth", "max_iters": 2000},
            "optimizer": {"type": "momentum", "alpha": 0.0},
            "lrs": [0.01, 0.05], "axis": "alpha", "values": [0.0, 0.5], "seeds": [0, 1, 2]}"#,
    );
    let out_path = dir.path().join("sweep.csv");
    let out = run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&out_path).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("run,")).count(), 12);
    assert_eq!(csv.lines().filter(|l| l.starts_with("summary,")).count(), 4);

    // --seed narrows the sweep to one seed
    let out = run(&["sweep", "--config", cfg.to_str().unwrap(), "--seed", "7"]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("run,")).count(), 4);
}

#[test]
fn analyze_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &toy_config(0.05, 50_000));
    let rec = dir.path().join("run.txt");
    assert_eq!(code(&run(&["toy", "--config", cfg.to_str().unwrap(), "--out", rec.to_str().unwrap()])), 0);
    let out_dir = dir.path().join("analysis");
    let out = run(&["analyze", rec.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["spectrum.csv", "angles.csv", "norms.csv"] {
        let text = fs::read_to_string(out_dir.join(f)).unwrap();
        assert!(text.lines().count() > 1, "{f} is empty");
    }
}

#[test]
fn analyze_without_snapshots_explains_what_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &toy_config(0.05, 50_000));
    let rec = dir.path().join("run.txt");
    let out = run(&["toy", "--config", cfg.to_str().unwrap(), "--snapshot-every", "0", "--out", rec.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let out = run(&["analyze", rec.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("snapshot"), "{err}");
    assert!(!dir.path().join("spectrum.csv").exists());
}

#[test]
fn analyze_rejects_unknown_major_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &toy_config(0.05, 50_000));
    let rec = dir.path().join("run.txt");
    assert_eq!(code(&run(&["toy", "--config", cfg.to_str().unwrap(), "--out", rec.to_str().unwrap()])), 0);
    let text = fs::read_to_string(&rec).unwrap().replace("version,1.0", "version,2.0");
    fs::write(&rec, text).unwrap();
    let out = run(&["analyze", rec.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("2.0"));
}

#[test]
fn train_runs_on_a_small_synthetic_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "train.json",
        r#"{"data": {"type": "synthetic", "train": 200, "test": 50, "dim": 10, "classes": 3},
            "hidden": [8],
            "epochs": 2, "batch_size": 20,
            "optimizer": {"kind": {"type": "fop", "base": {"type": "momentum", "alpha": 0.9},
                                   "preconditioner": {"mode": {"type": "low_rank", "rank": 4}, "hyper_lr": 0.01}},
                          "lr": 0.05},
            "snapshot_every": 5}"#,
    );
    let rec = dir.path().join("train.txt");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out", rec.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&rec).unwrap();
    assert!(text.contains("command,train"));
    assert!(text.contains("[evals]"));
    let out = run(&["analyze", rec.to_str().unwrap(), "--out", dir.path().join("a").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_configs_parse() {
    use fop_core::harness::{BenchConfig, SweepConfig, ToyConfig, TrainJob};
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let text = fs::read_to_string(&path).unwrap();
        let parsed = match name.split('_').next().unwrap() {
            "toy" => serde_json::from_str::<ToyConfig>(&text).map(|_| ()),
            "bench" => serde_json::from_str::<BenchConfig>(&text).map(|_| ()),
            "train" => serde_json::from_str::<TrainJob>(&text).map(|_| ()),
            "sweep" => serde_json::from_str::<SweepConfig>(&text).map(|_| ()),
            other => panic!("{name}: unknown config prefix {other}"),
        };
        parsed.unwrap_or_else(|e| panic!("{name}: {e}"));
        seen += 1;
    }
    assert!(seen >= 7);
}
