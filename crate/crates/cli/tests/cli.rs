//! End-to-end tests against the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mkdseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{stdout}\nstderr:\n{stderr}"
    );
}

fn write_synth_config(path: &Path) {
    fs::write(
        path,
        "height = 32\nwidth = 32\nclass_count = 4\nseed = 5\n",
    )
    .unwrap();
}

fn train_config(dir: &Path, out_dir: &Path, iters: usize, alpha: f64, beta: f64) -> String {
    format!(
        r#"
[run]
train_images = "{data}/images"
train_labels = "{data}/labels"
manifest = "{data}/split.txt"
out_dir = "{out}"
checkpoint_every = 2

[train]
num_classes = 4
crop = [16, 16]
iters_max = {iters}
batch_labeled = 2
batch_unlabeled = 2
alpha = {alpha}
beta = {beta}
seed = 13

[arch]
widths = [2, 3, 4]
feature_dim = 3
num_classes = 4
"#,
        data = dir.display(),
        out = out_dir.display(),
    )
}

/// Generates a dataset, splits it, and returns the dataset root.
fn prepare_data(root: &Path) {
    let synth_cfg = root.join("synth.toml");
    write_synth_config(&synth_cfg);
    let data = root.join("data");
    let out = run(&[
        "synth",
        "--config",
        synth_cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--count",
        "8",
    ]);
    assert_code(&out, 0);
    let out = run(&[
        "split",
        "--data",
        data.to_str().unwrap(),
        "--denominator",
        "2",
        "--seed",
        "3",
        "--out",
        data.join("split.txt").to_str().unwrap(),
    ]);
    assert_code(&out, 0);
}

fn read_steps(log: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(log)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "step")
        .collect()
}

#[test]
fn smoke_train_eval_plot() {
    let tmp = tempfile::tempdir().unwrap();
    prepare_data(tmp.path());
    let out_dir = tmp.path().join("run");
    let cfg_path = tmp.path().join("train.toml");
    fs::write(
        &cfg_path,
        train_config(&tmp.path().join("data"), &out_dir, 2, 1.5, 1.0),
    )
    .unwrap();

    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_code(&out, 0);
    let steps = read_steps(&out_dir.join("train_log.jsonl"));
    assert_eq!(steps.len(), 2);
    assert!(out_dir.join("checkpoint-final.bin").is_file());

    let out = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint-final.bin").to_str().unwrap(),
        "--data",
        tmp.path().join("data").to_str().unwrap(),
        "--branch",
        "student1",
    ]);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mIoU"), "missing mIoU in:\n{stdout}");

    // identical eval twice
    let again = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint-final.bin").to_str().unwrap(),
        "--data",
        tmp.path().join("data").to_str().unwrap(),
        "--branch",
        "student1",
    ]);
    assert_eq!(out.stdout, again.stdout);

    let svg_path = tmp.path().join("curves.svg");
    let out = run(&[
        "plot",
        "--log",
        out_dir.join("train_log.jsonl").to_str().unwrap(),
        "--out",
        svg_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("polyline"));
}

#[test]
fn supervised_only_logs_zero_consistency() {
    let tmp = tempfile::tempdir().unwrap();
    prepare_data(tmp.path());
    let out_dir = tmp.path().join("run");
    let cfg_path = tmp.path().join("train.toml");
    fs::write(
        &cfg_path,
        train_config(&tmp.path().join("data"), &out_dir, 2, 0.0, 0.0),
    )
    .unwrap();
    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_code(&out, 0);
    for v in read_steps(&out_dir.join("train_log.jsonl")) {
        assert_eq!(v["st"].as_f64().unwrap(), 0.0);
        assert_eq!(v["ss"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    prepare_data(tmp.path());

    let full_dir = tmp.path().join("full");
    let cfg_full = tmp.path().join("full.toml");
    fs::write(
        &cfg_full,
        train_config(&tmp.path().join("data"), &full_dir, 4, 1.5, 1.0),
    )
    .unwrap();
    assert_code(&run(&["train", "--config", cfg_full.to_str().unwrap()]), 0);
    let full_steps = read_steps(&full_dir.join("train_log.jsonl"));
    assert_eq!(full_steps.len(), 4);

    // same config, different out_dir: the rolling checkpoint lands at step 2
    let part_dir = tmp.path().join("part");
    let cfg_part = tmp.path().join("part.toml");
    fs::write(
        &cfg_part,
        train_config(&tmp.path().join("data"), &part_dir, 4, 1.5, 1.0),
    )
    .unwrap();
    assert_code(&run(&["train", "--config", cfg_part.to_str().unwrap()]), 0);

    let resume_dir = tmp.path().join("resumed");
    let cfg_resume = tmp.path().join("resume.toml");
    fs::write(
        &cfg_resume,
        train_config(&tmp.path().join("data"), &resume_dir, 4, 1.5, 1.0),
    )
    .unwrap();
    let out = run(&[
        "train",
        "--config",
        cfg_resume.to_str().unwrap(),
        "--resume",
        part_dir.join("checkpoint.bin").to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let tail = read_steps(&resume_dir.join("train_log.jsonl"));
    assert_eq!(tail.len(), 2);
    for (a, b) in full_steps[2..].iter().zip(tail.iter()) {
        assert_eq!(a["step"], b["step"]);
        assert_eq!(a["total"].as_f64().unwrap(), b["total"].as_f64().unwrap());
        assert_eq!(a["sup"].as_f64().unwrap(), b["sup"].as_f64().unwrap());
        assert_eq!(a["st"].as_f64().unwrap(), b["st"].as_f64().unwrap());
        assert_eq!(a["ss"].as_f64().unwrap(), b["ss"].as_f64().unwrap());
    }
}

#[test]
fn config_with_unknown_key_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.toml");
    fs::write(
        &cfg_path,
        r#"
[run]
train_images = "x"
train_labels = "y"
out_dir = "z"
typo_key = 3

[train]
num_classes = 4
"#,
    )
    .unwrap();
    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("typo_key"), "stderr:\n{stderr}");
}

#[test]
fn invalid_train_field_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    prepare_data(tmp.path());
    let cfg_path = tmp.path().join("bad.toml");
    let mut cfg = train_config(&tmp.path().join("data"), &tmp.path().join("run"), 2, 1.5, 1.0);
    cfg.push_str("gamma = 1.5\n");
    fs::write(&cfg_path, cfg).unwrap();
    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gamma"), "stderr:\n{stderr}");
}

#[test]
fn missing_checkpoint_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        tmp.path().join("nope.bin").to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
        "--branch",
        "student1",
    ]);
    assert_code(&out, 2);
}

#[test]
fn bad_branch_name_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("ck.bin"), b"irrelevant").unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        tmp.path().join("ck.bin").to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
        "--branch",
        "student9",
    ]);
    assert_code(&out, 1);
}

#[test]
fn plot_skips_malformed_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log.jsonl");
    fs::write(
        &log,
        concat!(
            r#"{"kind":"step","step":0,"sup":2.0,"st":0.5,"ss":0.4,"total":3.15,"lr":0.01,"lambda":0.0,"valid_fraction":[1.0,1.0]}"#,
            "\n",
            "this is not json\n",
            r#"{"kind":"eval","step":1,"branch":"student1","miou":0.5,"per_class":[0.5,0.5]}"#,
            "\n",
        ),
    )
    .unwrap();
    let svg_path = tmp.path().join("out.svg");
    let out = run(&[
        "plot",
        "--log",
        log.to_str().unwrap(),
        "--out",
        svg_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("skipped 1"), "stderr:\n{stderr}");
    assert!(svg_path.is_file());
}

#[test]
fn missing_usage_flags_exit_one() {
    let out = run(&["train"]);
    assert_code(&out, 1);
    let out = run(&["--help"]);
    assert_code(&out, 0);
}
