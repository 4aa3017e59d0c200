//! End-to-end tests of the command surface and its exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gzsl-moe"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

/// A config small enough for subprocess tests.
fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "seed": 42,
        "data": { "scene": {
            "scale": 0.02, "train_frames": 1, "eval_frames": 1
        }},
        "backbone": {
            "epochs": 1, "neighbors": 6, "hidden_widths": [16], "feature_dim": 8
        },
        "generator": {
            "epochs": 1, "hidden": 16, "noise_dim": 8, "depth": 1, "experts": 3
        },
        "classifier": {
            "epochs": 1, "hidden": 16, "experts": 3, "n_per_class": 50
        },
        "prototypes": { "synthesize": { "dim": 8, "seed": 3 } }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn unknown_flag_prints_usage_and_exits_64() {
    let out = run(&["--bogus"]);
    assert_eq!(code(&out), 64);
    let out = run(&["train", "--nonsense", "x"]);
    assert_eq!(code(&out), 64);
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
}

#[test]
fn missing_config_file_exits_66() {
    let out = run(&[
        "train",
        "--config",
        "/nonexistent/config.json",
        "--stage",
        "backbone",
        "--out",
        "/tmp/unused-out",
    ]);
    assert_eq!(code(&out), 66);
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{ not json").unwrap();
    let out = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--stage",
        "backbone",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn generator_stage_without_backbone_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--stage",
        "generator",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("missing backbone checkpoint"),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_data_writes_the_requested_frames() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let data_dir = dir.path().join("frames");
    let out = run(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
        "--frames",
        "2",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let mut files: Vec<_> = fs::read_dir(&data_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert_eq!(files.len(), 2);
    // 0.02 of the default distribution: 200+268+36+56+24 points
    let first = fs::read_to_string(&files[0]).unwrap();
    assert!(first.starts_with("GZSL-PF v1 584\n"), "header: {}", &first[..24]);
}

#[test]
fn check_metrics_suite_passes() {
    let out = run(&["check", "--suite", "metrics"]);
    assert_eq!(code(&out), 0, "stdout: {}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[PASS] miou_hand_example"));
    assert!(text.contains("[PASS] harmonic_mean_example"));
}

#[test]
fn full_cli_round_trip_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out_dir = dir.path().join("run");

    let trained = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--stage",
        "all",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&trained), 0, "stderr: {}", String::from_utf8_lossy(&trained.stderr));
    assert!(out_dir.join("backbone.ckpt").exists());
    assert!(out_dir.join("generator.ckpt").exists());
    assert!(out_dir.join("classifier.ckpt").exists());
    assert!(out_dir.join("classifier_history.csv").exists());

    // frames for eval / infer
    let data_dir = dir.path().join("frames");
    let gen = run(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
        "--frames",
        "1",
    ]);
    assert_eq!(code(&gen), 0);

    let report = dir.path().join("report");
    let evaled = run(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--ckpt",
        out_dir.to_str().unwrap(),
        "--data",
        data_dir.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&evaled), 0, "stderr: {}", String::from_utf8_lossy(&evaled.stderr));
    assert!(dir.path().join("report.txt").exists());
    assert!(dir.path().join("report.csv").exists());
    assert!(dir.path().join("report.confusion.csv").exists());
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));

    let frame_file = data_dir.join("frame_0000.pf");
    let labels_file = dir.path().join("labels.txt");
    let inferred = run(&[
        "infer",
        "--ckpt",
        out_dir.to_str().unwrap(),
        "--in",
        frame_file.to_str().unwrap(),
        "--out",
        labels_file.to_str().unwrap(),
    ]);
    assert_eq!(code(&inferred), 0, "stderr: {}", String::from_utf8_lossy(&inferred.stderr));
    let labels = fs::read_to_string(&labels_file).unwrap();
    assert_eq!(labels.lines().count(), 584);
    assert!(labels.lines().all(|l| matches!(l, "1" | "2" | "3" | "4" | "5")));
}

#[test]
fn infer_with_missing_frame_exits_66() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "infer",
        "--ckpt",
        dir.path().to_str().unwrap(),
        "--in",
        "/nonexistent/frame.pf",
        "--out",
        dir.path().join("labels.txt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 66);
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let d1 = dir.path().join("a");
    let d2 = dir.path().join("b");
    for (seed, out_dir) in [("7", &d1), ("7", &d2)] {
        let out = run(&[
            "gen-data",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--frames",
            "1",
            "--seed",
            seed,
        ]);
        assert_eq!(code(&out), 0);
    }
    let a = fs::read(d1.join("frame_0000.pf")).unwrap();
    let b = fs::read(d2.join("frame_0000.pf")).unwrap();
    assert_eq!(a, b);

    let d3 = dir.path().join("c");
    let out = run(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        d3.to_str().unwrap(),
        "--frames",
        "1",
        "--seed",
        "8",
    ]);
    assert_eq!(code(&out), 0);
    let c = fs::read(d3.join("frame_0000.pf")).unwrap();
    assert_ne!(a, c);
}
