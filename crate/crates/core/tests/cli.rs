mod common;

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_das-forge");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DAS_FORGE_THREADS").output().unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {text}"))
}

fn snapshot(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    common::files_under(dir)
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(dir.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

const SMALL_CONFIG: &str = r#"{
  "sim": {"n_traces": 32},
  "model": {"extractor": {"input_height": 16, "input_width": 16}, "lstm_hidden": 8},
  "train": {"epochs": 2, "n_runs": 2},
  "tsne": {"iterations": 250}
}"#;

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("simulate"));
}

#[test]
fn usage_errors_exit_two() {
    for args in [&["--bogus", "render"][..], &[][..], &["embed", "--stage", "3"][..]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&o)["error"], "usage");
    }
}

#[test]
fn missing_input_exits_three_with_path() {
    let o = run(&["render", "--in", "/nonexistent/m.tsm", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(3));
    let j = stderr_json(&o);
    assert_eq!(j["code"], 3);
    assert!(j["message"].as_str().unwrap().contains("/nonexistent/m.tsm"));
}

#[test]
fn invalid_config_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"batch_size": 0}}"#).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "runs", "--dataset", ".", "--out", "o"]);
    assert_eq!(o.status.code(), Some(4));
    std::fs::write(&cfg, "{not json").unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "simulate", "--out", "o"]).status.code(), Some(4));
    let o = Command::new(BIN)
        .args(["render", "--in", "x", "--out", "y"])
        .env("DAS_FORGE_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cfg_path = d("config.json");
    std::fs::write(&cfg_path, SMALL_CONFIG).unwrap();
    let with_cfg = |args: &[&str]| {
        let mut full = vec!["--config", cfg_path.as_str(), "--seed", "1", "--threads", "1"];
        full.extend_from_slice(args);
        let o = run(&full);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };

    with_cfg(&["simulate", "--preset", "desk", "--out", &d("raw")]);
    let raw = common::files_under(Path::new(&d("raw")));
    assert_eq!(raw.iter().filter(|f| f.extension().is_some_and(|e| e == "tsm")).count(), 15);

    let before = snapshot(Path::new(&d("raw")));
    with_cfg(&["demod", "--in-dir", &d("raw"), "--out-dir", &d("base")]);
    with_cfg(&[
        "demod", "--in", &format!("{}/class_03_raw.tsm", d("raw")), "--out-amp", &d("one_amp.tsm"),
        "--out-phase", &d("one_phase.tsm"), "--band-center", "160e6", "--band-width", "20e6",
    ]);
    assert_eq!(snapshot(Path::new(&d("raw"))), before);
    assert_eq!(std::fs::read(d("one_amp.tsm")).unwrap(), std::fs::read(format!("{}/class_03_damp.tsm", d("base"))).unwrap());

    let base_before = snapshot(Path::new(&d("base")));
    with_cfg(&["dataset", "build", "--base-dir", &d("base"), "--out-dir", &d("ds"), "--offsets", "9", "--flip", "--img-size", "16"]);
    assert_eq!(snapshot(Path::new(&d("base"))), base_before);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(format!("{}/manifest.json", d("ds"))).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 300);

    with_cfg(&["train", "--dataset", &d("ds"), "--out", &d("model")]);
    for f in ["weights.wgt", "model.json", "split.json", "run.json", "run_curves.csv", "run_curves.png", "run_confusion.png"] {
        assert!(Path::new(&d("model")).join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(format!("{}/run_curves.csv", d("model"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);

    let o = with_cfg(&["eval", "--dataset", &d("ds"), "--model", &d("model")]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("on 90 samples"));

    with_cfg(&["embed", "--dataset", &d("ds"), "--model", &d("model"), "--stage", "1", "--out", &d("emb")]);
    assert!(Path::new(&d("emb")).join("embedding_stage1.png").exists());

    with_cfg(&["runs", "--dataset", &d("ds"), "--out", &d("runs"), "--n", "2", "--import", &format!("{}/weights.wgt", d("model")), "--freeze", "--epochs", "1"]);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(format!("{}/runs.json", d("runs"))).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["body"]["accuracies"].as_array().unwrap().len(), 2);

    with_cfg(&["render", "--in", &format!("{}/class_00_wphase.tsm", d("base")), "--out", &d("r.png"), "--size", "32", "--colormap", "lut256"]);
    let img = image::open(d("r.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}
