mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dosegraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dosegraph"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("DOSEGRAPH_EMBED_URL")
        .output()
        .expect("run dosegraph")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_convert_and_build_graph() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ph");
    ok(&dosegraph(&["gen-phantoms", "--n", "3", "--seed", "1", "--out", s(&out)]));
    let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files, ["phantom-000.dgb", "phantom-001.dgb", "phantom-002.dgb"]);

    let case = out.join("phantom-000.dgb");
    let conv: Value = serde_json::from_str(&ok(&dosegraph(&["convert", "--case", s(&case)]))).unwrap();
    assert_eq!(conv["channels"], 18);
    assert_eq!(conv["shape"], serde_json::json!([16, 16, 8]));

    let graph: Value = serde_json::from_str(&ok(&dosegraph(&["build-graph", "--case", s(&case)]))).unwrap();
    assert_eq!(graph["threshold"], 0.3);
    assert_eq!(graph["dose_nodes"], 256);
    let loose: Value =
        serde_json::from_str(&ok(&dosegraph(&["build-graph", "--case", s(&case), "--threshold", "0.05"]))).unwrap();
    assert!(loose["edges"].as_u64() >= graph["edges"].as_u64());
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = dosegraph(&["build-graph", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = dosegraph(&["convert", "--case", "/definitely/missing.dgb"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.dgb"));

    let out = dosegraph(&["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn predict_depends_on_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = common::fixture(dir.path());
    let case = data.join("phantom-000.dgb");
    let plain = dir.path().join("plain.json");
    let boost = dir.path().join("boost.json");
    ok(&dosegraph(&["predict", "--case", s(&case), "--checkpoint", s(&ckpt), "--out", s(&plain)]));
    ok(&dosegraph(&[
        "predict",
        "--case",
        s(&case),
        "--checkpoint",
        s(&ckpt),
        "--prompt-text",
        "BOOST_PTV",
        "--out",
        s(&boost),
    ]));
    let (a, b) = (std::fs::read(&plain).unwrap(), std::fs::read(&boost).unwrap());
    assert_ne!(a, b);
    let a: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(a["prompt_text"], "");
    assert_eq!(a["doses"].as_array().unwrap().len(), 256);
}

#[test]
fn train_evaluate_and_cv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cases");
    ok(&dosegraph(&["gen-phantoms", "--n", "6", "--seed", "2", "--out", s(&data)]));
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "model = \"mlp\"\nseed = 1\n[training]\nmax_epochs = 3\nlr_grid = [0.001]\n",
    )
    .unwrap();

    let ckpt = dir.path().join("mlp.ckpt");
    ok(&dosegraph(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&ckpt)]));
    let log = std::fs::read_to_string(dir.path().join("mlp.log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"event\":\"epoch\"")).count(), 3);

    let eval_dir = dir.path().join("eval");
    let summary: Value = serde_json::from_str(&ok(&dosegraph(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--report-dir",
        s(&eval_dir),
    ])))
    .unwrap();
    assert_eq!(summary["model"], "mlp");
    assert!(eval_dir.join("metrics.csv").exists());

    let cv_dir = dir.path().join("cv");
    ok(&dosegraph(&[
        "cv",
        "--data",
        s(&data),
        "--k",
        "3",
        "--config",
        s(&config),
        "--report-dir",
        s(&cv_dir),
    ]));
    for f in 0..3 {
        assert!(cv_dir.join(format!("fold_{f}.json")).exists());
    }
    let table = std::fs::read_to_string(cv_dir.join("metrics.csv")).unwrap();
    assert!(table.starts_with("fold,model,mse,"));
    // Header, three folds, mean and sd.
    assert_eq!(table.lines().count(), 6);
    let curves = std::fs::read_dir(&cv_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".svg"))
        .count();
    assert!(curves >= 1);

    let out = dosegraph(&["cv", "--data", s(&data), "--k", "9", "--report-dir", s(&cv_dir)]);
    assert!(!out.status.success());
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "modle = \"mlp\"\n").unwrap();
    let out = dosegraph(&["train", "--data", s(dir.path()), "--config", s(&config), "--out", "x.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("modle"));
}
