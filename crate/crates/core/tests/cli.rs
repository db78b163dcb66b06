use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pointjem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointjem")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set", "train.epochs=2",
    "--set", "train.batch_size=8",
    "--set", "model.encoder_widths=[8,16]",
    "--set", "model.proj_hidden=[32]",
    "--set", "layout.K=4",
    "--set", "layout.M=4",
    "--set", "data.points=64",
];

#[test]
fn gen_writes_one_file_per_cloud_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = pointjem(&["gen", "--out", s(&out), "--classes", "8", "--per-class", "125", "--points", "256", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 8);
    assert_eq!(manifest["items"].as_array().unwrap().len(), 1000);
    let files: usize = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| fs::read_dir(e.path()).unwrap().count())
        .sum();
    assert_eq!(files, 1000);
}

#[test]
fn probe_without_checkpoint_names_the_flag() {
    let o = pointjem(&["probe", "--data", "d", "--mode", "linear", "--out", "o.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--ckpt"));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn missing_dataset_is_a_runtime_error_naming_the_path() {
    let o = pointjem(&["diagnose", "--data", "/no/such/dir", "--ckpt", "c", "--out", "o.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/dir"));
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train.bogus": 1}"#).unwrap();
    let o = pointjem(&["pretrain", "--data", "d", "--config", s(&cfg), "--out", "m", "--log", "l"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("train.bogus"));
}

#[test]
fn unknown_command_is_a_usage_error() {
    assert_eq!(pointjem(&["frobnicate"]).status.code(), Some(2));
}

fn run_pipeline(root: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
    let data = root.join("data");
    let ckpt = root.join("m.ckpt");
    let log = root.join("log.csv");
    let probe = root.join("probe.json");
    let emb = root.join("emb.csv");
    let o = pointjem(&["gen", "--out", s(&data), "--classes", "3", "--per-class", "12", "--points", "64", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut args = vec!["pretrain", "--data", s(&data), "--out", s(&ckpt), "--log", s(&log)];
    args.extend_from_slice(TINY);
    let o = pointjem(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut args = vec!["probe", "--data", s(&data), "--ckpt", s(&ckpt), "--mode", "linear", "--label-fraction", "0.5", "--out", s(&probe)];
    args.extend_from_slice(TINY);
    let o = pointjem(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut args = vec!["embed", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&emb)];
    args.extend_from_slice(TINY);
    assert!(pointjem(&args).status.success());
    (
        fs::read(&log).unwrap(),
        fs::read(&probe).unwrap(),
        fs::read(&ckpt).unwrap(),
        fs::read(&emb).unwrap(),
    )
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline(a.path());
    let rb = run_pipeline(b.path());
    assert!(ra == rb);
    let log = String::from_utf8(ra.0).unwrap();
    assert!(log.contains("# layout.M=4"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3);
    let probe: serde_json::Value = serde_json::from_slice(&ra.1).unwrap();
    assert_eq!(probe["config"]["probe.label_fraction"], 0.5);
    assert!(probe["result"]["accuracy"].as_f64().is_some());
}

#[test]
fn knn_probe_and_diagnose_run_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    run_pipeline(root);
    let (data, ckpt) = (root.join("data"), root.join("m.ckpt"));
    let out = root.join("knn.json");
    let mut args = vec!["probe", "--data", s(&data), "--ckpt", s(&ckpt), "--mode", "knn", "--out", s(&out)];
    args.extend_from_slice(TINY);
    let o = pointjem(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy="));
    let diag = root.join("diag.json");
    let mut args = vec!["diagnose", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&diag)];
    args.extend_from_slice(TINY);
    assert!(pointjem(&args).status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&diag).unwrap()).unwrap();
    assert_eq!(v["samples"], 36);
    assert_eq!(v["report"]["mi_matrix"].as_array().unwrap().len(), 4);
}
