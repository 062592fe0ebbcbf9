use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tsprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsprobe")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|_| panic!("stderr is not json: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = tsprobe(&[
        "synth",
        "--clips",
        "60",
        "--classes",
        "3",
        "--dim",
        "8",
        "--layers",
        "2",
        "--steps",
        "5",
        "--task",
        "multiclass",
        "--sep",
        "6",
        "--seed",
        "1",
        "--out",
        p(&data),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = data.join("manifest.json");
    let ckpt = dir.path().join("probe.json");
    let out = tsprobe(&[
        "train",
        "--manifest",
        p(&manifest),
        "--agg",
        "attention",
        "--layers",
        "weighted",
        "--seed",
        "4",
        "--lr",
        "0.01",
        "--epochs",
        "30",
        "--out",
        p(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["best_epoch"].as_u64().unwrap() >= 1);
    let history = fs::read_to_string(dir.path().join("probe.json.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 31);
    assert!(dir.path().join("probe.json.params").exists());

    let result = dir.path().join("eval.json");
    let out = tsprobe(&["eval", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--out", p(&result)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(&result).unwrap()).unwrap();
    assert_eq!(eval["metric_name"], "accuracy");
    assert_eq!(eval["n_instances"], 18);
    assert!(eval["value"].as_f64().unwrap() >= 0.9, "{eval}");
}

#[test]
fn failures_exit_nonzero_with_json_summary() {
    let dir = tempfile::tempdir().unwrap();
    let err = error_json(&tsprobe(&["train", "--manifest", p(&dir.path().join("missing.json")), "--out", "x.json"]));
    assert_eq!(err["kind"], "store");
    assert!(err["error"].as_str().unwrap().contains("missing.json"));

    let data = dir.path().join("one_layer");
    assert!(tsprobe(&["synth", "--clips", "10", "--out", p(&data)]).status.success());
    let err = error_json(&tsprobe(&[
        "train",
        "--manifest",
        p(&data.join("manifest.json")),
        "--layers",
        "weighted",
        "--out",
        p(&dir.path().join("c.json")),
    ]));
    assert_eq!(err["kind"], "config");

    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"manifests": {"1": "one_layer/manifest.json"}}"#).unwrap();
    let err = error_json(&tsprobe(&["sweep", "--spec", p(&spec), "--out", p(&dir.path().join("r.xml"))]));
    assert_eq!(err["kind"], "spec");

    fs::write(&spec, r#"{"manifests": {"2": "one_layer/manifest.json"}}"#).unwrap();
    let err = error_json(&tsprobe(&["sweep", "--spec", p(&spec), "--out", p(&dir.path().join("r.json"))]));
    assert_eq!(err["kind"], "spec");

    let err = error_json(&tsprobe(&["synth", "--clips", "0", "--out", p(&dir.path().join("empty"))]));
    assert_eq!(err["kind"], "store");
}

#[test]
fn sweep_writes_every_format() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert!(tsprobe(&[
        "synth",
        "--clips",
        "40",
        "--classes",
        "3",
        "--dim",
        "4",
        "--steps",
        "3",
        "--ts",
        "3",
        "--out",
        p(&data)
    ])
    .status
    .success());
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"manifests": {"3": "d/manifest.json"}, "n_runs": 2, "train_config": {"max_epochs": 3}}"#)
        .unwrap();
    for name in ["r.json", "r.csv", "r.md"] {
        let out = tsprobe(&["sweep", "--spec", p(&spec), "--out", p(&dir.path().join(name))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("model_id,ts_seconds,aggregation,layer_mode,metric_name,mean,std,n_runs\n"));
    assert_eq!(csv.lines().count(), 3);
    let md = tsprobe(&["report", "--in", p(&dir.path().join("r.json")), "--format", "md"]);
    assert_eq!(String::from_utf8(md.stdout).unwrap(), fs::read_to_string(dir.path().join("r.md")).unwrap());
    let csv_again = tsprobe(&["report", "--in", p(&dir.path().join("r.json")), "--format", "csv"]);
    assert_eq!(String::from_utf8(csv_again.stdout).unwrap(), csv);
}
