use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn demaformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demaformer")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "model": {"d": 8, "d_k": 8, "n_enc": 1, "n_dec": 1, "d_v": 6, "d_q": 5, "d_a": 3, "l_m_test": 3},
  "synth": {"l_v": 10, "l_q": 3, "d_v": 6, "d_q": 5, "d_a": 3, "min_span": 2, "max_span": 4},
  "ebm": {"k": 10},
  "train": {"epochs": 3, "batch_size": 2},
  "seed": 7
}"#;

#[test]
fn pipeline_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let run = dir.path().join("run");
    let eval = dir.path().join("eval");
    let out = demaformer(&["gen-data", "--out", path(&data), "--n", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = demaformer(&["train", "--data", path(&data), "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["params.json", "train.csv", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let out = demaformer(&["eval", "--params", path(&run.join("params.json")), "--data", path(&data), "--out", path(&eval)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let preds = fs::read_to_string(eval.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 10);
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    for key in ["rank1@0.5", "rank1@0.7", "rank5@0.5", "map@0.5", "map@0.75", "map_avg", "hit@1"] {
        let v = metrics[key].as_f64().unwrap_or_else(|| panic!("missing {key}"));
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn training_and_predictions_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data.jsonl");
    assert!(demaformer(&["gen-data", "--config", path(&cfg), "--out", path(&data), "--n", "12"]).status.success());
    let mut csvs = Vec::new();
    let mut preds = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = demaformer(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(fs::read(out.join("train.csv")).unwrap());
        let ev = dir.path().join(format!("{run}-eval"));
        let o = demaformer(&["eval", "--params", path(&out.join("params.json")), "--data", path(&data), "--out", path(&ev)]);
        assert!(o.status.success());
        preds.push(fs::read(ev.join("predictions.jsonl")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(preds[0], preds[1]);
    let header = String::from_utf8_lossy(&csvs[0]).lines().next().unwrap().to_string();
    assert_eq!(header, "epoch,l_match,l_nll,total,rank1_05");
    assert_eq!(String::from_utf8_lossy(&csvs[0]).lines().count(), 4);
}

#[test]
fn sample_writes_energy_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data.jsonl");
    let run = dir.path().join("run");
    let trace = dir.path().join("trace.csv");
    assert!(demaformer(&["gen-data", "--config", path(&cfg), "--out", path(&data), "--n", "5"]).status.success());
    assert!(demaformer(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]).status.success());
    let params = run.join("params.json");
    let o = demaformer(&["sample", "--params", path(&params), "--data", path(&data), "--index", "2", "--steps", "25", "--out", path(&trace)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,mean_energy"));
    let rows: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 26);
    assert!(rows.iter().all(|v| v.is_finite()));
    let o = demaformer(&["sample", "--params", path(&params), "--data", path(&data), "--index", "99"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_on_defaults_passes() {
    let o = demaformer(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max rel err"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"ebm": {"gama": 0.1}}"#).unwrap();
    let o = demaformer(&["gradcheck", "--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gama"));
    fs::write(&cfg, r#"{"ebm": {"gamma": -1.0}}"#).unwrap();
    let o = demaformer(&["gen-data", "--config", path(&cfg), "--out", path(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let o = demaformer(&["train", "--data", path(&missing), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.jsonl"));
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": 3}\n").unwrap();
    let o = demaformer(&["train", "--data", path(&bad), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}
