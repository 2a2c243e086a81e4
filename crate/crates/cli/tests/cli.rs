//! End-to-end runs of the `unalab` binary: exit codes, output layout and
//! byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn unalab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unalab"))
        .args(args)
        .current_dir(dir)
        .env_remove("UNA_LAB_SEED")
        .output()
        .expect("spawn unalab")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = unalab(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = unalab(dir, args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&read(p)).unwrap()
}

/// A quick NLM config: template with a short optimizer run.
fn quick_model(dir: &Path, kind: &str, dim: usize) -> PathBuf {
    let out = ok(dir, &["template", "--kind", kind, "--dim", &dim.to_string()]);
    let mut spec: Value = serde_json::from_slice(&out.stdout).unwrap();
    if let Some(opt) = spec.get_mut("optimizer") {
        opt["epochs"] = 50.into();
    }
    if let Some(h) = spec.pointer_mut("/mlp/hidden") {
        *h = serde_json::json!([10]);
    }
    let path = dir.join(format!("{kind}-{dim}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
    path
}

fn csv_rows(p: impl AsRef<Path>) -> Vec<Vec<String>> {
    let text = String::from_utf8(read(p)).unwrap();
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn dataset_is_deterministic_per_seed() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["dataset", "--gen", "cubic-gap", "--seed", "7", "--out", "a"]);
    ok(t.path(), &["dataset", "--gen", "cubic-gap", "--seed", "7", "--out", "b"]);
    ok(t.path(), &["dataset", "--gen", "cubic-gap", "--seed", "8", "--out", "c"]);
    let a = read(t.path().join("a/dataset.csv"));
    assert_eq!(a, read(t.path().join("b/dataset.csv")));
    assert_ne!(a, read(t.path().join("c/dataset.csv")));
    let m = json(t.path().join("a/manifest.json"));
    assert_eq!(m["command"], "dataset");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["dim"], 1, "defaults are materialized");
}

#[test]
fn seed_falls_back_to_the_environment() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["dataset", "--gen", "squiggle", "--seed", "11", "--out", "flag"]);
    let out = Command::new(env!("CARGO_BIN_EXE_unalab"))
        .args(["dataset", "--gen", "squiggle", "--out", "env"])
        .current_dir(t.path())
        .env("UNA_LAB_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(t.path().join("flag/dataset.csv")), read(t.path().join("env/dataset.csv")));

    let bad = Command::new(env!("CARGO_BIN_EXE_unalab"))
        .args(["dataset", "--gen", "squiggle", "--out", "bad"])
        .current_dir(t.path())
        .env("UNA_LAB_SEED", "eleven")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn unknown_generator_is_a_config_error_naming_the_flag() {
    let t = TempDir::new().unwrap();
    let (c, err) = code(t.path(), &["dataset", "--gen", "spiral", "--seed", "1"]);
    assert_eq!(c, 2);
    assert!(err.contains("--gen"), "{err}");
    assert!(!t.path().join("unalab-out").exists(), "no work before validation");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let t = TempDir::new().unwrap();
    std::fs::write(t.path().join("c.json"), r#"{"gen": "cubic-gap", "seed": 1, "colour": "red"}"#).unwrap();
    let (c, err) = code(t.path(), &["dataset", "--config", "c.json"]);
    assert_eq!(c, 2);
    assert!(err.contains("colour"), "{err}");
}

#[test]
fn flags_override_config_file_keys() {
    let t = TempDir::new().unwrap();
    std::fs::write(t.path().join("c.json"), r#"{"gen": "squiggle", "seed": 1, "out": "from-file"}"#).unwrap();
    ok(t.path(), &["dataset", "--config", "c.json", "--seed", "2", "--out", "from-flag"]);
    assert!(!t.path().join("from-file").exists());
    assert_eq!(json(t.path().join("from-flag/manifest.json"))["seed"], 2);
}

#[test]
fn uci_gap_writes_train_and_gap_files() {
    let t = TempDir::new().unwrap();
    let mut src = String::from("a,b,c\n");
    for i in 0..30 {
        src.push_str(&format!("{},{},{}\n", i, (i * 7) % 11, i as f64 * 0.5));
    }
    std::fs::write(t.path().join("src.csv"), src).unwrap();
    ok(t.path(), &["dataset", "--gen", "uci-gap", "--in", "src.csv", "--header", "--feature", "0", "--seed", "0", "--out", "u"]);
    let train = csv_rows(t.path().join("u/train.csv"));
    let gap = csv_rows(t.path().join("u/gap.csv"));
    assert_eq!(train.len() - 1 + gap.len() - 1, 30);
    assert!(gap.len() > 1 && train.len() > 1);
    assert_eq!(train[0], ["x0", "x1", "y"]);

    let (c, err) = code(t.path(), &["dataset", "--gen", "uci-gap", "--in", "src.csv", "--header", "--feature", "9"]);
    assert_eq!(c, 2, "{err}");
    let (c, _) = code(t.path(), &["dataset", "--gen", "uci-gap", "--feature", "0"]);
    assert_eq!(c, 2);
}

#[test]
fn train_writes_d_plus_three_columns_and_reloads_identically() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["dataset", "--gen", "radial-shell", "--dim", "2", "--n", "40", "--seed", "1", "--out", "d"]);
    let model = quick_model(t.path(), "nlm-map", 2);
    ok(t.path(), &["train", "--data", "d/dataset.csv", "--model", model.to_str().unwrap(), "--seed", "3", "--out", "t"]);
    let rows = csv_rows(t.path().join("t/predictions.csv"));
    assert_eq!(rows[0], ["x0", "x1", "mean", "std_total", "std_epistemic"]);
    assert!(rows.iter().all(|r| r.len() == 2 + 3));
    assert_eq!(rows.len(), 41);

    ok(t.path(), &["predict", "--model-file", "t/model.json", "--data", "d/dataset.csv", "--out", "p"]);
    assert_eq!(read(t.path().join("t/predictions.csv")), read(t.path().join("p/predictions.csv")));

    let file = json(t.path().join("t/model.json"));
    assert_eq!(file["format"], "unalab-model");
    assert_eq!(file["version"], 1);
}

#[test]
fn train_from_a_template_kind() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["dataset", "--gen", "squiggle", "--n", "30", "--seed", "1", "--out", "d"]);
    ok(t.path(), &["train", "--data", "d/dataset.csv", "--kind", "gp", "--out", "g"]);
    assert_eq!(json(t.path().join("g/manifest.json"))["config"]["model"]["kind"], "gp");
    let (c, err) = code(t.path(), &["train", "--data", "d/dataset.csv", "--kind", "gpx"]);
    assert_eq!(c, 2, "{err}");
}

#[test]
fn missing_noise_variance_is_a_config_error() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["dataset", "--gen", "cubic-gap", "--seed", "1", "--out", "d"]);
    let cases = [
        ("nlm-map", "", "noise_var"),
        ("luna", "", "noise_var"),
        ("tuna", "", "noise_var"),
        ("gp", "", "noise_var"),
        ("ensemble-anchored", "", "noise_var"),
        ("mcd", "", "noise_var"),
        ("sngp", "", "noise_var"),
        ("bnn-hmc", "/hmc", "noise_sd"),
    ];
    for (kind, parent, key) in cases {
        let path = quick_model(t.path(), kind, 1);
        let mut spec = json(&path);
        spec.pointer_mut(parent).unwrap().as_object_mut().unwrap().remove(key).expect(key);
        std::fs::write(&path, serde_json::to_vec(&spec).unwrap()).unwrap();
        let (c, err) = code(t.path(), &["train", "--data", "d/dataset.csv", "--model", path.to_str().unwrap()]);
        assert_eq!(c, 2, "{kind}: {err}");
        assert!(err.contains(key), "{kind}: {err}");
    }
}

#[test]
fn model_dimension_must_match_the_data() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["dataset", "--gen", "cubic-gap", "--seed", "1", "--out", "d"]);
    let model = quick_model(t.path(), "nlm-map", 3);
    let (c, err) = code(t.path(), &["train", "--data", "d/dataset.csv", "--model", model.to_str().unwrap()]);
    assert_eq!(c, 2);
    assert!(err.contains("input_dim"), "{err}");
}

#[test]
fn model_files_with_another_version_are_refused() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["dataset", "--gen", "cubic-gap", "--seed", "1", "--out", "d"]);
    let model = quick_model(t.path(), "nlm-map", 1);
    ok(t.path(), &["train", "--data", "d/dataset.csv", "--model", model.to_str().unwrap(), "--out", "t"]);
    let mut file = json(t.path().join("t/model.json"));
    file["version"] = 2.into();
    std::fs::write(t.path().join("v2.json"), serde_json::to_vec(&file).unwrap()).unwrap();
    let (c, err) = code(t.path(), &["predict", "--model-file", "v2.json", "--data", "d/dataset.csv"]);
    assert_eq!(c, 2);
    assert!(err.contains("version"), "{err}");
}

#[test]
fn rub_outputs_one_row_per_radius_and_a_three_path_svg() {
    let t = TempDir::new().unwrap();
    let model = quick_model(t.path(), "gp", 1);
    for out in ["a", "b"] {
        ok(t.path(), &["rub", "--model", model.to_str().unwrap(), "--dim", "1", "--steps", "25", "--seed", "4", "--out", out]);
    }
    let rows = csv_rows(t.path().join("a/rub.csv"));
    assert_eq!(rows.len() - 1, 25);
    for f in ["rub.csv", "rub.json", "rub.svg", "shell.csv"] {
        assert_eq!(read(t.path().join("a").join(f)), read(t.path().join("b").join(f)), "{f}");
    }
    let svg = String::from_utf8(read(t.path().join("a/rub.svg"))).unwrap();
    assert!(svg.starts_with("<?xml"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<path").count(), 3);
    assert_eq!(json(t.path().join("a/rub.json"))["score"]["ideal"], 0.5);

    let (c, _) = code(t.path(), &["rub", "--model", model.to_str().unwrap(), "--dim", "0"]);
    assert_eq!(c, 2);
}

#[test]
fn bayesopt_summary_matches_restarts_and_ignores_jobs() {
    let t = TempDir::new().unwrap();
    let model = quick_model(t.path(), "gp", 2);
    let m = model.to_str().unwrap();
    let args = |jobs: &'static str, out: &'static str, restarts: &'static str| {
        vec!["--jobs", jobs, "bayesopt", "--model", m, "--objective", "branin", "--steps", "4", "--candidates", "200", "--restarts", restarts, "--seed", "9", "--out", out]
    };
    ok(t.path(), &args("1", "j1", "3"));
    ok(t.path(), &args("3", "j3", "3"));
    for f in ["restart_000.csv", "restart_001.csv", "restart_002.csv", "summary.json"] {
        assert_eq!(read(t.path().join("j1").join(f)), read(t.path().join("j3").join(f)), "{f}");
    }
    let s = json(t.path().join("j1/summary.json"));
    let finals: Vec<f64> = s["final_errors"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    assert!((s["mean_final_error"].as_f64().unwrap() - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    assert_eq!(s["restarts"], 3);
    assert_eq!(s["surrogate"], "gp");
    assert_eq!(s["objective"], "branin");

    ok(t.path(), &args("2", "one", "1"));
    assert_eq!(json(t.path().join("one/summary.json"))["std_final_error"], 0.0);

    let (c, err) = code(t.path(), &["bayesopt", "--model", m, "--objective", "rosenbrock"]);
    assert_eq!(c, 2);
    assert!(err.contains("--objective"), "{err}");
}

fn prediction_file(path: &Path, epistemic: &[f64]) {
    let mut s = String::from("x0,mean,std_total,std_epistemic\n");
    for (i, e) in epistemic.iter().enumerate() {
        s.push_str(&format!("{i},0,{},{e}\n", e + 1.0));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn report_ratios_and_detection() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    prediction_file(&p.join("base.csv"), &[0.1, 0.2, 0.3]);
    prediction_file(&p.join("double.csv"), &[0.2, 0.4, 0.6]);

    ok(p, &["report", "--gap", "base.csv", "--not-gap", "base.csv", "--out", "same"]);
    let s = json(p.join("same/summary.json"));
    assert_eq!(s["rows"][0]["ratio_pct"], 0.0);
    assert_eq!(s["detection"]["detected"], false);

    ok(p, &["report", "--gap", "double.csv", "--not-gap", "base.csv", "--out", "twice"]);
    let s = json(p.join("twice/summary.json"));
    assert!((s["rows"][0]["ratio_pct"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    let table = csv_rows(p.join("twice/report.csv"));
    assert_eq!(table.len(), 2);

    // Two runs at 100% and 0%: mean 50, population std 50, so mean − std = 0 is not a detection.
    ok(p, &["report", "--gap", "double.csv", "--not-gap", "base.csv", "--gap", "base.csv", "--not-gap", "base.csv", "--out", "mixed"]);
    let s = json(p.join("mixed/summary.json"));
    assert!((s["detection"]["mean"].as_f64().unwrap() - 50.0).abs() < 1e-9);
    assert!((s["detection"]["std"].as_f64().unwrap() - 50.0).abs() < 1e-9);
    assert_eq!(s["detection"]["detected"], false);

    // 100% twice: std 0, detected.
    ok(p, &["report", "--gap", "double.csv", "--not-gap", "base.csv", "--gap", "double.csv", "--not-gap", "base.csv", "--out", "both"]);
    assert_eq!(json(p.join("both/summary.json"))["detection"]["detected"], true);
}

#[test]
fn report_rejects_mismatched_schemas() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    prediction_file(&p.join("one.csv"), &[0.1, 0.2]);
    std::fs::write(p.join("two.csv"), "x0,x1,mean,std_total,std_epistemic\n0,0,0,1,0.5\n").unwrap();
    std::fs::write(p.join("bad.csv"), "x0,mu,sd\n0,0,1\n").unwrap();
    let (c, err) = code(p, &["report", "--gap", "one.csv", "--not-gap", "two.csv"]);
    assert_eq!(c, 2, "{err}");
    let (c, err) = code(p, &["report", "--gap", "one.csv", "--not-gap", "bad.csv"]);
    assert_eq!(c, 2, "{err}");
    let (c, _) = code(p, &["report", "--gap", "one.csv"]);
    assert_eq!(c, 2);
}

#[test]
fn report_metrics_from_datasets() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    prediction_file(&p.join("pred.csv"), &[0.1, 0.2]);
    std::fs::write(p.join("data.csv"), "x0,y\n0,1\n1,-1\n").unwrap();
    ok(p, &["report", "--gap", "pred.csv", "--not-gap", "pred.csv", "--gap-data", "data.csv", "--not-gap-data", "data.csv", "--out", "r"]);
    let s = json(p.join("r/summary.json"));
    assert!((s["rows"][0]["gap"]["rmse"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    ok(p, &["dataset", "--gen", "squiggle", "--seed", "5", "--out", "d"]);
    ok(p, &["replay", "d/manifest.json", "--out", "again"]);
    assert_eq!(read(p.join("d/dataset.csv")), read(p.join("again/dataset.csv")));

    let mut m = json(p.join("d/manifest.json"));
    m["outputs"]["dataset.csv"] = "00".into();
    std::fs::write(p.join("tampered.json"), serde_json::to_vec(&m).unwrap()).unwrap();
    let (c, err) = code(p, &["replay", "tampered.json", "--out", "t"]);
    assert_eq!(c, 1, "{err}");
    assert!(err.contains("dataset.csv"), "{err}");

    let (c, _) = code(p, &["replay", "missing.json"]);
    assert_eq!(c, 2);
}

#[test]
fn usage_errors_exit_two() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(t.path(), &["frobnicate"]).0, 2);
    assert_eq!(code(t.path(), &["dataset", "--seed", "x"]).0, 2);
    assert_eq!(code(t.path(), &["--jobs", "0", "dataset", "--gen", "cubic-gap"]).0, 2);
}

#[test]
fn templates_round_trip_for_every_kind() {
    let t = TempDir::new().unwrap();
    for kind in [
        "nlm-map",
        "nlm-mle",
        "nlm-marginal",
        "luna",
        "tuna",
        "gp",
        "ensemble",
        "ensemble-boot",
        "ensemble-anchored",
        "mcd",
        "sngp",
        "bnn-hmc",
    ] {
        let out = ok(t.path(), &["template", "--kind", kind, "--dim", "2"]);
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["kind"], kind);
    }
}
