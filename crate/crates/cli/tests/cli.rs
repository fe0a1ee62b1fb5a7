use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn sfp(args: &[&str], dir: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sfp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{"dataset": {"synthetic": {"n": 1200}}, "bootstrap": 10,
            "influence": {"n_list": [300, 1200], "replications": 100}}"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for out in ["a", "b"] {
        let (code, _, err) = sfp(&["simulate", "--config", &cfg, "--seed", "5", "--out", out], dir.path());
        assert_eq!(code, 0, "{err}");
    }
    let a = std::fs::read(dir.path().join("a/data.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/data.csv")).unwrap();
    assert_eq!(a, b);
    let header = String::from_utf8_lossy(&a).lines().next().unwrap().to_string();
    assert_eq!(header.split(',').count(), 10 + 5 + 1);
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 1201);
    let report = read_json(&dir.path().join("a/simulate.json"));
    assert_eq!(report["rows"], 1200);
    assert_eq!(report["provenance"]["seed"], 5);
    assert!(report["provenance"]["config_digest"].as_str().unwrap().len() == 64);

    let (code, _, _) = sfp(&["simulate", "--config", &cfg, "--seed", "6", "--out", "c"], dir.path());
    assert_eq!(code, 0);
    assert_ne!(a, std::fs::read(dir.path().join("c/data.csv")).unwrap());
}

#[test]
fn sweep_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (code, stdout, err) = sfp(&["sweep", "--config", &cfg, "--m-step", "2", "--out", "o"], dir.path());
    assert!(code == 0 || code == 2, "{err}");
    assert!(stdout.contains("selected m"));
    let report = read_json(&dir.path().join("o/sweep.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["provenance"]["config"]["m_step"], 2);
    let s = report["family"]["diagnostics"]["shared_rank"].as_u64().unwrap() as usize;
    let ms: Vec<u64> = report["points"].as_array().unwrap().iter().map(|p| p["m"].as_u64().unwrap()).collect();
    let mut expect: Vec<u64> = (0..=s as u64).step_by(2).collect();
    if *expect.last().unwrap() != s as u64 {
        expect.push(s as u64);
    }
    assert_eq!(ms, expect);
    assert_eq!(code == 2, report["fallback_used"].as_bool().unwrap());

    let tsv = std::fs::read_to_string(dir.path().join("o/tradeoff.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next().unwrap(), "m\tutility\tdp\ttpr\tmcdp\tdcov2\tparam_distance\twd");
    assert_eq!(tsv.lines().filter(|l| !l.starts_with('#')).count(), ms.len() + 1);

    let (c1, _, err) = sfp(&["eval", "--out", "o"], dir.path());
    assert_eq!(c1, code, "{err}");
    let first = std::fs::read(dir.path().join("o/eval.json")).unwrap();
    let (c2, _, _) = sfp(&["eval", "--out", "o"], dir.path());
    assert_eq!(c2, code);
    assert_eq!(first, std::fs::read(dir.path().join("o/eval.json")).unwrap());

    let mut broken = report.clone();
    broken["selected_m"] = Value::Null;
    std::fs::write(dir.path().join("broken.json"), serde_json::to_string(&broken).unwrap()).unwrap();
    let (code, _, err) = sfp(&["eval", "--report", "broken.json", "--out", "o"], dir.path());
    assert_eq!(code, 1);
    assert!(err.contains("selected_m"));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (code, _, err) = sfp(
        &["sweep", "--config", &cfg, "--tau", "0.5", "--metric", "dp", "--seed", "9", "--threads", "1", "--out", "o"],
        dir.path(),
    );
    assert!(code == 0 || code == 2, "{err}");
    let report = read_json(&dir.path().join("o/sweep.json"));
    assert_eq!(report["rule"]["tau"], 0.5);
    assert_eq!(report["rule"]["metric"], "dp");
    assert_eq!(report["provenance"]["seed"], 9);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"seed": 1, "bogus": true}"#).unwrap();
    let (code, _, err) = sfp(&["sweep", "--config", "bad.json"], dir.path());
    assert_eq!(code, 1);
    assert!(err.contains("bogus"));
    assert_eq!(sfp(&["sweep", "--metric", "nope"], dir.path()).0, 1);
    assert_eq!(sfp(&["sweep", "--tau", "1.5"], dir.path()).0, 1);
    assert_eq!(sfp(&["frobnicate"], dir.path()).0, 1);
    assert_eq!(sfp(&["eval", "--report", "missing.json"], dir.path()).0, 1);
    std::fs::write(dir.path().join("bank.json"), r#"{"dataset": {"bank": {"path": "none.csv"}}}"#).unwrap();
    assert_eq!(sfp(&["simulate", "--config", "bank.json"], dir.path()).0, 1);
}

#[test]
fn classification_csv_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,b,c,colour,g,label\n");
    let mut state = 12345u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..600 {
        let (a, b, c) = (next() * 2.0 - 1.0, next() * 2.0 - 1.0, next() * 2.0 - 1.0);
        let g = if a + 0.5 * next() > 0.2 { "f" } else { "m" };
        let colour = ["red", "blue", "green"][(next() * 3.0) as usize % 3];
        let label = if a + b + 0.3 * next() > 0.1 { "yes" } else { "no" };
        text.push_str(&format!("{a},{b},{c},{colour},{g},{label}\n"));
    }
    std::fs::write(dir.path().join("toy.csv"), text).unwrap();
    std::fs::write(
        dir.path().join("toy.json"),
        r#"{"dataset": {"csv": {"paths": ["toy.csv"], "target": "label", "positive": ["yes"],
            "sensitive": "g", "sensitive_rule": {"level": "f"}, "categorical": ["colour"]}},
            "bootstrap": 10}"#,
    )
    .unwrap();
    let (code, _, err) = sfp(&["sweep", "--config", "toy.json", "--out", "o"], dir.path());
    assert!(code == 0 || code == 2, "{err}");
    let report = read_json(&dir.path().join("o/sweep.json"));
    assert_eq!(report["task"], "classification");
    assert_eq!(report["evaluated_on"], "val");
    assert!(report["baseline"]["dp"].is_number());
    assert!(report["baseline"]["mcdp"].is_number());
    let (code, _, err) = sfp(&["eval", "--out", "o"], dir.path());
    assert!(code == 0 || code == 2, "{err}");
    let eval = read_json(&dir.path().join("o/eval.json"));
    assert!(eval["selected"]["utility"].as_f64().unwrap() > 50.0);
}

#[test]
fn influence_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (code, stdout, err) = sfp(&["influence", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("eigenvector IF"));
    let report = read_json(&dir.path().join("o/influence.json"));
    let v = &report["validation"];
    assert!(v["eigvec_max_rel"].as_f64().unwrap() < 1e-3);
    assert!(v["product_rule_max_rel"].as_f64().unwrap() < 1e-3);
    assert_eq!(v["theta_centering"]["violations"], 0);
    assert_eq!(report["n_ref"], 12000);
    assert!(!report["levels"].as_array().unwrap().is_empty());
}
