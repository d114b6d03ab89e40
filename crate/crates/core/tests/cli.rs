#![cfg(feature = "cli")]

use std::f64::consts::FRAC_1_SQRT_2;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn scatterlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scatterlab")).args(args).output().unwrap()
}

fn laplace2() -> Value {
    json!({"kind": "product", "marginals": [
        {"kind": "laplace", "scale": FRAC_1_SQRT_2},
        {"kind": "laplace", "scale": FRAC_1_SQRT_2}
    ]})
}

fn small_config() -> Value {
    json!({"experiments": [
        {"id": "cov-eq", "check": "affine_equivariance", "functional": {"family": "cov"},
         "distribution": laplace2(), "n": 500, "replicates": 2, "seed": 1, "threshold": 1e-10, "expect": "pass"},
        {"id": "tyler-eq", "check": "affine_equivariance", "functional": {"family": "tyler_shape"},
         "distribution": laplace2(), "n": 500, "replicates": 2, "seed": 2, "threshold": 1e-8, "expect": "fail"},
        {"id": "cov-continuity", "check": "normal_continuity", "functional": {"family": "cov"},
         "distribution": laplace2(), "n_grid": [1, 4, 16], "n": 2000, "replicates": 1, "seed": 3,
         "threshold": 0.1, "expect": "pass"}
    ]})
}

fn run_config(dir: &Path, config: &Value) -> (Output, std::path::PathBuf) {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    let out = dir.join("out");
    let o = scatterlab(&["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    (o, out)
}

fn without_ms(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn run_writes_deterministic_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (oa, out_a) = run_config(a.path(), &small_config());
    let (ob, out_b) = run_config(b.path(), &small_config());
    assert_eq!(oa.status.code(), Some(0), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(ob.status.code(), Some(0));
    let csv_a = fs::read_to_string(out_a.join("results.csv")).unwrap();
    let csv_b = fs::read_to_string(out_b.join("results.csv")).unwrap();
    assert_eq!(csv_a.lines().next().unwrap(), "id,property,family,statistic,threshold,pass,expected,n,replicates,seed,ms");
    assert_eq!(csv_a.lines().count(), 4);
    assert_eq!(without_ms(&csv_a), without_ms(&csv_b));
    assert!(out_a.join("results.json").is_file());
    for id in ["cov-eq", "tyler-eq", "cov-continuity"] {
        assert!(out_a.join("details").join(format!("{id}.json")).is_file(), "{id}");
    }
}

#[test]
fn config_errors_exit_2_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut dup = small_config();
    let first = dup["experiments"][0].clone();
    dup["experiments"].as_array_mut().unwrap().push(first);
    let (o, out) = run_config(dir.path(), &dup);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("results.csv").exists());

    let mut unknown = small_config();
    unknown["experiments"][0]["replicate"] = json!(3);
    assert_eq!(run_config(dir.path(), &unknown).0.status.code(), Some(2));

    let missing = scatterlab(&["run", "--config", "/nonexistent/config.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(scatterlab(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn mismatch_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = json!({"experiments": [
        {"id": "cov-additivity", "check": "additivity", "functional": {"family": "cov"},
         "distribution": laplace2(),
         "secondary": {"kind": "product", "marginals": [{"kind": "laplace", "scale": 1.0}, {"kind": "laplace", "scale": 1.0}]},
         "n": 2000, "replicates": 2, "seed": 4, "threshold": 0.08, "expect": "fail"}
    ]});
    let (o, out) = run_config(dir.path(), &config);
    assert_eq!(o.status.code(), Some(1));
    let report = scatterlab(&["report", "--dir", out.to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&report.stdout).contains("MISMATCH"));
}

#[test]
fn estimator_failure_exits_3_unless_expected() {
    let dir = tempfile::tempdir().unwrap();
    let flipped = json!({"kind": "affine", "A": [[1.0], [-1.0]], "b": [0.0, 0.0],
        "inner": {"kind": "product", "marginals": [{"kind": "standard_normal"}]}});
    let mut config = json!({"experiments": [
        {"id": "anticorrelated-sum", "check": "sum_expansion", "functional": {"family": "cov"},
         "distribution": flipped, "p_total": 3, "n": 500, "replicates": 1, "seed": 5, "threshold": 0.1, "expect": "pass"}
    ]});
    let (o, _) = run_config(dir.path(), &config);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    config["experiments"][0]["expect"] = json!("fail");
    config["experiments"][0]["expect_error"] = json!("SingularScatter");
    let (o, _) = run_config(dir.path(), &config);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn report_renders_table_and_convergence_curves() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_config(dir.path(), &small_config());
    assert_eq!(o.status.code(), Some(0));
    let report = scatterlab(&["report", "--dir", out.to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(0));
    let table = String::from_utf8_lossy(&report.stdout);
    assert_eq!(table.matches("as-expected").count(), 3, "{table}");
    let curves: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("convergence_"))
        .collect();
    assert_eq!(curves, vec!["convergence_cov-continuity.csv"]);
    let curve = fs::read_to_string(out.join("convergence_cov-continuity.csv")).unwrap();
    assert_eq!(curve.lines().next().unwrap(), "n,error,seed");
    assert_eq!(curve.lines().count(), 4);

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(scatterlab(&["report", "--dir", empty.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn calibrate_cov4() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"family": "cov4"}"#).unwrap();
    let written = dir.path().join("calibrated.json");
    let o = scatterlab(&[
        "calibrate", "--spec", spec.to_str().unwrap(), "--p", "3", "--n", "20000", "--replicates", "3", "--seed", "9",
        "--write", written.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let constant: f64 = stdout.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((constant - 5.0).abs() <= 0.1, "{stdout}");
    let updated: Value = serde_json::from_str(&fs::read_to_string(written).unwrap()).unwrap();
    assert_eq!(updated["family"], "cov4");
}
