use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FIGURE_TREE: &str = "((1:1,2:1):1,(3:1,4:1):1);";

fn bmtm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmtm")).args(args).env_remove("BMTM_THREADS").output().unwrap()
}

fn tree_file(dir: &Path) -> String {
    let p = dir.join("t.nwk");
    fs::write(&p, FIGURE_TREE).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn mle_on_figure_example() {
    let dir = tempfile::tempdir().unwrap();
    let t = tree_file(dir.path());
    let out = bmtm(&["mle", "--tree", &t, "--data-inline", "-5,-2,4,8"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!((v["objective_log"].as_f64().unwrap() - 96f64.ln()).abs() < 1e-12);
    assert_eq!(v["tie_count"], 1);
}

#[test]
fn data_file_formats_agree() {
    let dir = tempfile::tempdir().unwrap();
    let t = tree_file(dir.path());
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.json");
    fs::write(&a, "-5 -2\n4\t8\n").unwrap();
    fs::write(&b, "[-5, -2, 4, 8]").unwrap();
    let inline = bmtm(&["mle", "--tree", &t, "--data-inline", "-5,-2,4,8"]).stdout;
    assert_eq!(bmtm(&["mle", "--tree", &t, "--data", a.to_str().unwrap()]).stdout, inline);
    assert_eq!(bmtm(&["mle", "--tree", &t, "--data", b.to_str().unwrap()]).stdout, inline);
}

#[test]
fn ddm_mle_reports_precision() {
    let out = bmtm(&["ddm-mle", "--data-inline", "3,1,2"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["kkt_passed"], true);
    // sorted path 0 - x2 - x3 - x1 with unit gaps
    let k: Vec<Vec<f64>> = serde_json::from_value(v["k_hat"].clone()).unwrap();
    let expect = [[1.0, 0.0, -1.0], [0.0, 2.0, -1.0], [-1.0, -1.0, 2.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((k[i][j] - expect[i][j]).abs() < 1e-12, "{k:?}");
        }
    }
}

#[test]
fn domain_error_exits_one_with_json() {
    let out = bmtm(&["ddm-mle", "--data-inline", "1,2,2"]);
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8(out.stderr).unwrap();
    let v: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["error"], "DuplicateValue");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let t = tree_file(dir.path());
    assert_eq!(bmtm(&["mle", "--tree", &t, "--data-inline", "1,2,3,4", "--data", "x"]).status.code(), Some(2));
    assert_eq!(bmtm(&["mle", "--tree", &t]).status.code(), Some(2));
    assert_eq!(bmtm(&["estimate", "--method", "ls", "--data-inline", "1,2"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_bmtm")).args(["verify"]).env("BMTM_THREADS", "0").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(bmtm(&["--help"]).status.code(), Some(0));
}

#[test]
fn verify_suites_pass() {
    for suite in ["oracle", "kkt", "curvature", "roundtrip", "matrix-tree"] {
        let out = bmtm(&["verify", "--suite", suite, "--instances", "20", "--seed", "7"]);
        assert_eq!(out.status.code(), Some(0), "{suite}: {}", String::from_utf8_lossy(&out.stderr));
        let v = json(&out);
        assert_eq!(v[0]["passed"], v[0]["instances"]);
    }
}

#[test]
fn outputs_are_byte_identical_and_atomic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |p: &Path| {
        ["simulate", "--d", "3,4", "--trials", "6", "--inner", "3", "--beta-reps", "4", "--seed", "5", "--out", p.to_str().unwrap()]
            .map(String::from)
    };
    assert!(bmtm(&args(&a).each_ref().map(|s| s.as_str())).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_bmtm")).args(args(&b)).env("BMTM_THREADS", "1").output().unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let bad = dir.path().join("bad.json");
    assert_eq!(bmtm(&["ddm-mle", "--data-inline", "1,1", "--out", bad.to_str().unwrap()]).status.code(), Some(1));
    assert!(!bad.exists());
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 2, "{names:?}");
}

#[test]
fn contrast_and_witness() {
    let dir = tempfile::tempdir().unwrap();
    let t = tree_file(dir.path());
    let out = bmtm(&["contrast-mle", "--tree", &t, "--data-inline", "1,2,5,3", "--ref", "2"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["y"], serde_json::json!([-1.0, 3.0, 1.0]));

    let out = bmtm(&["plgtm-witness", "--data-inline", "1,1,3", "--epsilons", "1e-2,1e-4"]);
    let v = json(&out);
    let l0 = v[0]["loglik"].as_f64().unwrap();
    let l1 = v[1]["loglik"].as_f64().unwrap();
    assert!((l1 - l0 - 0.5 * 100f64.ln()).abs() < 1e-9);
    assert_eq!(bmtm(&["plgtm-witness", "--data-inline", "1,2,3"]).status.code(), Some(1));
}

#[test]
fn estimators_emit_valid_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let t = tree_file(dir.path());
    for m in ["upgma", "nj", "ls", "ots", "mxshrink"] {
        let out = bmtm(&["estimate", "--method", m, "--tree", &t, "--data-inline", "1,-2,5,3"]);
        assert_eq!(out.status.code(), Some(0), "{m}");
        let cov: Vec<Vec<f64>> = serde_json::from_value(json(&out)["covariance"].clone()).unwrap();
        assert_eq!(cov.len(), 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(cov[i][j], cov[j][i]);
            }
        }
    }
}
