use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cggm::io::{load_model, read_matrix_csv, read_triplets};
use cggm::modelsel::sample_covariance;
use serde_json::Value;
use tempfile::TempDir;

fn cggm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cggm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cggm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn simulate(dir: &Path, p: usize, n: usize, seed: u64) -> PathBuf {
    let (p, n, seed) = (p.to_string(), n.to_string(), seed.to_string());
    ok(&["simulate", "--design", "chain", "--p", &p, "--n", &n, "--seed", &seed, "--out", path_str(dir)]);
    dir.join("data.csv")
}

#[test]
fn unpenalized_fit_recovers_inverse_covariance() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), 8, 80, 3);
    let out = dir.path().join("fit");
    ok(&["fit", "--data", path_str(&data), "--out", path_str(&out)]);
    let x = read_matrix_csv(&data).unwrap();
    let want = sample_covariance(&x.values).unwrap().try_inverse().unwrap();
    let theta = read_matrix_csv(&out.join("theta.csv")).unwrap();
    assert_eq!(theta.names.as_deref().map(|n| n[0].as_str()), Some("V1"));
    assert!((theta.values - want).norm() < 1e-6);
    let summary = json(out.join("fit.json"));
    assert_eq!(summary["k"], 8);
    assert_eq!(summary["converged"], true);
}

#[test]
fn path_reaches_one_cluster_with_full_dendrogram() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), 8, 80, 4);
    let out = dir.path().join("path");
    ok(&["path", "--data", path_str(&data), "--out", path_str(&out)]);
    let doc = json(out.join("path.json"));
    let ks: Vec<u64> = doc["points"].as_array().unwrap().iter().map(|pt| pt["k"].as_u64().unwrap()).collect();
    assert_eq!(ks[0], 8);
    assert_eq!(*ks.last().unwrap(), 1);
    assert!(ks.windows(2).all(|w| w[1] <= w[0]));

    let tree = json(out.join("dendrogram.json"));
    assert_eq!(tree["leaves"].as_array().unwrap().len(), 8);
    let nodes = tree["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 7);
    let heights: Vec<f64> = nodes.iter().map(|n| n["height"].as_f64().unwrap()).collect();
    assert!(heights.windows(2).all(|w| w[1] >= w[0]));

    let newick = fs::read_to_string(out.join("dendrogram.nwk")).unwrap();
    assert!(newick.trim_end().ends_with(';'));
    for j in 1..=8 {
        assert!(newick.contains(&format!("V{j}")), "{newick}");
    }
    let (model, names) = load_model(&out.join("model.json")).unwrap();
    assert_eq!(model.k(), 1);
    assert_eq!(names.unwrap().len(), 8);
}

#[test]
fn refit_keeps_the_clustering() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), 10, 100, 5);
    let fit_dir = dir.path().join("fit");
    ok(&["fit", "--data", path_str(&data), "--lambda-c", "3", "--lambda-s", "0.05", "--out", path_str(&fit_dir)]);
    let (fitted, _) = load_model(&fit_dir.join("model.json")).unwrap();
    let refit_dir = dir.path().join("refit");
    let model_path = fit_dir.join("model.json");
    ok(&["refit", "--data", path_str(&data), "--model", path_str(&model_path), "--out", path_str(&refit_dir)]);
    let (refitted, names) = load_model(&refit_dir.join("model.json")).unwrap();
    assert_eq!(refitted.assignment, fitted.assignment);
    assert_eq!(names.unwrap()[0], "V1");
}

#[test]
fn evaluate_reports_metrics() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), 9, 90, 6);
    let fit_dir = dir.path().join("fit");
    ok(&["fit", "--data", path_str(&data), "--lambda-c", "2", "--out", path_str(&fit_dir)]);
    let model_path = fit_dir.join("model.json");
    let truth = dir.path().join("truth.json");
    let out = ok(&["evaluate", "--model", path_str(&model_path), "--truth", path_str(&truth), "--out", path_str(dir.path())]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, json(dir.path().join("evaluation.json")));
    assert!(printed["frobenius"].as_f64().unwrap() > 0.0);
    let ari = printed["ari"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&ari));
}

#[test]
fn weights_are_written_as_triplets() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), 6, 60, 7);
    ok(&["weights", "--data", path_str(&data), "--knn", "2", "--out", path_str(dir.path())]);
    let w = read_triplets(&dir.path().join("weights.csv"), 6).unwrap();
    assert!(!w.is_empty());
    assert!(w.iter().all(|(j, k, v)| j < k && v > 0.0));
    let z = read_triplets(&dir.path().join("sparsity.csv"), 6).unwrap();
    assert_eq!(z.len(), 15);
}

#[test]
fn covariance_input_matches_data_input() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), 6, 60, 8);
    let x = read_matrix_csv(&data).unwrap();
    let s = sample_covariance(&x.values).unwrap();
    let cov = dir.path().join("cov.csv");
    cggm::io::save_matrix_csv(&cov, &s, x.names.as_deref()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["fit", "--data", path_str(&data), "--lambda-c", "1", "--out", path_str(&a)]);
    ok(&["fit", "--covariance", path_str(&cov), "--nobs", "60", "--lambda-c", "1", "--out", path_str(&b)]);
    let ta = read_matrix_csv(&a.join("theta.csv")).unwrap().values;
    let tb = read_matrix_csv(&b.join("theta.csv")).unwrap().values;
    assert!((ta - tb).norm() < 1e-10);
}

fn error_of(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

#[test]
fn missing_input_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = cggm(&["fit", "--data", path_str(&missing), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_of(&out);
    assert_eq!(err["error"]["kind"], "input");
    assert_eq!(err["error"]["code"], 2);
}

#[test]
fn malformed_csv_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n3\n").unwrap();
    let out = cggm(&["fit", "--data", path_str(&bad), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["error"]["kind"], "input");
}

#[test]
fn unknown_flag_is_rejected() {
    let out = cggm(&["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn singular_covariance_is_a_numerical_error() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("tiny.csv");
    fs::write(&data, "1,2,3\n2,1,0\n").unwrap();
    let out = cggm(&["fit", "--data", path_str(&data), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_of(&out)["error"]["kind"], "numerical");
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), 7, 70, 9);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["path", "--data", path_str(&data), "--lambda-s", "0.02", "--out", path_str(&out)]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["path.json", "dendrogram.json", "dendrogram.nwk", "weights.csv", "model.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
}
