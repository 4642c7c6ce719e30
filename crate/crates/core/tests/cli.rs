//! End-to-end runs of the `nnorder` binary.

use std::path::Path;
use std::process::{Command, Output};

use nnorder::dataset::training_from_csv;
use nnorder::sampling::Label;

fn nnorder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nnorder"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_classify_select_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = nnorder(&["--preset", "table1-desk", "--out", path(dir.path()), "simulate", "--row", "2", "--stream", "5"]);
    stdout(&out);
    let file = dir.path().join("training-row2-stream5.csv");
    let set = training_from_csv(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(set.dim(), 2);
    assert_eq!(set.stream(), 5);

    let text = stdout(&nnorder(&[
        "classify", "--training", path(&file), "--k", "15", "--at", "0.5,-0.5", "--at", "-0.5,0.5",
    ]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# nnorder-classify v1");
    assert_eq!(lines[1], "point,z1,z2,k,label");
    assert_eq!(lines.len(), 4);
    for line in &lines[2..] {
        let label = line.rsplit(',').next().unwrap();
        assert!(label.parse::<Label>().is_ok(), "{line}");
    }

    let sel = nnorder(&["select-k", "--training", path(&file), "--b", "10", "--r", "0.5"]);
    let text = stdout(&sel);
    assert!(String::from_utf8_lossy(&sel.stderr).contains("k_hat = "));
    assert!(text.starts_with("# nnorder-select-k v1\nk,bootstrap_err,k_hat,k_tilde,r,b,master_seed,stream\n"));
}

#[test]
fn simulate_is_reproducible() {
    let a = stdout(&nnorder(&["simulate", "--row", "0", "--stream", "3"]));
    let b = stdout(&nnorder(&["simulate", "--row", "0", "--stream", "3"]));
    let c = stdout(&nnorder(&["simulate", "--row", "0", "--stream", "4"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn bayes_json_lists_every_row() {
    let text = stdout(&nnorder(&["--format", "json", "bayes"]));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["format"], "nnorder-bayes");
    assert_eq!(v["version"], 1);
    let records = v["records"].as_array().unwrap();
    assert_eq!(records.len(), 6);
    for r in records {
        let b = r["bayes"].as_f64().unwrap();
        assert!(b > 0.1 && b < 0.5, "{r}");
    }
}

#[test]
fn theory_writes_summary_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&nnorder(&["--out", path(dir.path()), "theory", "--row", "1", "--k-max", "40"]));
    let summary = std::fs::read_to_string(dir.path().join("theory.csv")).unwrap();
    assert!(summary.starts_with("# nnorder-theory v1\n"));
    let curve = std::fs::read_to_string(dir.path().join("regret_curve.csv")).unwrap();
    // tag, header, k = 1..=40
    assert_eq!(curve.lines().count(), 42);
}

#[test]
fn symmetric_row_reports_missing_kopt() {
    let text = stdout(&nnorder(&["--format", "json", "theory", "--row", "0", "--k-max", "5"]));
    // two tables are printed back to back; the summary comes first
    let first = text.split("\n}\n").next().unwrap().to_string() + "\n}";
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert!(v["records"][0]["k_opt"].is_null(), "{v}");
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "name = \"bad\"\nseed = 1\nn_training_sets = 4\n[[rows]]\nmu = 0\nnu = 10\nf = { mean = [0.0], covariance = [1.0] }\ng = { mean = [1.0], covariance = [1.0] }\n",
    )
    .unwrap();
    let out = nnorder(&["--config", path(&cfg), "bayes"]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("mu"), "{v}");

    let out = nnorder(&["--preset", "nope", "bayes"]);
    assert_eq!(out.status.code(), Some(1));

    let out = nnorder(&["classify", "--training", "/nonexistent.csv", "--k", "1", "--at", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_and_preset_conflict() {
    let out = nnorder(&["--config", "x.toml", "--preset", "table1-desk", "bayes"]);
    assert!(!out.status.success());
}
