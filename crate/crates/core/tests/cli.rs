use std::path::{Path, PathBuf};

use entropic_hedge::cli::run_with;
use entropic_hedge::fixtures::{additive_binomial, one_period};
use entropic_hedge::market::MarketDocument;
use serde_json::Value;

fn write_doc(dir: &Path, name: &str, doc: &MarketDocument) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string(doc).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["entropic-hedge"];
    argv.extend_from_slice(args);
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn check_reports_positive_slack() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_doc(dir.path(), "bin.json", &additive_binomial(2, 3.0, 1.0, &[vec![0.5, 0.5]], 0.0));
    let (code, out, _) = run(&["check", "--input", p.to_str().unwrap()]);
    assert_eq!(code, 0);
    let v = json(&out);
    assert!(v["result"]["epsilon"].as_f64().unwrap() > 0.0);
    assert_eq!(v["spec_hash"].as_str().unwrap().len(), 64);
    assert!(v["config"]["solver"]["barrier_gap"].is_number());
}

#[test]
fn value_on_constant_price() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_doc(dir.path(), "flat.json", &additive_binomial(2, 1.0, 0.0, &[vec![0.5, 0.5]], 0.0));
    let (code, out, err) = run(&["value", "--input", p.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let v = json(&out);
    assert!(v["result"]["log_value"].as_f64().unwrap().abs() < 1e-9);
    assert!((v["result"]["utility"].as_f64().unwrap() + 1.0).abs() < 1e-9);
}

#[test]
fn dual_gap_on_skewed_binomial() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_doc(dir.path(), "skew.json", &additive_binomial(2, 3.0, 1.0, &[vec![0.75, 0.25]], 0.0));
    let dump = dir.path().join("dual.json");
    let (code, out, err) = run(&["dual", "--input", p.to_str().unwrap(), "--dump-dual", dump.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let v = json(&out);
    assert!(v["result"]["gap"].as_f64().unwrap().abs() <= 1e-4);
    assert!((v["result"]["primal_log_value"].as_f64().unwrap() + 0.28768207245178).abs() < 1e-7);
    assert!(json(&std::fs::read_to_string(dump).unwrap())["cps"]["z"].is_array());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let arb = write_doc(
        dir.path(),
        "arb.json",
        &one_period((1.0, 0.98, 1.02), (1.2, 1.1, 1.3), (1.1, 1.05, 1.15), &[vec![0.5, 0.5]], 1.2),
    );
    let (code, out, err) = run(&["check", "--input", arb.to_str().unwrap()]);
    assert_eq!(code, 4);
    assert!(json(&out)["result"]["witness"]["node"] == "root");
    assert!(err.contains("\"kind\":\"arbitrage\""));
    assert_eq!(run(&["value", "--input", arb.to_str().unwrap()]).0, 4);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"horizon": 1, "bogus": true}"#).unwrap();
    let (code, _, err) = run(&["check", "--input", bad.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("\"exit_code\":2"));
    assert_eq!(run(&["check"]).0, 2);
    assert_eq!(run(&["frobnicate"]).0, 2);
    let ok = write_doc(dir.path(), "ok.json", &additive_binomial(1, 3.0, 1.0, &[vec![0.5, 0.5]], 0.0));
    assert_eq!(run(&["value", "--input", ok.to_str().unwrap(), "--format", "csv"]).0, 2);
    assert_eq!(run(&["value", "--input", ok.to_str().unwrap(), "--grid-m", "1"]).0, 2);
}

#[test]
fn reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = additive_binomial(2, 1.0, 0.1, &[vec![0.6, 0.4], vec![0.4, 0.6]], 0.02);
    for (id, s) in [("nuu", 1.2), ("nud", 1.0), ("ndu", 1.0), ("ndd", 0.8)] {
        doc.endowment.insert(id.into(), vec![0.0, (s - 1.0f64).max(0.0)]);
    }
    let p = write_doc(dir.path(), "m.json", &doc);
    for cmd in ["value", "dual", "superhedge"] {
        let a = run(&[cmd, "--input", p.to_str().unwrap()]);
        let b = run(&[cmd, "--input", p.to_str().unwrap()]);
        assert_eq!(a.0, 0, "{cmd}: {}", a.2);
        assert_eq!(a.1, b.1, "{cmd}");
    }
    let (code, csv, err) = run(&["sweep", "--input", p.to_str().unwrap(), "--format", "csv", "--gamma", "1,2,4"]);
    assert_eq!(code, 0, "{err}");
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "gamma,pi_gamma,superhedge,gap,shortfall_bound,shortfall_measured");
    assert_eq!(lines.count(), 3);
    let out = dir.path().join("indiff.csv");
    let (code, stdout, _) = run(&[
        "indiff",
        "--input",
        p.to_str().unwrap(),
        "--format",
        "csv",
        "--gamma",
        "0.5,3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.is_empty());
    assert_eq!(std::fs::read_to_string(out).unwrap().lines().count(), 3);
}
