//! End-to-end tests of the binary: artifacts, exit codes, determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONSISTENT: &str = r#"{
  "market": {
    "mu": {"expr": "0.05 + 0.02*tanh(w)", "bound": 0.08},
    "sigma": 0.2, "r": 0.01
  },
  "risk": {
    "gamma0": 1.0, "eta": 0.0,
    "beta": {"expr": "0.1 + 0.05*tanh(w)", "bound": 0.16}
  },
  "sim": {"x0": 1.0, "T": 1.0, "steps_per_unit": 64, "n_paths": 10000, "seed": 11},
  "checks": {"pairs": [[0.5, 1.0]]}
}"#;

const DRIFTING: &str = r#"{
  "market": {
    "mu": {"expr": "0.05 + 0.02*tanh(w)", "bound": 0.08},
    "sigma": 0.2, "r": 0.01
  },
  "risk": {"gamma0": 1.0, "eta": 0.1, "beta": 0.1},
  "sim": {"x0": 1.0, "T": 1.0, "steps_per_unit": 64, "n_paths": 4000, "seed": 11},
  "checks": {"pairs": [[0.5, 1.0]]}
}"#;

const MARKET: &str = r#"{"p": [0.5, 0.5], "q": [0.75, 0.25]}"#;

fn fpmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpmc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_channels_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write(dir.path(), "scn.json", CONSISTENT);
    let out_dir = dir.path().join("out");
    let out = fpmc(&[
        "simulate",
        "--scenario",
        &scn,
        "--out",
        out_dir.to_str().unwrap(),
        "--paths",
        "500",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");

    let csv = fs::read_to_string(out_dir.join("channels.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("path,step,t,"));
    for ch in ["W", "theta", "logZ", "S", "gamma_inv", "xi_star", "exposure", "alpha"] {
        assert!(header.contains(ch), "missing channel {ch} in {header}");
    }
    // 500 paths x 65 grid points plus the header line.
    assert_eq!(csv.lines().count(), 500 * 65 + 1);

    let summary = json(&out_dir.join("summary.json"));
    assert_eq!(summary["family"], "state_dep_exp");
    assert_eq!(summary["n_paths"], 500);
    let batteries = summary["batteries"].as_array().unwrap();
    assert!(!batteries.is_empty());
    for b in batteries {
        assert!(b["value"].is_number());
        assert!(b["band"].is_number());
        assert!(b.get("wall_time_ms").is_none());
    }
    assert_eq!(summary["manifest"]["paths_override"], 500);

    let manifest = json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["subcommand"], "simulate");
    assert_eq!(manifest["tool"], "fpmc");
}

#[test]
fn check_passes_the_consistent_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write(dir.path(), "scn.json", CONSISTENT);
    let out_dir = dir.path().join("out");
    let out = fpmc(&["check", "--scenario", &scn, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{out:?}");

    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["verdict"], "pass");
    let names: Vec<&str> = report["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        vec!["consistency", "martingale", "forward_performance", "forward_family"]
    );
}

#[test]
fn check_fails_the_drifting_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write(dir.path(), "scn.json", DRIFTING);
    let out_dir = dir.path().join("out");
    let out = fpmc(&["check", "--scenario", &scn, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{out:?}");

    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["verdict"], "fail");
    let martingale = report["reports"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["name"] == "martingale")
        .unwrap();
    assert_eq!(martingale["verdict"], "fail");
}

#[test]
fn check_is_inconclusive_when_under_resolved() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write(dir.path(), "scn.json", CONSISTENT);
    let out_dir = dir.path().join("out");
    let out = fpmc(&[
        "check",
        "--scenario",
        &scn,
        "--out",
        out_dir.to_str().unwrap(),
        "--paths",
        "100",
    ]);
    assert_eq!(code(&out), 5, "{out:?}");
    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["verdict"], "inconclusive");
}

#[test]
fn usage_and_numerical_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write(dir.path(), "scn.json", CONSISTENT);
    let out_dir = dir.path().join("out");
    let out_flag = out_dir.to_str().unwrap();

    // Missing scenario file.
    let missing = dir.path().join("missing.json");
    let out = fpmc(&["check", "--scenario", missing.to_str().unwrap(), "--out", out_flag]);
    assert_eq!(code(&out), 2);

    // Structurally valid scenario with an out-of-domain value.
    let bad = write(dir.path(), "bad.json", r#"{"market": {"mu": 0.05, "sigma": -1.0}}"#);
    let out = fpmc(&["simulate", "--scenario", &bad, "--out", out_flag]);
    assert_eq!(code(&out), 2);

    // Unknown check name.
    let out = fpmc(&["check", "--scenario", &scn, "--out", out_flag, "--checks", "nonsense"]);
    assert_eq!(code(&out), 2);

    // Risk-aversion drift large enough to overflow: numerical abort.
    let blowup = write(
        dir.path(),
        "blowup.json",
        r#"{
          "market": {"mu": 0.05, "sigma": 0.2, "r": 0.01},
          "risk": {"gamma0": 1.0, "eta": 1000000.0, "beta": 0.0},
          "sim": {"x0": 1.0, "T": 1.0, "steps_per_unit": 64, "n_paths": 50, "seed": 1}
        }"#,
    );
    let out = fpmc(&["simulate", "--scenario", &blowup, "--out", out_flag]);
    assert_eq!(code(&out), 3, "{out:?}");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn oracle_prints_the_frozen_solution() {
    let dir = tempfile::tempdir().unwrap();
    let market = write(dir.path(), "market.json", MARKET);
    let out = fpmc(&[
        "oracle", "--scenario", &market, "--utility", "exp", "--gamma", "1.0", "--x0", "0.0",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let xi = doc["xi"].as_array().unwrap();
    assert!((xi[0].as_f64().unwrap() - (-0.27465307216702744)).abs() < 1e-9);
    assert!((xi[1].as_f64().unwrap() - 0.8239592165010822).abs() < 1e-9);
    assert!(doc["budget_residual"].as_f64().unwrap().abs() < 1e-12);
    assert!(doc["brute_force_delta"].as_f64().unwrap() < 1e-4);
    assert!(doc["lambda"].as_f64().unwrap() > 0.0);

    // Invalid market: weights must be probabilities.
    let bad = write(dir.path(), "badmarket.json", r#"{"p": [0.5, 0.5], "q": [2.0, -1.0]}"#);
    let out = fpmc(&["oracle", "--scenario", &bad]);
    assert_eq!(code(&out), 2);

    // State-dependent gammas must match the state count.
    let out = fpmc(&[
        "oracle", "--scenario", &market, "--utility", "state_dep", "--gamma", "1.0",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn convergence_accepts_both_ladder_forms() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write(dir.path(), "scn.json", CONSISTENT);
    let out_dir = dir.path().join("out");
    let out = fpmc(&[
        "convergence",
        "--scenario",
        &scn,
        "--out",
        out_dir.to_str().unwrap(),
        "--paths",
        "1000",
        "--dt-ladder",
        "1/16,32,1/64",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = doc["report"]["rows"].as_array().unwrap();
    let spu: Vec<u64> = rows.iter().map(|r| r["steps_per_unit"].as_u64().unwrap()).collect();
    assert_eq!(spu, vec![16, 32, 64]);
    assert!(doc["report"]["order"].is_number());

    let csv = fs::read_to_string(out_dir.join("convergence.csv")).unwrap();
    assert!(csv.starts_with("steps_per_unit,dt,rms_error,n_paths\n"));
    assert_eq!(csv.lines().count(), 4);

    // The flat strategy does not replicate, so no order is fitted.
    let out = fpmc(&[
        "convergence",
        "--scenario",
        &scn,
        "--out",
        out_dir.to_str().unwrap(),
        "--paths",
        "1000",
        "--dt-ladder",
        "1/16,1/32",
        "--strategy",
        "zero",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(doc["report"]["order"].is_null());

    // A single rung is a usage error.
    let out = fpmc(&[
        "convergence",
        "--scenario",
        &scn,
        "--out",
        out_dir.to_str().unwrap(),
        "--dt-ladder",
        "1/128",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn reruns_are_byte_identical_up_to_the_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write(dir.path(), "scn.json", CONSISTENT);
    let out_dir = dir.path().join("out");
    let mut normalized = Vec::new();
    for _ in 0..2 {
        let out = fpmc(&[
            "check",
            "--scenario",
            &scn,
            "--out",
            out_dir.to_str().unwrap(),
            "--paths",
            "500",
        ]);
        assert!(matches!(code(&out), 0 | 4 | 5), "{out:?}");
        let mut report = json(&out_dir.join("report.json"));
        report["manifest"]["timestamp_unix"] = Value::from(0);
        normalized.push(serde_json::to_string_pretty(&report).unwrap());
    }
    assert_eq!(normalized[0], normalized[1]);
}
