use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dpgo(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpgo"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        stdout_json(&dpgo(d, &["generate", "--grid", "4", "--seed", "7"]));
    }
    for f in ["graph.txt", "truth.csv", "manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn dgs_cost_is_within_one_percent_of_gn() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    stdout_json(&dpgo(&gen, &["generate", "--grid", "4", "--seed", "7"]));
    let graph = gen.join("graph.txt");
    let graph = graph.to_str().unwrap();
    let dgs = stdout_json(&dpgo(
        &dir.path().join("dgs"),
        &[
            "solve", "--graph", graph, "--method", "dgs", "--eta", "1e-2",
        ],
    ));
    let gn = stdout_json(&dpgo(
        &dir.path().join("gn"),
        &["solve", "--graph", graph, "--method", "gn"],
    ));
    let (c_dgs, c_gn) = (dgs["cost"].as_f64().unwrap(), gn["cost"].as_f64().unwrap());
    assert!(c_gn <= c_dgs + 1e-9);
    assert!((c_dgs - c_gn) / c_gn < 0.01, "dgs {c_dgs} gn {c_gn}");
    for f in [
        "estimate.csv",
        "trace.csv",
        "ledger.json",
        "summary.json",
        "manifest.json",
    ] {
        assert!(dir.path().join("dgs").join(f).exists(), "missing {f}");
    }
}

#[test]
fn analyze_reports_convergent_rotation_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let report = stdout_json(&dpgo(
        dir.path(),
        &["analyze", "--grid", "4", "--seed", "3", "--gamma", "1.0"],
    ));
    let rho = report["estimates"][0]["spectral_radius"].as_f64().unwrap();
    assert!(rho < 1.0, "rho = {rho}");
    assert_eq!(report["phase"], "rotation");
}

#[test]
fn config_file_and_flags_agree() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{"scenario":{"kind":"Grid3D","robot_count":4,"poses_per_robot":8,"sigma_r":5.0,"sigma_t":0.2,
            "rng_seed":2,"link_count":0,"scale":1.0},
            "graph":null,"out_dir":null,"method":{"method":"dgs"},
            "solver":{"scheme":"gaussseidel","gamma":1.0,"eta_r":0.01,"eta_p":0.01,"max_iterations":10000,
                      "flagged_init":true,"sor_order":null}}"#,
    )
    .unwrap();
    let from_file = stdout_json(&dpgo(
        &dir.path().join("f"),
        &["solve", "--config", config.to_str().unwrap()],
    ));
    let from_flags = stdout_json(&dpgo(
        &dir.path().join("g"),
        &["solve", "--grid", "4", "--seed", "2", "--eta", "1e-2"],
    ));
    assert_eq!(from_file, from_flags);
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "VERTEX 0 0 0 0 0 0 0 1\nVERTEX 1 0 0 0 0 0 0 3\n").unwrap();
    let out = dpgo(dir.path(), &["solve", "--graph", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "parse");
    assert!(err["message"].as_str().unwrap().contains("line 2"));

    let out = dpgo(
        dir.path(),
        &["solve", "--grid", "4", "--gamma", "2.5", "--eta", "1e-3"],
    );
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "diverged");

    let out = dpgo(dir.path(), &["solve", "--grid", "4", "--tracks", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn out_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_dpgo"))
        .env("DPGO_OUT_DIR", dir.path())
        .args(["generate", "--tracks", "3", "--seed", "1"])
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(dir.path().join("graph.txt").exists());
}
