use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parabolicity"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn report(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{command}.json"))).unwrap()).unwrap()
}

#[test]
fn classify_prints_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["classify", "--manifold", "euclidean:n=2", "--p", "2"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "parabolic");
    let text = std::fs::read_to_string(dir.path().join("classify.json")).unwrap();
    assert!(text.starts_with("{\n  \"schema\": 1,"));

    let out = run(dir.path(), &["classify", "--manifold", "euclidean:n=3", "--p", "2"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "nonparabolic");
}

#[test]
fn capacity_row_matches_annulus_formula() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["capacity", "--rmax", "2", "--grid", "1024", "--p", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("decay.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let cols: Vec<f64> = last.split(',').map(|x| x.parse().unwrap()).collect();
    let exact = 2.0 * std::f64::consts::PI / std::f64::consts::LN_2;
    assert_eq!(cols[1], 2.0);
    assert!((cols[2] - exact).abs() / exact < 5e-3, "{last}");
}

#[test]
fn nonparabolic_khasminskii_names_grid_too_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["khasminskii", "--manifold", "euclidean:n=3", "--p", "2", "--rmax", "16", "--grid", "512"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid-too-small"));
    let r = report(dir.path(), "khasminskii");
    assert_eq!(r["status"], "failed");
    assert_eq!(r["failures"][0], "grid-too-small");
}

#[test]
fn khasminskii_run_then_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["khasminskii", "--p", "2", "--log-rmax", "1e84", "--grid", "4000", "--grading", "loggeometric:1.05"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("field.csv").exists());
    let out = run(dir.path(), &["audit"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path(), "audit");
    assert_eq!(r["result"]["steps"].as_array().unwrap().len(), 5);
}

#[test]
fn audit_flags_tampered_links() {
    let dir = tempfile::tempdir().unwrap();
    let saved = serde_json::json!({
        "schema": 1,
        "result": { "reverse": {
            "p": 2.0,
            "config": { "energy_rule": true },
            "steps": [{
                "n": 0,
                "delta_energy": 1.0,
                "audit": {
                    "v_norm": 1.0, "w_norm": 1.0, "half_norm": 0.5, "truncated_norm": 0.5,
                    "sum_norm": 2.0, "obstacle_norm": 2.0, "f_j_norm": 1.0,
                    "link_a": true, "link_b": true, "link_c": true,
                    "lemma": { "outcome": "hypothesis_not_met" },
                    "sigma_term": 0.0, "slack": 1e-9
                }
            }]
        }}
    });
    let path = dir.path().join("saved.json");
    std::fs::write(&path, saved.to_string()).unwrap();
    let out = run(dir.path(), &["audit", "--run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let r = report(dir.path(), "audit");
    let failures: Vec<&str> = r["failures"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(failures.contains(&"link-a@0"));
    assert!(failures.contains(&"stored-mismatch@0"));
}

#[test]
fn input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["nonsense"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["classify", "--p", "abc"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["classify", "--manifold", "sphere:n=2"]).status.code(), Some(1));
    let bad = dir.path().join("bad.ini");
    std::fs::write(&bad, "[classify\np = 2\n").unwrap();
    let out = run(dir.path(), &["classify", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(report(dir.path(), "classify")["status"], "input-error");
    let unknown = dir.path().join("unknown.ini");
    std::fs::write(&unknown, "colour = red\n").unwrap();
    assert_eq!(run(dir.path(), &["classify", "--config", unknown.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["audit", "--run", "/nonexistent.json"]).status.code(), Some(1));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.ini");
    std::fs::write(&cfg, "manifold = euclidean:n=3\np = 2\n[classify]\np = 3\n").unwrap();
    let out = run(dir.path(), &["classify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "parabolic");
    let out = run(dir.path(), &["classify", "--config", cfg.to_str().unwrap(), "--p", "2.5"]);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "nonparabolic");
    assert_eq!(report(dir.path(), "classify")["config"]["p"], 2.5);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (cmd, args) in [
        ("lemma-star", vec!["--trials", "5000", "--seed", "11"]),
        ("capacity", vec!["--grid", "256", "--p", "3"]),
        ("scaling", vec!["--grid", "256"]),
    ] {
        for dir in [&a, &b] {
            let mut full = vec![cmd];
            full.extend(&args);
            assert_eq!(run(dir.path(), &full).status.code(), Some(0));
        }
    }
    for name in ["lemma-star.json", "capacity.json", "decay.csv", "scaling.json", "scaling.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}
