use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn netot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netot")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_str(&stdout(o)).expect("JSON on stdout")
}

#[test]
fn distance_of_identity_is_zero() {
    let o = netot(&["distance", fixture("identity.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let r = json(&o);
    assert!(r["value"].as_f64().unwrap() <= 1e-6);
    assert_eq!(r["converged"], true);
    for key in ["dual_value", "gap", "iterations"] {
        assert!(r.get(key).is_some(), "{key}");
    }
}

#[test]
fn transfer_between_edges_costs_about_half() {
    // all mass crosses the junction: every particle travels one unit
    let o = netot(&["distance", fixture("y_transfer.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v = json(&o)["value"].as_f64().unwrap();
    assert!((v - 0.5).abs() < 0.03, "{v}");
}

#[test]
fn sweep_respects_vertex_mass_bound() {
    let o = netot(&["sweep-kappa", fixture("incompatible.json").to_str().unwrap(), "--kappas", "1,2,4"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let ratio: f64 = r[col("value_over_kappa2")].parse().unwrap();
        let bound: f64 = r[col("mass_bound")].parse().unwrap();
        assert!(ratio >= bound, "{ratio} < {bound}");
    }
}

#[test]
fn geodesic_writes_frames() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = netot(&["geodesic", fixture("y_transfer.json").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dens = fs::read_to_string(out.join("densities.csv")).unwrap();
    let rows: Vec<&str> = dens.lines().collect();
    assert_eq!(rows[0], "edge,cell,x,t,rho");
    // 3 edges × 16 cells × 9 time nodes
    assert_eq!(rows.len(), 1 + 3 * 16 * 9);
    // edge, then cell, then time
    let keys: Vec<(String, usize, f64)> = rows[1..]
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    assert!(keys.windows(2).all(|w| (&w[0].0, w[0].1) < (&w[1].0, w[1].1) || ((&w[0].0, w[0].1) == (&w[1].0, w[1].1) && w[0].2 < w[1].2)));
    for f in ["report.json", "fluxes.csv", "vertices.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn metrics_report_fields() {
    let o = netot(&["metrics", fixture("y_transfer.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let r = json(&o);
    assert_eq!(r["fisher_rao"].as_f64(), Some(0.0));
    let we = r["wasserstein_edges"].as_f64().unwrap();
    assert!((we - 0.5).abs() < 0.03);
    assert!(r["per_edge_1d"][0].is_null());
    assert_eq!(r["per_edge_1d"][2].as_f64(), Some(0.0));
    assert_eq!(r["bl_distances"]["total"].as_f64(), Some(2.0));
}

#[test]
fn gradflow_writes_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flow");
    let o =
        netot(&["gradflow", fixture("two_edge_flow.json").to_str().unwrap(), "--T", "5", "--dt", "0.05", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&o);
    assert_eq!(r["steps"], 100);
    assert_eq!(r["energy_increases"], 0);
    let energy = fs::read_to_string(out.join("energy.csv")).unwrap();
    assert_eq!(energy.lines().count(), 102);
    assert!(fs::read_to_string(out.join("edges.csv")).unwrap().starts_with("edge,cell,t,rho\n"));
    assert!(fs::read_to_string(out.join("vertices.csv")).unwrap().starts_with("vertex,t,gamma,energy\n"));
}

#[test]
fn gradflow_rejects_unstable_step() {
    // a steep potential makes the explicit drift the binding constraint
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("two_edge_flow.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["gradflow"]["potentials"]["E2"] = serde_json::json!({"type": "linear", "offset": 0.0, "slope": 50.0});
    let path = dir.path().join("steep.json");
    fs::write(&path, v.to_string()).unwrap();
    let out = dir.path().join("o");
    let run = |dt: &str| netot(&["gradflow", path.to_str().unwrap(), "--T", "0.01", "--dt", dt, "--out", out.to_str().unwrap()]);
    let o = run("0.01");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stability bound"));
    assert_eq!(run("0.0001").status.code(), Some(0));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    assert_eq!(netot(&["distance", "/nonexistent/problem.json"]).status.code(), Some(3));
    assert_eq!(netot(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(netot(&["--help"]).status.code(), Some(0));

    let text = fs::read_to_string(fixture("identity.json")).unwrap();
    let half = text.replacen("\"values\": [\n            1.0\n          ]", "\"values\": [\n            0.5\n          ]", 1);
    assert_ne!(half, text);
    let bad = dir.path().join("half.json");
    fs::write(&bad, half).unwrap();
    let o = netot(&["distance", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mass"));

    // the report is still written when the iteration budget runs out
    let text = fs::read_to_string(fixture("y_transfer.json")).unwrap();
    let capped = text.replace("\"kappa\": 1.0", "\"kappa\": 1.0, \"solver\": {\"max_iters\": 20, \"check_every\": 10}");
    let path = dir.path().join("capped.json");
    fs::write(&path, capped).unwrap();
    let out = dir.path().join("capped");
    let o = netot(&["geodesic", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], false);
}

#[test]
fn thread_cap_is_validated() {
    let path = fixture("incompatible.json");
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_netot"))
            .args(["sweep-kappa", path.to_str().unwrap(), "--kappas", "1,2"])
            .env("NETOT_THREADS", v)
            .output()
            .unwrap()
    };
    assert_eq!(run("1").status.code(), Some(0));
    assert_eq!(run("zero").status.code(), Some(1));
}

#[test]
fn quick_verify_reports_every_criterion() {
    let o = netot(&["verify", "--quick"]);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert_eq!(lines.len(), 11);
    let any_fail = lines.iter().any(|l| l.starts_with("FAIL"));
    assert_eq!(o.status.code(), Some(if any_fail { 1 } else { 0 }));
    assert!(!any_fail, "{text}");
}
