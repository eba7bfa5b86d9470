use netot_web::{flow_frames, geodesic_frames, metrics_report};
use serde_json::Value;

const EXAMPLE: &str = include_str!("../www/example.json");

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn example_geodesic_has_one_frame_per_time_node() {
    let v = parse(&geodesic_frames(EXAMPLE, 1.0).unwrap());
    assert_eq!(v["converged"], true);
    assert_eq!(v["times"].as_array().unwrap().len(), 11);
    assert_eq!(v["rho"][0].as_array().unwrap().len(), 3);
    assert_eq!(v["rho"][0][0].as_array().unwrap().len(), 16);
    assert_eq!(v["gamma"][10].as_array().unwrap().len(), 4);
    assert_eq!(v["layout"]["edges"][0]["tail"], 1);
    // slices carry unit mass
    let dx = 1.0 / 16.0;
    for k in [0, 5, 10] {
        let edges: f64 = v["rho"][k].as_array().unwrap().iter().flat_map(|e| e.as_array().unwrap()).map(|x| x.as_f64().unwrap() * dx).sum();
        let verts: f64 = v["gamma"][k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((edges + verts - 1.0).abs() < 1e-10);
    }
}

#[test]
fn larger_kappa_costs_more() {
    let value = |k: f64| parse(&geodesic_frames(EXAMPLE, k).unwrap())["value"].as_f64().unwrap();
    assert!(value(0.0) <= value(1.0) + 1e-2);
    assert!(value(1.0) <= value(4.0) + 1e-2);
}

#[test]
fn example_flow_decreases_energy() {
    let v = parse(&flow_frames(EXAMPLE, 2.0, 0.01, 20).unwrap());
    assert_eq!(v["energy_increases"], 0);
    assert!(v["max_mass_drift"].as_f64().unwrap() < 1e-10);
    let n = v["times"].as_array().unwrap().len();
    assert!((20..=22).contains(&n), "{n}");
}

#[test]
fn example_metrics() {
    let v = parse(&metrics_report(EXAMPLE, 1.0).unwrap());
    assert!(v["fisher_rao"].as_f64().unwrap() > 0.0);
    assert!(v["bl_distances"]["total"].as_f64().unwrap() > 0.0);
    // both endpoints put 0.8 on the edges, so the edge-only distance exists
    assert!(v["wasserstein_edges"].as_f64().unwrap() > 0.0);
}

#[test]
fn bad_input_is_reported() {
    assert!(geodesic_frames("{", 1.0).is_err());
    assert!(geodesic_frames(EXAMPLE, -1.0).is_err());
    assert!(flow_frames(EXAMPLE, 1.0, 0.0, 10).is_err());
}
