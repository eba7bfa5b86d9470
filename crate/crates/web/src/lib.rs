//! Browser bindings. Every entry point takes a problem file as a JSON string
//! and returns JSON for the page to draw.

use netot_core::gradflow::simulate;
use netot_core::io::{parse_problem_str, Problem};
use netot_core::metrics::endpoint_metrics;
use netot_core::netgraph::Network;
use netot_core::solver::{solve_with_mode, VertexMode};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct VertexLayout {
    id: String,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct EdgeLayout {
    id: String,
    tail: usize,
    head: usize,
    length: f64,
}

#[derive(Serialize)]
struct Layout {
    vertices: Vec<VertexLayout>,
    edges: Vec<EdgeLayout>,
}

fn layout(net: &Network) -> Layout {
    Layout {
        vertices: net.vertices().iter().map(|v| VertexLayout { id: v.id.clone(), x: v.position[0], y: v.position[1] }).collect(),
        edges: net.edges().iter().map(|e| EdgeLayout { id: e.id.clone(), tail: e.tail, head: e.head, length: e.length }).collect(),
    }
}

/// Snapshots in time; `rho[frame][edge][cell]`, `gamma[frame][vertex]`.
#[derive(Serialize)]
struct Frames {
    layout: Layout,
    times: Vec<f64>,
    rho: Vec<Vec<Vec<f64>>>,
    gamma: Vec<Vec<f64>>,
    #[serde(flatten)]
    summary: serde_json::Value,
}

fn load(problem: &str) -> Result<Problem, String> {
    parse_problem_str(problem).map_err(|e| e.to_string())
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("plain data always serializes")
}

/// Geodesic between the endpoint measures at the given coupling constant
/// (`kappa = 0` for free vertex exchange).
pub fn geodesic_frames(problem: &str, kappa: f64) -> Result<String, String> {
    let p = load(problem)?;
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err("kappa must be finite and nonnegative".into());
    }
    let r = solve_with_mode(&p.network, &p.grid, &p.endpoints, VertexMode::from_kappa(kappa), &p.params).map_err(|e| e.to_string())?;
    let steps = p.grid.steps();
    let frames = Frames {
        layout: layout(&p.network),
        times: (0..=steps).map(|k| k as f64 * p.grid.dt()).collect(),
        rho: (0..=steps)
            .map(|k| {
                let s = r.geodesic.slice(&p.grid, k);
                s.edge_densities
            })
            .collect(),
        gamma: (0..=steps).map(|k| r.geodesic.gamma.iter().map(|g| g[k]).collect()).collect(),
        summary: serde_json::json!({
            "value": r.value,
            "dual_value": r.dual_value,
            "rel_gap": r.rel_gap,
            "iterations": r.iterations,
            "converged": r.converged,
            "max_vertex_flux": r.geodesic.max_exchange(),
        }),
    };
    Ok(to_json(&frames))
}

/// Gradient flow from the initial measure, sampled at about `frames` instants.
pub fn flow_frames(problem: &str, t_end: f64, dt: f64, frames: usize) -> Result<String, String> {
    let p = load(problem)?;
    if !(dt > 0.0 && dt.is_finite() && t_end >= 0.0 && t_end.is_finite()) || frames == 0 {
        return Err("need dt > 0, a finite end time and at least one frame".into());
    }
    let (energy, state) = p.flow_setup().map_err(|e| e.to_string())?;
    let steps = (t_end / dt).ceil().max(1.0) as usize;
    let stride = (steps / frames).max(1);
    let sim = simulate(&state, t_end, dt, &energy, &p.network, &p.grid, stride).map_err(|e| e.to_string())?;
    let out = Frames {
        layout: layout(&p.network),
        times: sim.states.iter().map(|s| s.t).collect(),
        rho: sim.states.iter().map(|s| s.rho.clone()).collect(),
        gamma: sim.states.iter().map(|s| s.gamma.clone()).collect(),
        summary: serde_json::json!({
            "energy_times": sim.times,
            "energies": sim.energies,
            "max_mass_drift": sim.max_mass_drift,
            "energy_increases": sim.energy_increases,
        }),
    };
    Ok(to_json(&out))
}

/// Fisher-Rao, edge Wasserstein and bounded-Lipschitz distances between the
/// endpoint measures.
pub fn metrics_report(problem: &str, kappa: f64) -> Result<String, String> {
    let p = load(problem)?;
    let m = endpoint_metrics(&p.network, &p.grid, &p.endpoints, kappa, &p.params).map_err(|e| e.to_string())?;
    Ok(to_json(&m))
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn geodesic(problem: &str, kappa: f64) -> Result<String, JsValue> {
    js(geodesic_frames(problem, kappa))
}

#[wasm_bindgen]
pub fn gradient_flow(problem: &str, t_end: f64, dt: f64, frames: usize) -> Result<String, JsValue> {
    js(flow_frames(problem, t_end, dt, frames))
}

#[wasm_bindgen]
pub fn metrics(problem: &str, kappa: f64) -> Result<String, JsValue> {
    js(metrics_report(problem, kappa))
}
