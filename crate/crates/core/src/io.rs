//! Problem files (JSON) and field exports (CSV).
//!
//! JSON numbers are written in shortest round-trip form, so parse →
//! serialize → parse reproduces every value bitwise. CSV values use 17
//! significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradflow::{EnergySpec, FlowState, Simulation, VertexEnergy};
use crate::grid::{Endpoints, GridSpec, TrajectoryField};
use crate::metrics::KappaSweep;
use crate::netgraph::{build_network, EdgeSpec, Network, NetworkMeasure, NetworkSpec, VertexSpec};
use crate::solver::SolverParams;
use crate::{GridError, NetworkError, SolveError};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid problem file: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
    #[error("{which} has total mass {mass}, expected 1 (set \"normalize\": true to rescale)")]
    Mass { which: &'static str, mass: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

fn invalid(location: impl Into<String>, message: impl Into<String>) -> ProblemError {
    ProblemError::Invalid { location: location.into(), message: message.into() }
}

/// Edge density given piecewise constant on equal pieces, or as a Gaussian
/// restricted to the edge and scaled to the requested mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Pwc { values: Vec<f64> },
    Gaussian { center: f64, width: f64, mass: f64 },
}

impl DensitySpec {
    pub fn discretize(&self, grid: &GridSpec, j: usize, length: f64) -> Result<Vec<f64>, String> {
        let n = grid.cells(j);
        match self {
            DensitySpec::Pwc { values } => {
                if values.is_empty() {
                    return Err("pwc needs at least one value".into());
                }
                if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err("pwc values must be finite and nonnegative".into());
                }
                let k = values.len();
                Ok((0..n)
                    .map(|c| {
                        let piece = ((grid.cell_center(j, c) / length) * k as f64).floor() as usize;
                        values[piece.min(k - 1)]
                    })
                    .collect())
            }
            &DensitySpec::Gaussian { center, width, mass } => {
                if !(width > 0.0 && width.is_finite() && mass >= 0.0 && mass.is_finite() && center.is_finite()) {
                    return Err("gaussian needs width > 0, finite center and mass ≥ 0".into());
                }
                let raw: Vec<f64> = (0..n).map(|c| (-(grid.cell_center(j, c) - center).powi(2) / (2.0 * width * width)).exp()).collect();
                let total: f64 = raw.iter().sum::<f64>() * grid.dx(j);
                if mass == 0.0 {
                    return Ok(vec![0.0; n]);
                }
                if !(total > 0.0) {
                    return Err("gaussian has no mass on the edge".into());
                }
                Ok(raw.iter().map(|r| r * mass / total).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VertexEntry {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub gamma0: f64,
    #[serde(default)]
    pub gamma1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub id: String,
    pub tail: String,
    pub head: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<DensitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho1: Option<DensitySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkEntry {
    pub vertices: Vec<VertexEntry>,
    pub edges: Vec<EdgeEntry>,
}

/// Cells per edge: one count for all, a list in edge order, or a target width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellSpec {
    Uniform(usize),
    PerEdge(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Discretization {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<CellSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    pub steps: usize,
}

/// Edge potential for the gradient flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    Constant {
        value: f64,
    },
    /// `offset + slope·x` in edge arclength.
    Linear {
        offset: f64,
        slope: f64,
    },
    /// `(stiffness/2)(x − center)²`.
    Quadratic {
        center: f64,
        stiffness: f64,
    },
}

impl PotentialSpec {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            PotentialSpec::Constant { value } => value,
            PotentialSpec::Linear { offset, slope } => offset + slope * x,
            PotentialSpec::Quadratic { center, stiffness } => 0.5 * stiffness * (x - center).powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradflowEntry {
    /// Potentials by edge id; missing edges use `W = 0`.
    #[serde(default)]
    pub potentials: BTreeMap<String, PotentialSpec>,
    /// Energy used at every vertex unless overridden.
    #[serde(default = "default_vertex_energy")]
    pub vertex_energy: VertexEnergy,
    #[serde(default)]
    pub vertex_overrides: BTreeMap<String, VertexEnergy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

fn default_vertex_energy() -> VertexEnergy {
    VertexEnergy::Quadratic { c: 0.0, target: 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub network: NetworkEntry,
    pub discretization: Discretization,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradflow: Option<GradflowEntry>,
}

fn default_kappa() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub network: Network,
    pub grid: GridSpec,
    pub endpoints: Endpoints,
    pub kappa: f64,
    pub params: SolverParams,
    pub file: ProblemFile,
}

impl Problem {
    /// Energy and initial state for the gradient flow (the `rho0`/`gamma0` data).
    pub fn flow_setup(&self) -> Result<(EnergySpec, FlowState), ProblemError> {
        let gf = self.file.gradflow.clone().unwrap_or(GradflowEntry {
            potentials: BTreeMap::new(),
            vertex_energy: default_vertex_energy(),
            vertex_overrides: BTreeMap::new(),
            kappa: None,
        });
        let net = &self.network;
        for id in gf.potentials.keys() {
            net.edge_index(id).ok_or_else(|| invalid(format!("gradflow.potentials.{id}"), "unknown edge"))?;
        }
        for id in gf.vertex_overrides.keys() {
            net.vertex_index(id).ok_or_else(|| invalid(format!("gradflow.vertex_overrides.{id}"), "unknown vertex"))?;
        }
        let pots: Vec<Option<PotentialSpec>> = net.edges().iter().map(|e| gf.potentials.get(&e.id).cloned()).collect();
        let vertex = net.vertices().iter().map(|v| gf.vertex_overrides.get(&v.id).copied().unwrap_or(gf.vertex_energy)).collect();
        let kappa = gf.kappa.unwrap_or(self.kappa);
        let energy = EnergySpec::from_fn(net, &self.grid, |j, x| pots[j].as_ref().map_or(0.0, |p| p.eval(x)), vertex, kappa);
        let state = FlowState::new(
            self.endpoints.initial.edge_densities.clone(),
            self.endpoints.initial.vertex_masses.clone(),
            &energy,
            net,
            &self.grid,
        )
        .map_err(|e| invalid("gradflow", e.to_string()))?;
        Ok((energy, state))
    }
}

pub fn parse_problem_str(text: &str) -> Result<Problem, ProblemError> {
    let file: ProblemFile = serde_json::from_str(text)?;
    build_problem(file)
}

pub fn build_problem(file: ProblemFile) -> Result<Problem, ProblemError> {
    let spec = NetworkSpec {
        vertices: file.network.vertices.iter().map(|v| VertexSpec { id: v.id.clone(), x: v.x, y: v.y }).collect(),
        edges: file
            .network
            .edges
            .iter()
            .map(|e| EdgeSpec { id: e.id.clone(), tail: e.tail.clone(), head: e.head.clone(), length: e.length })
            .collect(),
    };
    let network = build_network(&spec)?;
    let d = &file.discretization;
    let grid = match (&d.cells, d.dx) {
        (Some(CellSpec::Uniform(n)), None) => GridSpec::uniform(&network, *n, d.steps)?,
        (Some(CellSpec::PerEdge(v)), None) => GridSpec::new(&network, v.clone(), d.steps)?,
        (None, Some(dx)) if dx > 0.0 && dx.is_finite() => GridSpec::with_target_dx(&network, dx, d.steps)?,
        (None, Some(_)) => return Err(invalid("discretization.dx", "must be positive")),
        _ => return Err(invalid("discretization", "give exactly one of `cells` and `dx`")),
    };
    let mut initial = NetworkMeasure::zeros(grid.all_cells(), network.n_vertices());
    let mut terminal = initial.clone();
    for (j, e) in file.network.edges.iter().enumerate() {
        let length = network.edges()[j].length;
        for (which, spec, target) in [("rho0", &e.rho0, &mut initial), ("rho1", &e.rho1, &mut terminal)] {
            if let Some(s) = spec {
                target.edge_densities[j] =
                    s.discretize(&grid, j, length).map_err(|m| invalid(format!("network.edges[{}].{which}", e.id), m))?;
            }
        }
    }
    for (i, v) in file.network.vertices.iter().enumerate() {
        for (which, g) in [("gamma0", v.gamma0), ("gamma1", v.gamma1)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(invalid(format!("network.vertices[{}].{which}", v.id), "must be finite and nonnegative"));
            }
        }
        initial.vertex_masses[i] = v.gamma0;
        terminal.vertex_masses[i] = v.gamma1;
    }
    for (which, mu) in [("initial measure", &mut initial), ("terminal measure", &mut terminal)] {
        let mass = crate::netgraph::total_mass(mu, &network)?;
        if file.normalize {
            if !(mass > 0.0) {
                return Err(ProblemError::Mass { which, mass });
            }
            mu.edge_densities.iter_mut().flatten().for_each(|x| *x /= mass);
            mu.vertex_masses.iter_mut().for_each(|x| *x /= mass);
        } else if (mass - 1.0).abs() > 1e-9 {
            return Err(ProblemError::Mass { which, mass });
        }
    }
    if !(file.kappa >= 0.0 && file.kappa.is_finite()) {
        return Err(invalid("kappa", "must be finite and nonnegative"));
    }
    file.solver.validate()?;
    Ok(Problem { network, grid, endpoints: Endpoints { initial, terminal }, kappa: file.kappa, params: file.solver.clone(), file })
}

pub fn problem_to_json(file: &ProblemFile) -> String {
    serde_json::to_string_pretty(file).expect("problem files always serialize")
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Densities at time nodes: `edge,cell,x,t,rho`, ordered by edge, cell, time.
pub fn densities_csv(field: &TrajectoryField, net: &Network, grid: &GridSpec) -> String {
    let mut s = String::from("edge,cell,x,t,rho\n");
    for (j, e) in net.edges().iter().enumerate() {
        for c in 0..grid.cells(j) {
            for k in 0..=grid.steps() {
                let _ = writeln!(
                    s,
                    "{},{c},{},{},{}",
                    e.id,
                    num(grid.cell_center(j, c)),
                    num(k as f64 * grid.dt()),
                    num(field.rho_at(grid, j, k, c))
                );
            }
        }
    }
    s
}

/// Fluxes at interval midpoints: `edge,face,x,t,flux`.
pub fn fluxes_csv(field: &TrajectoryField, net: &Network, grid: &GridSpec) -> String {
    let mut s = String::from("edge,face,x,t,flux\n");
    for (j, e) in net.edges().iter().enumerate() {
        for f in 0..=grid.cells(j) {
            for k in 0..grid.steps() {
                let _ = writeln!(
                    s,
                    "{},{f},{},{},{}",
                    e.id,
                    num(grid.face_position(j, f)),
                    num((k as f64 + 0.5) * grid.dt()),
                    num(field.flux_at(grid, j, k, f))
                );
            }
        }
    }
    s
}

/// Vertex masses at time nodes and exchange rates on the following interval
/// (empty on the last node): `vertex,t,gamma,exchange`.
pub fn vertices_csv(field: &TrajectoryField, net: &Network, grid: &GridSpec) -> String {
    let mut s = String::from("vertex,t,gamma,exchange\n");
    for (i, v) in net.vertices().iter().enumerate() {
        for k in 0..=grid.steps() {
            let ex = field.exchange[i].get(k).map(|x| num(*x)).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{ex}", v.id, num(k as f64 * grid.dt()), num(field.gamma[i][k]));
        }
    }
    s
}

pub fn sweep_csv(sweep: &KappaSweep) -> String {
    let mut s = String::from("kappa,value,dual_value,rel_gap,converged,iterations,flux_norm,value_over_kappa2,mass_bound,reference\n");
    for p in &sweep.points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            num(p.kappa),
            num(p.value),
            num(p.dual_value),
            num(p.rel_gap),
            p.converged,
            p.iterations,
            num(p.flux_norm),
            num(p.value / (p.kappa * p.kappa)),
            num(sweep.mass_bound),
            sweep.reference.map(num).unwrap_or_default()
        );
    }
    s
}

/// Edge trajectory of a simulation: `edge,cell,t,rho`.
pub fn flow_edges_csv(sim: &Simulation, net: &Network, grid: &GridSpec) -> String {
    let mut s = String::from("edge,cell,t,rho\n");
    for (j, e) in net.edges().iter().enumerate() {
        for c in 0..grid.cells(j) {
            for st in &sim.states {
                let _ = writeln!(s, "{},{c},{},{}", e.id, num(st.t), num(st.rho[j][c]));
            }
        }
    }
    s
}

/// Vertex trajectory with the energy at the same instants: `vertex,t,gamma,energy`.
pub fn flow_vertices_csv(sim: &Simulation, net: &Network) -> String {
    let mut s = String::from("vertex,t,gamma,energy\n");
    for (i, v) in net.vertices().iter().enumerate() {
        for st in &sim.states {
            let e = sim.times.iter().position(|t| *t == st.t).map(|p| num(sim.energies[p])).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{e}", v.id, num(st.t), num(st.gamma[i]));
        }
    }
    s
}

/// Energy after every step: `t,energy`.
pub fn flow_energy_csv(sim: &Simulation) -> String {
    let mut s = String::from("t,energy\n");
    for (t, e) in sim.times.iter().zip(&sim.energies) {
        let _ = writeln!(s, "{},{}", num(*t), num(*e));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const Y: &str = r#"{
      "network": {
        "vertices": [
          {"id": "V1", "x": 0, "y": 0},
          {"id": "V2", "x": -1, "y": 0},
          {"id": "V3", "x": 0.5, "y": 0.8660254037844386},
          {"id": "V4", "x": 0.5, "y": -0.8660254037844386}
        ],
        "edges": [
          {"id": "E1", "tail": "V2", "head": "V1", "rho0": {"type": "pwc", "values": [1.0]}},
          {"id": "E2", "tail": "V1", "head": "V3", "rho1": {"type": "pwc", "values": [1.0]}},
          {"id": "E3", "tail": "V1", "head": "V4"}
        ]
      },
      "discretization": {"cells": 8, "steps": 4},
      "kappa": 2.0
    }"#;

    #[test]
    fn parses_y_graph() {
        let p = parse_problem_str(Y).unwrap();
        assert_eq!(p.network.incident(0), &[0, 1, 2]);
        assert_eq!(p.grid.cells(1), 8);
        assert!((p.network.edges()[0].length - 1.0).abs() < 1e-12);
        assert_eq!(p.endpoints.initial.edge_densities[0], vec![1.0; 8]);
        assert_eq!(p.endpoints.terminal.edge_densities[2], vec![0.0; 8]);
        assert_eq!(p.kappa, 2.0);
        assert_eq!(p.params, SolverParams::default());
    }

    #[test]
    fn mass_must_be_one_unless_normalized() {
        let half = Y.replace(r#""rho0": {"type": "pwc", "values": [1.0]}"#, r#""rho0": {"type": "pwc", "values": [0.5]}"#);
        assert!(matches!(parse_problem_str(&half), Err(ProblemError::Mass { .. })));
        let fixed = half.replace(r#""kappa": 2.0"#, r#""kappa": 2.0, "normalize": true"#);
        let p = parse_problem_str(&fixed).unwrap();
        let m = crate::netgraph::total_mass(&p.endpoints.initial, &p.network).unwrap();
        assert!((m - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_has_requested_mass() {
        let text = Y.replace(
            r#""rho0": {"type": "pwc", "values": [1.0]}"#,
            r#""rho0": {"type": "gaussian", "center": 0.9, "width": 0.3, "mass": 1.0}"#,
        );
        let p = parse_problem_str(&text).unwrap();
        let m = p.endpoints.initial.edge_mass(&p.network, 0);
        assert!((m - 1.0).abs() < 1e-14);
    }

    #[test]
    fn schema_errors_name_the_location() {
        let text = Y.replace(r#""tail": "V1", "head": "V4""#, r#""tail": "V1", "head": "V9""#);
        assert!(matches!(parse_problem_str(&text), Err(ProblemError::Network(NetworkError::DanglingVertex { .. }))));
        let text = Y.replace(r#""rho0": {"type": "pwc", "values": [1.0]}"#, r#""rho0": {"type": "pwc", "values": [-1.0]}"#);
        let err = parse_problem_str(&text).unwrap_err().to_string();
        assert!(err.contains("E1") && err.contains("rho0"), "{err}");
        assert!(parse_problem_str(r#"{"network": 3}"#).is_err());
        let text = Y.replace(r#""cells": 8,"#, r#""cells": 8, "dx": 0.1,"#);
        assert!(matches!(parse_problem_str(&text), Err(ProblemError::Invalid { .. })));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let text = Y.replace(
            r#""rho0": {"type": "pwc", "values": [1.0]}"#,
            r#""rho0": {"type": "gaussian", "center": 0.1234567890123456789, "width": 0.3, "mass": 1.0}"#,
        );
        let p = parse_problem_str(&text).unwrap();
        let again = parse_problem_str(&problem_to_json(&p.file)).unwrap();
        assert_eq!(p.file, again.file);
        assert_eq!(p.endpoints, again.endpoints);
        assert_eq!(p.grid, again.grid);
    }

    #[test]
    fn csv_layout() {
        let p = parse_problem_str(Y).unwrap();
        let field = crate::grid::linear_seed(&p.endpoints, &p.grid);
        let csv = densities_csv(&field, &p.network, &p.grid);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "edge,cell,x,t,rho");
        assert_eq!(lines.len(), 1 + 3 * 8 * 5);
        assert!(lines[1].starts_with("E1,0,"));
        assert!(lines[2].starts_with("E1,0,"));
        let v: f64 = lines[1].split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(vertices_csv(&field, &p.network, &p.grid).lines().count(), 1 + 4 * 5);
        assert_eq!(fluxes_csv(&field, &p.network, &p.grid).lines().count(), 1 + 3 * 9 * 4);
    }
}
