//! Drift-diffusion gradient flow on a network with mass exchange at vertices.
//!
//! On every edge `∂ₜρ = ∂ₓ(∂ₓρ + ρW′)`; at vertex `i` the mass obeys
//! `γ̇ = κ⁻² γ (1 + log u − h′(γ))` where `u = ρ^j e^{W_j}` is the trace shared
//! by all incident edges, and the edge outflows add up to `γ̇` (Kirchhoff).
//!
//! Diffusion is implicit: one unknown per cell plus one trace unknown per
//! vertex, eliminated edge by edge into a small dense vertex system. Drift
//! (upwind) and the vertex exchange are explicit.

use serde::{Deserialize, Serialize};

use crate::error::FlowError;
use crate::grid::GridSpec;
use crate::linalg::{solve_dense, solve_tridiagonal};
use crate::netgraph::Network;

/// Floor applied inside logarithms only.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VertexEnergy {
    /// `(c/2)(γ − target)²`.
    Quadratic { c: f64, target: f64 },
    /// `γ log γ`.
    Entropy,
}

impl VertexEnergy {
    pub fn value(&self, g: f64) -> f64 {
        match *self {
            VertexEnergy::Quadratic { c, target } => 0.5 * c * (g - target).powi(2),
            VertexEnergy::Entropy => xlogx(g),
        }
    }

    /// `h′(γ)`; `−∞` for the entropy at `γ = 0`, where the exchange vanishes anyway.
    pub fn derivative(&self, g: f64) -> f64 {
        match *self {
            VertexEnergy::Quadratic { c, target } => c * (g - target),
            VertexEnergy::Entropy => 1.0 + g.ln(),
        }
    }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySpec {
    /// `W_j` at cell centers.
    pub potential: Vec<Vec<f64>>,
    /// `W_j` at the tail and head of each edge.
    pub potential_ends: Vec<[f64; 2]>,
    pub vertex: Vec<VertexEnergy>,
    pub kappa: f64,
}

impl EnergySpec {
    /// Samples `w(j, x)` at cell centers and edge ends.
    pub fn from_fn(net: &Network, grid: &GridSpec, w: impl Fn(usize, f64) -> f64, vertex: Vec<VertexEnergy>, kappa: f64) -> Self {
        EnergySpec {
            potential: (0..grid.n_edges()).map(|j| (0..grid.cells(j)).map(|c| w(j, grid.cell_center(j, c))).collect()).collect(),
            potential_ends: net.edges().iter().enumerate().map(|(j, e)| [w(j, 0.0), w(j, e.length)]).collect(),
            vertex,
            kappa,
        }
    }

    fn check(&self, net: &Network, grid: &GridSpec) -> Result<(), FlowError> {
        let ok = self.potential.len() == grid.n_edges()
            && self.potential_ends.len() == grid.n_edges()
            && self.potential.iter().enumerate().all(|(j, w)| w.len() == grid.cells(j))
            && self.vertex.len() == net.n_vertices();
        if !ok {
            return Err(FlowError::Shape("energy does not match the grid".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(FlowError::Parameter(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.potential.iter().flatten().chain(self.potential_ends.iter().flatten()).any(|w| !w.is_finite()) {
            return Err(FlowError::Parameter("potential must be finite".into()));
        }
        Ok(())
    }

    /// `W′` at the faces of edge `j`.
    fn gradient(&self, grid: &GridSpec, j: usize) -> Vec<f64> {
        let n = grid.cells(j);
        let dx = grid.dx(j);
        let w = &self.potential[j];
        let [wt, wh] = self.potential_ends[j];
        (0..=n)
            .map(|e| {
                if e == 0 {
                    (w[0] - wt) / (0.5 * dx)
                } else if e == n {
                    (wh - w[n - 1]) / (0.5 * dx)
                } else {
                    (w[e] - w[e - 1]) / dx
                }
            })
            .collect()
    }

    /// `W_j` at the end of edge `j` touching vertex `i`.
    fn end_value(&self, net: &Network, j: usize, i: usize) -> f64 {
        if net.edges()[j].tail == i {
            self.potential_ends[j][0]
        } else {
            self.potential_ends[j][1]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub rho: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    /// Shared vertex value of `ρ e^{W}`.
    pub trace: Vec<f64>,
    pub t: f64,
}

impl FlowState {
    /// Initial state; the vertex trace is the mean of `ρ e^{W}` over the
    /// boundary cells next to each vertex.
    pub fn new(rho: Vec<Vec<f64>>, gamma: Vec<f64>, energy: &EnergySpec, net: &Network, grid: &GridSpec) -> Result<Self, FlowError> {
        energy.check(net, grid)?;
        if rho.len() != grid.n_edges() || rho.iter().enumerate().any(|(j, r)| r.len() != grid.cells(j)) || gamma.len() != net.n_vertices() {
            return Err(FlowError::Shape("state does not match the grid".into()));
        }
        if rho.iter().flatten().chain(&gamma).any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(FlowError::Parameter("densities and vertex masses must be nonnegative".into()));
        }
        let trace = (0..net.n_vertices())
            .map(|i| {
                let inc = net.incident(i);
                inc.iter()
                    .map(|&j| {
                        let n = grid.cells(j);
                        let c = if net.edges()[j].tail == i { 0 } else { n - 1 };
                        rho[j][c] * energy.end_value(net, j, i).exp()
                    })
                    .sum::<f64>()
                    / inc.len() as f64
            })
            .collect();
        Ok(FlowState { rho, gamma, trace, t: 0.0 })
    }

    pub fn mass(&self, grid: &GridSpec) -> f64 {
        let edges: f64 = self.rho.iter().enumerate().map(|(j, r)| r.iter().sum::<f64>() * grid.dx(j)).sum();
        edges + self.gamma.iter().sum::<f64>()
    }
}

/// `Σ (ρ log ρ + ρ W) Δx + Σ h(γ)` with `0 log 0 = 0`.
pub fn energy_eval(state: &FlowState, energy: &EnergySpec, grid: &GridSpec) -> f64 {
    let mut e = 0.0;
    for (j, r) in state.rho.iter().enumerate() {
        let dx = grid.dx(j);
        for (c, &x) in r.iter().enumerate() {
            e += (xlogx(x) + x * energy.potential[j][c]) * dx;
        }
    }
    e + state.gamma.iter().zip(&energy.vertex).map(|(&g, h)| h.value(g)).sum::<f64>()
}

/// Vertex exchange rates `κ⁻² γ (1 + log u − h′(γ))`.
fn exchange_rates(state: &FlowState, energy: &EnergySpec) -> Vec<f64> {
    let k2 = energy.kappa * energy.kappa;
    state
        .gamma
        .iter()
        .enumerate()
        .map(|(i, &g)| if g == 0.0 { 0.0 } else { g * (1.0 + state.trace[i].max(LOG_FLOOR).ln() - energy.vertex[i].derivative(g)) / k2 })
        .collect()
}

/// Largest stable step for the explicit parts.
pub fn stability_bound(state: &FlowState, energy: &EnergySpec, grid: &GridSpec) -> f64 {
    let mut bound = f64::INFINITY;
    for j in 0..grid.n_edges() {
        let m = energy.gradient(grid, j).iter().fold(0.0f64, |m, w| m.max(w.abs()));
        if m > 0.0 {
            bound = bound.min(grid.dx(j) / m);
        }
    }
    let k2 = energy.kappa * energy.kappa;
    for (i, &g) in state.gamma.iter().enumerate() {
        if g > 0.0 {
            let d = (energy.vertex[i].derivative(g) - 1.0 - state.trace[i].max(LOG_FLOOR).ln()).abs();
            if d > 0.0 {
                bound = bound.min(k2 / d);
            }
        }
    }
    0.4 * bound
}

pub fn flow_step(state: &FlowState, dt: f64, energy: &EnergySpec, net: &Network, grid: &GridSpec) -> Result<FlowState, FlowError> {
    energy.check(net, grid)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(FlowError::Parameter(format!("time step must be positive, got {dt}")));
    }
    let bound = stability_bound(state, energy, grid);
    if dt > bound {
        return Err(FlowError::Cfl { dt, bound });
    }
    let nv = net.n_vertices();
    let rates = exchange_rates(state, energy);

    // Per edge: ρ_new = base + u_tail·rt + u_head·rh, with boundary-face
    // fluxes affine in the same unknowns.
    struct EdgeSolve {
        base: Vec<f64>,
        rt: Vec<f64>,
        rh: Vec<f64>,
    }
    let mut solves = Vec::with_capacity(grid.n_edges());
    // vertex system: Σ outflow = rate, as A u = r
    let mut a = vec![vec![0.0; nv]; nv];
    let mut r = rates.clone();
    for (j, edge) in net.edges().iter().enumerate() {
        let n = grid.cells(j);
        let dx = grid.dx(j);
        let lam = dt / (dx * dx);
        let rho = &state.rho[j];
        let wp = energy.gradient(grid, j);
        let et = (-energy.potential_ends[j][0]).exp();
        let eh = (-energy.potential_ends[j][1]).exp();
        // explicit upwind drift flux, velocity −W′
        let drift: Vec<f64> = (0..=n)
            .map(|e| {
                let v = -wp[e];
                let left = if e == 0 { state.trace[edge.tail] * et } else { rho[e - 1] };
                let right = if e == n { state.trace[edge.head] * eh } else { rho[e] };
                v.max(0.0) * left + v.min(0.0) * right
            })
            .collect();
        let mut lower = vec![-lam; n];
        let mut upper = vec![-lam; n];
        let mut diag = vec![1.0 + 2.0 * lam; n];
        lower[0] = 0.0;
        upper[n - 1] = 0.0;
        diag[0] = 1.0 + lam + 2.0 * lam;
        diag[n - 1] = 1.0 + lam + 2.0 * lam;
        let rhs: Vec<f64> = (0..n).map(|c| rho[c] - dt / dx * (drift[c + 1] - drift[c])).collect();
        let base = solve_tridiagonal(&lower, &diag, &upper, &rhs);
        let mut unit = vec![0.0; n];
        unit[0] = 2.0 * lam * et;
        let rt = solve_tridiagonal(&lower, &diag, &upper, &unit);
        unit[0] = 0.0;
        unit[n - 1] = 2.0 * lam * eh;
        let rh = solve_tridiagonal(&lower, &diag, &upper, &unit);

        // head outflow J_N = −(u_h e_h − ρ_{N−1})·2/Δx + D_N
        let (h, t) = (edge.head, edge.tail);
        let g = 2.0 / dx;
        a[h][h] += -g * eh + g * rh[n - 1];
        a[h][t] += g * rt[n - 1];
        r[h] -= g * base[n - 1] + drift[n];
        // tail outflow −J_0 = (ρ_0 − u_t e_t)·2/Δx − D_0
        a[t][t] += g * rt[0] - g * et;
        a[t][h] += g * rh[0];
        r[t] -= g * base[0] - drift[0];
        solves.push(EdgeSolve { base, rt, rh });
    }
    let u = solve_dense(a, r).ok_or_else(|| FlowError::Parameter("singular vertex system".into()))?;

    let mut rho = Vec::with_capacity(grid.n_edges());
    for (j, s) in solves.iter().enumerate() {
        let e = &net.edges()[j];
        let (ut, uh) = (u[e.tail], u[e.head]);
        let v: Vec<f64> = (0..grid.cells(j)).map(|c| (s.base[c] + ut * s.rt[c] + uh * s.rh[c]).max(0.0)).collect();
        rho.push(v);
    }
    let gamma: Vec<f64> = state.gamma.iter().zip(&rates).map(|(g, f)| (g + dt * f).max(0.0)).collect();
    Ok(FlowState { rho, gamma, trace: u.iter().map(|x| x.max(0.0)).collect(), t: state.t + dt })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub states: Vec<FlowState>,
    /// Energy after every step, starting with the initial state.
    pub energies: Vec<f64>,
    pub times: Vec<f64>,
    /// Largest per-step change of total mass.
    pub max_mass_drift: f64,
    /// Steps where the energy rose by more than `1e-9`.
    pub energy_increases: usize,
}

/// Integrates to `t_end`, recording every `record_every`-th state (and the last).
pub fn simulate(
    state0: &FlowState,
    t_end: f64,
    dt: f64,
    energy: &EnergySpec,
    net: &Network,
    grid: &GridSpec,
    record_every: usize,
) -> Result<Simulation, FlowError> {
    if !(t_end >= 0.0 && t_end.is_finite()) || record_every == 0 {
        return Err(FlowError::Parameter("need a finite end time and a positive record stride".into()));
    }
    let steps = (t_end / dt).ceil() as usize;
    let mut state = state0.clone();
    let mut sim = Simulation {
        states: vec![state.clone()],
        energies: vec![energy_eval(&state, energy, grid)],
        times: vec![state.t],
        max_mass_drift: 0.0,
        energy_increases: 0,
    };
    for s in 0..steps {
        let h = (t_end - state0.t - s as f64 * dt).min(dt);
        if h <= 0.0 {
            break;
        }
        let next = flow_step(&state, h, energy, net, grid)?;
        sim.max_mass_drift = sim.max_mass_drift.max((next.mass(grid) - state.mass(grid)).abs());
        let e = energy_eval(&next, energy, grid);
        if e > sim.energies.last().unwrap() + 1e-9 {
            sim.energy_increases += 1;
        }
        sim.energies.push(e);
        sim.times.push(next.t);
        state = next;
        if (s + 1) % record_every == 0 || s + 1 == steps {
            sim.states.push(state.clone());
        }
    }
    if sim.states.last().map(|x| x.t) != Some(state.t) {
        sim.states.push(state);
    }
    Ok(sim)
}

/// Largest relative mismatch of `ρ e^{W}` between incident edges at the
/// vertices, using the boundary-cell values.
pub fn transmission_defect(state: &FlowState, energy: &EnergySpec, net: &Network, grid: &GridSpec) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..net.n_vertices() {
        let vals: Vec<f64> = net
            .incident(i)
            .iter()
            .map(|&j| {
                let n = grid.cells(j);
                let (c, w) = if net.edges()[j].tail == i { (0, energy.potential[j][0]) } else { (n - 1, energy.potential[j][n - 1]) };
                state.rho[j][c] * w.exp()
            })
            .collect();
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        if hi > 0.0 {
            worst = worst.max((hi - lo) / hi);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::fixtures;

    fn quad0(n: usize) -> Vec<VertexEnergy> {
        vec![VertexEnergy::Quadratic { c: 0.0, target: 0.0 }; n]
    }

    #[test]
    fn energy_examples() {
        let net = fixtures::segment(1.0);
        let grid = GridSpec::uniform(&net, 4, 1).unwrap();
        let en = EnergySpec::from_fn(&net, &grid, |_, _| 0.0, quad0(2), 1.0);
        let s = FlowState { rho: vec![vec![1.0; 4]], gamma: vec![0.0, 0.0], trace: vec![1.0, 1.0], t: 0.0 };
        assert_eq!(energy_eval(&s, &en, &grid), 0.0);

        let en = EnergySpec { vertex: vec![VertexEnergy::Quadratic { c: 2.0, target: 0.0 }; 2], ..en };
        let s = FlowState { rho: vec![vec![0.0; 4]], gamma: vec![1.0, 0.0], trace: vec![0.0, 0.0], t: 0.0 };
        assert_eq!(energy_eval(&s, &en, &grid), 1.0);

        let net = fixtures::segment(2.0);
        let grid = GridSpec::uniform(&net, 5, 1).unwrap();
        let en = EnergySpec::from_fn(&net, &grid, |_, _| 0.0, quad0(2), 1.0);
        let s = FlowState { rho: vec![vec![0.5; 5]], gamma: vec![0.0, 0.0], trace: vec![0.5, 0.5], t: 0.0 };
        assert!((energy_eval(&s, &en, &grid) + 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn uniform_state_is_stationary() {
        let net = fixtures::segment(1.0);
        let grid = GridSpec::uniform(&net, 10, 1).unwrap();
        let en = EnergySpec::from_fn(&net, &grid, |_, _| 0.0, quad0(2), 1.0);
        let s = FlowState::new(vec![vec![1.0; 10]], vec![0.0, 0.0], &en, &net, &grid).unwrap();
        let next = flow_step(&s, 0.01, &en, &net, &grid).unwrap();
        for x in &next.rho[0] {
            assert!((x - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn diffusion_relaxes_with_decreasing_energy() {
        let net = fixtures::segment(1.0);
        let grid = GridSpec::uniform(&net, 40, 1).unwrap();
        let en = EnergySpec::from_fn(&net, &grid, |_, _| 0.0, quad0(2), 1.0);
        let rho: Vec<f64> = (0..40)
            .map(|c| {
                let x = grid.cell_center(0, c);
                (-(x - 0.3f64).powi(2) / 0.005).exp()
            })
            .collect();
        let m: f64 = rho.iter().sum::<f64>() * grid.dx(0);
        let rho: Vec<f64> = rho.iter().map(|x| x / m).collect();
        let s = FlowState::new(vec![rho], vec![0.0, 0.0], &en, &net, &grid).unwrap();
        let sim = simulate(&s, 10.0, 0.01, &en, &net, &grid, 100).unwrap();
        assert_eq!(sim.energy_increases, 0);
        assert!(sim.max_mass_drift < 1e-12);
        let last = sim.states.last().unwrap();
        assert!((last.t - 10.0).abs() < 1e-9);
        for x in &last.rho[0] {
            assert!((x - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn transmission_condition_at_equilibrium() {
        let net = fixtures::path2();
        let grid = GridSpec::uniform(&net, 20, 1).unwrap();
        let en = EnergySpec::from_fn(&net, &grid, |j, _| if j == 1 { 2f64.ln() } else { 0.0 }, quad0(3), 1.0);
        let s = FlowState::new(vec![vec![1.0; 20], vec![0.0; 20]], vec![0.0; 3], &en, &net, &grid).unwrap();
        let sim = simulate(&s, 50.0, 0.05, &en, &net, &grid, 1000).unwrap();
        let last = sim.states.last().unwrap();
        assert!(transmission_defect(last, &en, &net, &grid) < 0.01);
        // edge 1 carries twice the density of edge 2 everywhere
        for (a, b) in last.rho[0].iter().zip(&last.rho[1]) {
            assert!((a / b - 2.0).abs() < 0.02, "{a} {b}");
        }
        assert_eq!(sim.energy_increases, 0);
    }

    #[test]
    fn vertex_exchange_conserves_mass() {
        let net = fixtures::y_graph();
        let grid = GridSpec::uniform(&net, 12, 1).unwrap();
        let vertex = vec![VertexEnergy::Entropy; 4];
        let en = EnergySpec::from_fn(&net, &grid, |j, x| 0.3 * j as f64 * x, vertex, 1.0);
        let rho = (0..3).map(|j| (0..12).map(|c| 0.2 + 0.05 * ((j + c) % 5) as f64).collect()).collect();
        let s = FlowState::new(rho, vec![0.05, 0.1, 0.02, 0.07], &en, &net, &grid).unwrap();
        let sim = simulate(&s, 2.0, 0.005, &en, &net, &grid, 50).unwrap();
        assert!(sim.max_mass_drift < 1e-10, "{}", sim.max_mass_drift);
        assert_eq!(sim.energy_increases, 0);
    }

    #[test]
    fn cfl_violation_and_empty_vertices() {
        let net = fixtures::segment(1.0);
        let grid = GridSpec::uniform(&net, 10, 1).unwrap();
        let en = EnergySpec::from_fn(&net, &grid, |_, x| 50.0 * x, quad0(2), 1.0);
        let s = FlowState::new(vec![vec![1.0; 10]], vec![0.0, 0.0], &en, &net, &grid).unwrap();
        assert!(matches!(flow_step(&s, 0.01, &en, &net, &grid), Err(FlowError::Cfl { .. })));
        assert!(flow_step(&s, 0.0005, &en, &net, &grid).is_ok());

        let en = EnergySpec::from_fn(&net, &grid, |_, _| 0.0, vec![VertexEnergy::Entropy; 2], 1.0);
        let mut s = FlowState::new(vec![vec![1.0; 10]], vec![0.1, 0.0], &en, &net, &grid).unwrap();
        assert!(flow_step(&s, 0.01, &en, &net, &grid).is_ok());
        assert!(energy_eval(&s, &en, &grid).is_finite());
        s.gamma = vec![0.1, 0.2];
        assert!(flow_step(&s, 0.01, &en, &net, &grid).is_ok());
    }

    #[test]
    fn large_kappa_freezes_vertices() {
        let net = fixtures::path2();
        let grid = GridSpec::uniform(&net, 10, 1).unwrap();
        let movement = |kappa: f64| {
            let vertex = vec![VertexEnergy::Quadratic { c: 1.0, target: 0.0 }; 3];
            let en = EnergySpec::from_fn(&net, &grid, |_, _| 0.0, vertex, kappa);
            let s = FlowState::new(vec![vec![0.4; 10], vec![0.4; 10]], vec![0.1, 0.05, 0.05], &en, &net, &grid).unwrap();
            let sim = simulate(&s, 1.0, 0.01, &en, &net, &grid, 1).unwrap();
            sim.states.iter().map(|st| st.gamma.iter().zip(&s.gamma).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)).fold(0.0, f64::max)
        };
        let ks = [1.0, 4.0, 16.0];
        let m: Vec<f64> = ks.iter().map(|&k| movement(k)).collect();
        let slope = -crate::metrics::loglog_slope(&ks, &m);
        assert!(slope >= 1.8, "{m:?} slope {slope}");
    }
}
