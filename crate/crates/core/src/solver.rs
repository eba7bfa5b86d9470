//! Primal-dual solver for the discrete transport problem.
//!
//! Unknowns are the interior time nodes of `ρ` and `γ` plus all fluxes `F`
//! and exchange rates `f`. The discrete continuity system `D U = b` is kept
//! exactly by a weighted projection (envelope Cholesky of `D W⁻¹ Dᵀ`), the
//! action is handled through the paraboloid projection at every space-time
//! point, and nonnegativity of the nodes enters as a separate dual block.
//!
//! The stopping rule is a certified duality gap. Row multipliers of the
//! continuity system are potentials; after a per-time-slice shift they are an
//! exact discrete Hamilton-Jacobi subsolution, so the dual value is a true
//! lower bound. The primal value is evaluated on a strictly feasible
//! nonnegative repair of the iterate.

use serde::{Deserialize, Serialize};

use crate::action::{action_eval, project_paraboloid};
use crate::error::SolveError;
use crate::grid::{ce_residual, Endpoints, GridSpec, TrajectoryField};
use crate::linalg::{Cholesky, SparseRows};
use crate::netgraph::{total_mass, Network};

/// How vertex masses may change in time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VertexMode {
    /// Exchange priced by the Fisher-Rao cost with coupling constant `kappa`.
    Exchange { kappa: f64 },
    /// Exchange without cost (`kappa = 0`).
    Free,
    /// Vertex masses held constant; incident fluxes obey Kirchhoff balance.
    Frozen,
}

impl VertexMode {
    pub fn from_kappa(kappa: f64) -> Self {
        if kappa == 0.0 {
            VertexMode::Free
        } else {
            VertexMode::Exchange { kappa }
        }
    }

    fn has_vertex_vars(self) -> bool {
        !matches!(self, VertexMode::Frozen)
    }

    fn kappa(self) -> Option<f64> {
        match self {
            VertexMode::Exchange { kappa } => Some(kappa),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// Residual-balancing adaptation of the primal/dual step ratio.
    Adaptive,
    /// Fixed steps; `tau * sigma * ‖K‖²` must stay below 1.
    Fixed { tau: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub max_iters: usize,
    pub tol_ce: f64,
    pub tol_gap: f64,
    pub relaxation: f64,
    pub steps: StepRule,
    /// Iterations between certificate evaluations.
    pub check_every: usize,
    /// Lower bound imposed on every interior density node.
    pub density_floor: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            max_iters: 100_000,
            tol_ce: 1e-8,
            tol_gap: 1e-6,
            relaxation: 1.8,
            steps: StepRule::Adaptive,
            check_every: 50,
            density_floor: 0.0,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), SolveError> {
        let bad = |m: &str| Err(SolveError::Parameter(m.to_string()));
        if !(self.tol_ce > 0.0 && self.tol_gap > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(1.0..2.0).contains(&self.relaxation) {
            return bad("relaxation must lie in [1, 2)");
        }
        if self.check_every == 0 || self.max_iters == 0 {
            return bad("iteration counts must be positive");
        }
        if !(self.density_floor >= 0.0) {
            return bad("density floor must be nonnegative");
        }
        if let StepRule::Fixed { tau, sigma } = self.steps {
            if !(tau > 0.0 && sigma > 0.0) {
                return bad("steps must be positive");
            }
        }
        Ok(())
    }
}

/// Continuity-system multipliers, one per time interval.
///
/// `phi[j][k * N_j + c]` belongs to cell `c` of edge `j` during interval `k`,
/// `psi[i][k]` to the vertex balance and `lambda[i][k]` to the coupling of
/// vertex `i` with its incident fluxes (the vertex value of `φ`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPotentials {
    pub phi: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
}

impl DualPotentials {
    pub fn zeros(grid: &GridSpec, n_vertices: usize) -> Self {
        let p = grid.steps();
        DualPotentials {
            phi: (0..grid.n_edges()).map(|j| vec![0.0; p * grid.cells(j)]).collect(),
            psi: vec![vec![0.0; p]; n_vertices],
            lambda: vec![vec![0.0; p]; n_vertices],
        }
    }

    /// Samples smooth potentials at interval midpoints and cell centers; the
    /// vertex value is the mean of the traces of `phi` on incident edges.
    pub fn from_functions(phi: impl Fn(usize, f64, f64) -> f64, psi: impl Fn(usize, f64) -> f64, net: &Network, grid: &GridSpec) -> Self {
        let p = grid.steps();
        let mut d = Self::zeros(grid, net.n_vertices());
        for k in 0..p {
            let t = (k as f64 + 0.5) * grid.dt();
            for j in 0..grid.n_edges() {
                let n = grid.cells(j);
                for c in 0..n {
                    d.phi[j][k * n + c] = phi(j, t, grid.cell_center(j, c));
                }
            }
            for i in 0..net.n_vertices() {
                d.psi[i][k] = psi(i, t);
                let inc = net.incident(i);
                d.lambda[i][k] = inc
                    .iter()
                    .map(|&j| {
                        let e = &net.edges()[j];
                        phi(j, t, if e.tail == i { 0.0 } else { e.length })
                    })
                    .sum::<f64>()
                    / inc.len() as f64;
            }
        }
        d
    }

    fn check_shape(&self, grid: &GridSpec, n_vertices: usize) -> Result<(), SolveError> {
        let p = grid.steps();
        let ok = self.phi.len() == grid.n_edges()
            && self.phi.iter().enumerate().all(|(j, v)| v.len() == p * grid.cells(j))
            && self.psi.len() == n_vertices
            && self.lambda.len() == n_vertices
            && self.psi.iter().chain(&self.lambda).all(|v| v.len() == p);
        if ok {
            Ok(())
        } else {
            Err(SolveError::Parameter("dual potentials do not match the grid".into()))
        }
    }

    /// Mean over incident edges of the boundary-cell potential next to `i`.
    pub fn trace_mean(&self, net: &Network, grid: &GridSpec, i: usize, k: usize) -> f64 {
        let inc = net.incident(i);
        inc.iter()
            .map(|&j| {
                let n = grid.cells(j);
                let c = if net.edges()[j].tail == i { 0 } else { n - 1 };
                self.phi[j][k * n + c]
            })
            .sum::<f64>()
            / inc.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub value: f64,
    pub dual_value: f64,
    pub rel_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub tau: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub mode: VertexMode,
    pub value: f64,
    pub dual_value: f64,
    pub gap: f64,
    pub rel_gap: f64,
    pub ce_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<HistoryEntry>,
    pub geodesic: TrajectoryField,
    pub duals: DualPotentials,
}

/// Relative gap with a floor on the scale so that trivial problems (value
/// near zero) are judged in absolute terms.
pub fn relative_gap(value: f64, dual: f64) -> f64 {
    (value - dual) / value.abs().max(1e-3)
}

pub fn solve_geodesic(
    net: &Network,
    grid: &GridSpec,
    endpoints: &Endpoints,
    kappa: f64,
    params: &SolverParams,
) -> Result<SolveReport, SolveError> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(SolveError::Parameter(format!("kappa must be positive, got {kappa}")));
    }
    check_unit_mass(net, endpoints)?;
    solve_with_mode(net, grid, endpoints, VertexMode::Exchange { kappa }, params)
}

fn check_unit_mass(net: &Network, endpoints: &Endpoints) -> Result<(), SolveError> {
    let m0 = total_mass(&endpoints.initial, net)?;
    let m1 = total_mass(&endpoints.terminal, net)?;
    if (m0 - 1.0).abs() > 1e-12 || (m1 - 1.0).abs() > 1e-12 {
        return Err(SolveError::MassMismatch { initial: m0, terminal: m1 });
    }
    Ok(())
}

/// General entry point: endpoints need equal (not necessarily unit) mass.
pub fn solve_with_mode(
    net: &Network,
    grid: &GridSpec,
    endpoints: &Endpoints,
    mode: VertexMode,
    params: &SolverParams,
) -> Result<SolveReport, SolveError> {
    params.validate()?;
    let problem = Problem::new(net, grid, endpoints, mode, params.density_floor)?;
    Ok(problem.run(params))
}

/// Weight of the positive path in the repair anchor.
const ANCHOR_SHARE: f64 = 0.02;
/// Iterations between residual-balancing step updates.
const BALANCE_EVERY: usize = 10;

/// Index bookkeeping and the assembled constraint system.
struct Problem<'a> {
    net: &'a Network,
    grid: &'a GridSpec,
    ends: &'a Endpoints,
    mode: VertexMode,
    floor: f64,
    p: usize,
    rho_off: Vec<usize>,
    gamma_off: usize,
    n_nodes: usize,
    flux_off: Vec<usize>,
    exch_off: usize,
    n_vars: usize,
    /// Primal metric.
    w: Vec<f64>,
    d: SparseRows,
    b: Vec<f64>,
    chol: Cholesky,
    row_e: Vec<usize>,
    row_v: usize,
    row_c: usize,
    rows_per_step: usize,
    /// Edge points are `(j, k, e)`; vertex points follow them.
    pt_off: Vec<usize>,
    n_edge_pts: usize,
    n_pts: usize,
}

struct Point {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Point {
    fn zeros(n: usize) -> Self {
        Point { a: vec![0.0; n], b: vec![0.0; n] }
    }
}

impl<'a> Problem<'a> {
    fn new(net: &'a Network, grid: &'a GridSpec, ends: &'a Endpoints, mode: VertexMode, floor: f64) -> Result<Self, SolveError> {
        ends.check_shape(grid, net.n_vertices())?;
        if !ends.initial.is_nonnegative() {
            return Err(SolveError::NegativeMass("initial measure"));
        }
        if !ends.terminal.is_nonnegative() {
            return Err(SolveError::NegativeMass("terminal measure"));
        }
        let m0 = total_mass(&ends.initial, net)?;
        let m1 = total_mass(&ends.terminal, net)?;
        if (m0 - m1).abs() > 1e-12 * m0.abs().max(1.0) {
            return Err(SolveError::MassMismatch { initial: m0, terminal: m1 });
        }
        if mode == VertexMode::Frozen {
            let g0 = &ends.initial.vertex_masses;
            let g1 = &ends.terminal.vertex_masses;
            if g0.iter().zip(g1).any(|(a, b)| (a - b).abs() > 1e-12) {
                return Err(SolveError::Parameter("frozen vertices need equal initial and terminal vertex masses".into()));
            }
        }
        if let VertexMode::Exchange { kappa } = mode {
            if !(kappa > 0.0 && kappa.is_finite()) {
                return Err(SolveError::Parameter(format!("kappa must be positive, got {kappa}")));
            }
        }

        let p = grid.steps();
        let nv = net.n_vertices();
        let interior = p - 1;
        let mut rho_off = Vec::with_capacity(grid.n_edges());
        let mut acc = 0;
        for j in 0..grid.n_edges() {
            rho_off.push(acc);
            acc += interior * grid.cells(j);
        }
        let gamma_off = acc;
        if mode.has_vertex_vars() {
            acc += interior * nv;
        }
        let n_nodes = acc;
        let mut flux_off = Vec::with_capacity(grid.n_edges());
        for j in 0..grid.n_edges() {
            flux_off.push(acc);
            acc += p * (grid.cells(j) + 1);
        }
        let exch_off = acc;
        if mode.has_vertex_vars() {
            acc += p * nv;
        }
        let n_vars = acc;

        let mut pt_off = Vec::with_capacity(grid.n_edges());
        let mut n_edge_pts = 0;
        for j in 0..grid.n_edges() {
            pt_off.push(n_edge_pts);
            n_edge_pts += p * (grid.cells(j) + 1);
        }
        let n_pts = n_edge_pts + if mode.kappa().is_some() { p * nv } else { 0 };

        let mut row_e = Vec::with_capacity(grid.n_edges());
        let mut r = 0;
        for j in 0..grid.n_edges() {
            row_e.push(r);
            r += grid.cells(j);
        }
        let row_v = r;
        if mode.has_vertex_vars() {
            r += nv;
        }
        let row_c = r;
        r += nv;
        let rows_per_step = r;

        let mut prob = Problem {
            net,
            grid,
            ends,
            mode,
            floor,
            p,
            rho_off,
            gamma_off,
            n_nodes,
            flux_off,
            exch_off,
            n_vars,
            w: Vec::new(),
            d: SparseRows::new(n_vars),
            b: Vec::new(),
            chol: SparseRows::new(0).weighted_gram(&[]).cholesky().expect("empty factorization"),
            row_e,
            row_v,
            row_c,
            rows_per_step,
            pt_off,
            n_edge_pts,
            n_pts,
        };
        prob.w = prob.metric();
        let (d, b) = prob.assemble();
        let winv: Vec<f64> = prob.w.iter().map(|x| 1.0 / x).collect();
        prob.chol = d.weighted_gram(&winv).cholesky().ok_or(SolveError::Singular)?;
        prob.d = d;
        prob.b = b;
        Ok(prob)
    }

    fn rho_idx(&self, j: usize, k: usize, c: usize) -> Option<usize> {
        (k >= 1 && k < self.p).then(|| self.rho_off[j] + (k - 1) * self.grid.cells(j) + c)
    }

    fn gamma_idx(&self, i: usize, k: usize) -> Option<usize> {
        (self.mode.has_vertex_vars() && k >= 1 && k < self.p).then(|| self.gamma_off + i * (self.p - 1) + k - 1)
    }

    fn flux_idx(&self, j: usize, k: usize, e: usize) -> usize {
        self.flux_off[j] + k * (self.grid.cells(j) + 1) + e
    }

    fn exch_idx(&self, i: usize, k: usize) -> usize {
        self.exch_off + i * self.p + k
    }

    fn metric(&self) -> Vec<f64> {
        let dt = self.grid.dt();
        let mut w = vec![0.0; self.n_vars];
        for j in 0..self.grid.n_edges() {
            let n = self.grid.cells(j);
            for k in 0..self.p {
                if let Some(base) = self.rho_idx(j, k, 0) {
                    w[base..base + n].fill(self.grid.dx(j) * dt);
                }
                for e in 0..=n {
                    w[self.flux_idx(j, k, e)] = self.grid.face_weight(j, e) * dt;
                }
            }
        }
        if self.mode.has_vertex_vars() {
            for i in 0..self.net.n_vertices() {
                for k in 0..self.p {
                    if let Some(g) = self.gamma_idx(i, k) {
                        w[g] = dt;
                    }
                    w[self.exch_idx(i, k)] = dt;
                }
            }
        }
        w
    }

    /// Rows ordered by time interval; the last row is linearly dependent on
    /// the others (global mass balance) and is dropped.
    fn assemble(&self) -> (SparseRows, Vec<f64>) {
        let dt = self.grid.dt();
        let p = self.p;
        let ends = self.ends;
        let mut d = SparseRows::new(self.n_vars);
        let mut b = Vec::new();
        let mut row = Vec::with_capacity(8);
        for k in 0..p {
            for j in 0..self.grid.n_edges() {
                let n = self.grid.cells(j);
                let dx = self.grid.dx(j);
                for c in 0..n {
                    row.clear();
                    let mut rhs = 0.0;
                    match self.rho_idx(j, k + 1, c) {
                        Some(ix) => row.push((ix, dx)),
                        None => rhs -= dx * ends.terminal.edge_densities[j][c],
                    }
                    match self.rho_idx(j, k, c) {
                        Some(ix) => row.push((ix, -dx)),
                        None => rhs += dx * ends.initial.edge_densities[j][c],
                    }
                    row.push((self.flux_idx(j, k, c + 1), dt));
                    row.push((self.flux_idx(j, k, c), -dt));
                    d.push_row(&row);
                    b.push(rhs);
                }
            }
            if self.mode.has_vertex_vars() {
                for i in 0..self.net.n_vertices() {
                    row.clear();
                    let mut rhs = 0.0;
                    match self.gamma_idx(i, k + 1) {
                        Some(ix) => row.push((ix, 1.0)),
                        None => rhs -= ends.terminal.vertex_masses[i],
                    }
                    match self.gamma_idx(i, k) {
                        Some(ix) => row.push((ix, -1.0)),
                        None => rhs += ends.initial.vertex_masses[i],
                    }
                    row.push((self.exch_idx(i, k), -dt));
                    d.push_row(&row);
                    b.push(rhs);
                }
            }
            for i in 0..self.net.n_vertices() {
                if k + 1 == p && i + 1 == self.net.n_vertices() {
                    break;
                }
                row.clear();
                if self.mode.has_vertex_vars() {
                    row.push((self.exch_idx(i, k), dt));
                }
                for &j in self.net.incident(i) {
                    let edge = &self.net.edges()[j];
                    if edge.head == i {
                        row.push((self.flux_idx(j, k, self.grid.cells(j)), -dt));
                    }
                    if edge.tail == i {
                        row.push((self.flux_idx(j, k, 0), dt));
                    }
                }
                d.push_row(&row);
                b.push(0.0);
            }
        }
        (d, b)
    }

    fn rho_value(&self, u: &[f64], with_ends: bool, j: usize, k: usize, c: usize) -> f64 {
        match self.rho_idx(j, k, c) {
            Some(ix) => u[ix],
            None if !with_ends => 0.0,
            None if k == 0 => self.ends.initial.edge_densities[j][c],
            None => self.ends.terminal.edge_densities[j][c],
        }
    }

    fn gamma_value(&self, u: &[f64], with_ends: bool, i: usize, k: usize) -> f64 {
        match self.gamma_idx(i, k) {
            Some(ix) => u[ix],
            None if !with_ends => 0.0,
            None if k == 0 => self.ends.initial.vertex_masses[i],
            None => self.ends.terminal.vertex_masses[i],
        }
    }

    fn point_weight_edge(&self, j: usize, e: usize) -> f64 {
        self.grid.face_weight(j, e) * self.grid.dt()
    }

    /// Interpolation to space-time points; affine when `with_ends`.
    fn k_apply(&self, u: &[f64], with_ends: bool, out: &mut Point) {
        let p = self.p;
        for j in 0..self.grid.n_edges() {
            let n = self.grid.cells(j);
            for k in 0..p {
                let base = self.pt_off[j] + k * (n + 1);
                let r0 = |c| self.rho_value(u, with_ends, j, k, c);
                let r1 = |c| self.rho_value(u, with_ends, j, k + 1, c);
                let mut prev = r0(0) + r1(0);
                out.a[base] = 0.5 * prev;
                for e in 1..n {
                    let cur = r0(e) + r1(e);
                    out.a[base + e] = 0.25 * (prev + cur);
                    prev = cur;
                }
                out.a[base + n] = 0.5 * prev;
                let fo = self.flux_idx(j, k, 0);
                out.b[base..=base + n].copy_from_slice(&u[fo..=fo + n]);
            }
        }
        if self.mode.kappa().is_some() {
            for i in 0..self.net.n_vertices() {
                for k in 0..p {
                    let pt = self.n_edge_pts + i * p + k;
                    out.a[pt] = 0.5 * (self.gamma_value(u, with_ends, i, k) + self.gamma_value(u, with_ends, i, k + 1));
                    out.b[pt] = u[self.exch_idx(i, k)];
                }
            }
        }
    }

    /// `out = Kᵀ Ω z` for point duals `z` and node duals `zn`.
    fn kt_apply(&self, z: &Point, zn: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (o, (&wn, &y)) in out[..self.n_nodes].iter_mut().zip(self.w.iter().zip(zn)) {
            *o = wn * y;
        }
        let p = self.p;
        for j in 0..self.grid.n_edges() {
            let n = self.grid.cells(j);
            for k in 0..p {
                let base = self.pt_off[j] + k * (n + 1);
                let fo = self.flux_idx(j, k, 0);
                for e in 0..=n {
                    out[fo + e] += self.point_weight_edge(j, e) * z.b[base + e];
                }
                // density weights: boundary faces ½ per node, interior ¼
                let wa = |e: usize| self.point_weight_edge(j, e) * z.a[base + e];
                for kk in [k, k + 1] {
                    if let Some(ix) = self.rho_idx(j, kk, 0) {
                        for c in 0..n {
                            let mut s = 0.25 * (wa(c) + wa(c + 1));
                            if c == 0 {
                                s += 0.25 * wa(0);
                            }
                            if c == n - 1 {
                                s += 0.25 * wa(n);
                            }
                            out[ix + c] += s;
                        }
                    }
                }
            }
        }
        if self.mode.kappa().is_some() {
            let dt = self.grid.dt();
            for i in 0..self.net.n_vertices() {
                for k in 0..p {
                    let pt = self.n_edge_pts + i * p + k;
                    out[self.exch_idx(i, k)] += dt * z.b[pt];
                    for kk in [k, k + 1] {
                        if let Some(ix) = self.gamma_idx(i, kk) {
                            out[ix] += 0.5 * dt * z.a[pt];
                        }
                    }
                }
            }
        }
    }

    fn point_weight(&self, pt: usize) -> f64 {
        if pt < self.n_edge_pts {
            let j = self.pt_off.partition_point(|&o| o <= pt) - 1;
            let e = (pt - self.pt_off[j]) % (self.grid.cells(j) + 1);
            self.point_weight_edge(j, e)
        } else {
            self.grid.dt()
        }
    }

    fn point_weights(&self) -> Vec<f64> {
        (0..self.n_pts).map(|pt| self.point_weight(pt)).collect()
    }

    fn point_curvature(&self, pt: usize) -> f64 {
        if pt < self.n_edge_pts {
            1.0
        } else {
            let kappa = self.mode.kappa().expect("vertex points need kappa");
            kappa * kappa
        }
    }

    /// Solves `(D W⁻¹ Dᵀ) η = r` in place.
    fn gram_solve(&self, r: &mut [f64]) {
        self.chol.solve_in_place(r);
    }

    /// Weighted projection onto the affine continuity set.
    fn project(&self, x: &mut [f64], scratch_rows: &mut [f64], scratch_vars: &mut [f64]) {
        self.d.mul(x, scratch_rows);
        for (r, b) in scratch_rows.iter_mut().zip(&self.b) {
            *r -= b;
        }
        self.gram_solve(scratch_rows);
        self.d.mul_t(scratch_rows, scratch_vars);
        for ((xi, s), w) in x.iter_mut().zip(scratch_vars.iter()).zip(&self.w) {
            *xi -= s / w;
        }
    }

    /// Projection of a direction onto the tangent space `ker D`.
    fn project_tangent(&self, x: &mut [f64], scratch_rows: &mut [f64], scratch_vars: &mut [f64]) {
        self.d.mul(x, scratch_rows);
        self.gram_solve(scratch_rows);
        self.d.mul_t(scratch_rows, scratch_vars);
        for ((xi, s), w) in x.iter_mut().zip(scratch_vars.iter()).zip(&self.w) {
            *xi -= s / w;
        }
    }

    fn wnorm(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.w).map(|(v, w)| w * v * v).sum::<f64>().sqrt()
    }

    /// Largest eigenvalue of `W⁻¹ Kᵀ Ω K` by power iteration.
    fn operator_norm_sq(&self) -> f64 {
        let mut v: Vec<f64> = (0..self.n_vars).map(|i| 1.0 + 0.5 * ((i as f64) * 0.618_033_988_75).fract()).collect();
        let mut pts = Point::zeros(self.n_pts);
        let mut out = vec![0.0; self.n_vars];
        let mut est = 0.0;
        for _ in 0..50 {
            let nv = self.wnorm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            self.k_apply(&v, false, &mut pts);
            let nodes = v[..self.n_nodes].to_vec();
            self.kt_apply(&pts, &nodes, &mut out);
            for (o, w) in out.iter_mut().zip(&self.w) {
                *o /= w;
            }
            est = self.wnorm(&out);
            std::mem::swap(&mut v, &mut out);
        }
        est
    }

    fn seed(&self) -> Vec<f64> {
        let mut u = vec![0.0; self.n_vars];
        let p = self.p as f64;
        for j in 0..self.grid.n_edges() {
            for k in 1..self.p {
                let t = k as f64 / p;
                for c in 0..self.grid.cells(j) {
                    let ix = self.rho_idx(j, k, c).unwrap();
                    u[ix] = (1.0 - t) * self.ends.initial.edge_densities[j][c] + t * self.ends.terminal.edge_densities[j][c];
                }
            }
        }
        for i in 0..self.net.n_vertices() {
            for k in 1..self.p {
                if let Some(ix) = self.gamma_idx(i, k) {
                    let t = k as f64 / p;
                    u[ix] = (1.0 - t) * self.ends.initial.vertex_masses[i] + t * self.ends.terminal.vertex_masses[i];
                }
            }
        }
        u
    }

    /// Strictly positive admissible path: initial data → spread-out measure
    /// → terminal data, with fluxes recovered exactly from the mass changes.
    fn positive_path(&self) -> Vec<f64> {
        let p = self.p;
        let nv = self.net.n_vertices();
        let ne = self.grid.n_edges();
        let total_len: f64 = self.net.edges().iter().map(|e| e.length).sum();
        let (mid_rho, mid_gamma): (Vec<f64>, Vec<f64>) = if self.mode.has_vertex_vars() {
            let share = total_len / ne as f64 * 0.5;
            let total = total_mass(&self.ends.initial, self.net).unwrap_or(1.0);
            let dens = total / (total_len + share * nv as f64);
            ((0..ne).map(|_| dens).collect(), vec![dens * share; nv])
        } else {
            let gam = self.ends.initial.vertex_masses.clone();
            let edge_mass = total_mass(&self.ends.initial, self.net).unwrap_or(1.0) - gam.iter().sum::<f64>();
            ((0..ne).map(|_| edge_mass / total_len).collect(), gam)
        };
        // time profile: fraction of the way between (start, mid) or (mid, end)
        let rho_at = |j: usize, k: usize, c: usize| -> f64 {
            let t = k as f64 / p as f64;
            let r0 = self.ends.initial.edge_densities[j][c];
            let r1 = self.ends.terminal.edge_densities[j][c];
            if t <= 0.5 {
                let s = 2.0 * t;
                (1.0 - s) * r0 + s * mid_rho[j]
            } else {
                let s = 2.0 * t - 1.0;
                (1.0 - s) * mid_rho[j] + s * r1
            }
        };
        let gamma_at = |i: usize, k: usize| -> f64 {
            let t = k as f64 / p as f64;
            let g0 = self.ends.initial.vertex_masses[i];
            let g1 = self.ends.terminal.vertex_masses[i];
            if t <= 0.5 {
                let s = 2.0 * t;
                (1.0 - s) * g0 + s * mid_gamma[i]
            } else {
                let s = 2.0 * t - 1.0;
                (1.0 - s) * mid_gamma[i] + s * g1
            }
        };

        let mut u = vec![0.0; self.n_vars];
        let dt = self.grid.dt();
        for k in 0..p {
            // per-edge outflow deficit m_j: F_head = F_tail − m_j
            let mut deficit = vec![0.0; ne];
            let mut partial: Vec<Vec<f64>> = Vec::with_capacity(ne);
            for j in 0..ne {
                let n = self.grid.cells(j);
                let dx = self.grid.dx(j);
                let mut acc = 0.0;
                let mut cum = Vec::with_capacity(n + 1);
                cum.push(0.0);
                for c in 0..n {
                    if let Some(ix) = self.rho_idx(j, k + 1, c) {
                        u[ix] = rho_at(j, k + 1, c);
                    }
                    acc += dx / dt * (rho_at(j, k + 1, c) - rho_at(j, k, c));
                    cum.push(acc);
                }
                deficit[j] = acc;
                partial.push(cum);
            }
            let mut rate = vec![0.0; nv];
            if self.mode.has_vertex_vars() {
                for (i, r) in rate.iter_mut().enumerate() {
                    *r = (gamma_at(i, k + 1) - gamma_at(i, k)) / dt;
                    if let Some(ix) = self.gamma_idx(i, k + 1) {
                        u[ix] = gamma_at(i, k + 1);
                    }
                    u[self.exch_idx(i, k)] = *r;
                }
            }
            // Σ_{head=i}(t_j − m_j) − Σ_{tail=i} t_j = rate_i, least-norm in t
            let tails = self.tail_fluxes(&deficit, &rate, &vec![0.0; ne]);
            for j in 0..ne {
                let n = self.grid.cells(j);
                for e in 0..=n {
                    u[self.flux_idx(j, k, e)] = tails[j] - partial[j][e];
                }
            }
        }
        u
    }

    /// Tail fluxes `t` closest to `guess` with `Σ_{head=i}(t_j − m_j) − Σ_{tail=i} t_j = rate_i`.
    fn tail_fluxes(&self, deficit: &[f64], rate: &[f64], guess: &[f64]) -> Vec<f64> {
        let nv = self.net.n_vertices();
        let ne = self.grid.n_edges();
        // B t = r with B_{i j} = [head=i] − [tail=i]; t = g + Bᵀ y with (B Bᵀ) y = r − B g
        let mut r: Vec<f64> = rate.to_vec();
        for (j, e) in self.net.edges().iter().enumerate() {
            r[e.head] += deficit[j] - guess[j];
            r[e.tail] += guess[j];
        }
        let mut lap = vec![vec![0.0; nv - 1]; nv - 1];
        for e in self.net.edges() {
            for (a, b) in [(e.head, e.tail), (e.tail, e.head)] {
                if a < nv - 1 {
                    lap[a][a] += 1.0;
                    if b < nv - 1 {
                        lap[a][b] -= 1.0;
                    }
                }
            }
        }
        let mut y = crate::linalg::solve_dense(lap, r[..nv - 1].to_vec()).unwrap_or_else(|| vec![0.0; nv - 1]);
        y.push(0.0);
        (0..ne)
            .map(|j| {
                let e = &self.net.edges()[j];
                guess[j] + y[e.head] - y[e.tail]
            })
            .collect()
    }

    /// Clips nodes to the floor, restores each slice mass by scaling the part
    /// above the floor, and recomputes fluxes exactly from the mass changes.
    /// Tail fluxes stay as close as possible to those of `u`.
    fn reflux(&self, u: &[f64]) -> Vec<f64> {
        let p = self.p;
        let nv = self.net.n_vertices();
        let ne = self.grid.n_edges();
        let fl = self.floor;
        let mut v = u.to_vec();
        for x in &mut v[..self.n_nodes] {
            *x = x.max(fl);
        }
        let target = total_mass(&self.ends.initial, self.net).unwrap_or(1.0);
        for k in 1..p {
            // mass = fixed + floor·cap + excess
            let (mut fixed, mut cap, mut excess) = (0.0, 0.0, 0.0);
            for j in 0..ne {
                let dx = self.grid.dx(j);
                for c in 0..self.grid.cells(j) {
                    let ix = self.rho_idx(j, k, c).unwrap();
                    cap += dx;
                    excess += dx * (v[ix] - fl);
                }
            }
            for i in 0..nv {
                match self.gamma_idx(i, k) {
                    Some(ix) => {
                        cap += 1.0;
                        excess += v[ix] - fl;
                    }
                    None => fixed += self.ends.initial.vertex_masses[i],
                }
            }
            let want = target - fixed - fl * cap;
            if excess > 0.0 && want >= 0.0 {
                let s = want / excess;
                for j in 0..ne {
                    for c in 0..self.grid.cells(j) {
                        let ix = self.rho_idx(j, k, c).unwrap();
                        v[ix] = fl + s * (v[ix] - fl);
                    }
                }
                for i in 0..nv {
                    if let Some(ix) = self.gamma_idx(i, k) {
                        v[ix] = fl + s * (v[ix] - fl);
                    }
                }
            }
        }
        let dt = self.grid.dt();
        for k in 0..p {
            let mut deficit = vec![0.0; ne];
            let mut partial: Vec<Vec<f64>> = Vec::with_capacity(ne);
            let mut guess = vec![0.0; ne];
            for j in 0..ne {
                let n = self.grid.cells(j);
                let dx = self.grid.dx(j);
                let mut acc = 0.0;
                let mut cum = Vec::with_capacity(n + 1);
                cum.push(0.0);
                for c in 0..n {
                    let d = self.rho_value(&v, true, j, k + 1, c) - self.rho_value(&v, true, j, k, c);
                    acc += dx / dt * d;
                    cum.push(acc);
                }
                deficit[j] = acc;
                partial.push(cum);
                guess[j] = u[self.flux_idx(j, k, 0)];
            }
            let mut rate = vec![0.0; nv];
            if self.mode.has_vertex_vars() {
                for (i, r) in rate.iter_mut().enumerate() {
                    *r = (self.gamma_value(&v, true, i, k + 1) - self.gamma_value(&v, true, i, k)) / dt;
                    v[self.exch_idx(i, k)] = *r;
                }
            }
            let tails = self.tail_fluxes(&deficit, &rate, &guess);
            for j in 0..ne {
                for e in 0..=self.grid.cells(j) {
                    v[self.flux_idx(j, k, e)] = tails[j] - partial[j][e];
                }
            }
        }
        v
    }

    fn action_of(&self, u: &[f64], pts: &mut Point) -> f64 {
        self.k_apply(u, true, pts);
        let mut total = 0.0;
        for pt in 0..self.n_pts {
            let a = pts.a[pt];
            let b = pts.b[pt];
            let val = if a > 0.0 {
                b * b / (2.0 * a)
            } else if b == 0.0 && a == 0.0 {
                0.0
            } else {
                return f64::INFINITY;
            };
            total += self.point_weight(pt) * self.point_curvature(pt) * val;
        }
        total
    }

    /// Nonnegative admissible point near `u`: clip and re-flux, then mix
    /// with the positive anchor if zero-density faces still carry flux.
    fn repair(&self, u: &[f64], pos: &[f64], pts: &mut Point) -> (Vec<f64>, f64) {
        let v = self.reflux(u);
        let mut theta_min = 0.0f64;
        for ix in 0..self.n_nodes {
            let (x, y) = (v[ix] - self.floor, pos[ix] - self.floor);
            if x < 0.0 {
                theta_min = theta_min.max(-x / (y - x));
            }
        }
        let mix = |t: f64| -> Vec<f64> { v.iter().zip(pos).map(|(a, b)| (1.0 - t) * a + t * b).collect() };
        let mut eval = |t: f64| {
            let v = self.action_of(&mix(t), pts);
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        };
        let mut best = (theta_min, eval(theta_min));
        // log-spaced scan finds the useful scale when the clipped point is infinite
        let mut scale = 1.0;
        for _ in 0..16 {
            scale *= 0.1;
            let t = theta_min + scale * (1.0 - theta_min);
            let f = eval(t);
            if f < best.1 {
                best = (t, f);
            }
        }
        let (mut lo, mut hi) = (theta_min, (best.0 * 10.0).min(1.0).max(theta_min));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = hi - g * (hi - lo);
        let mut x2 = lo + g * (hi - lo);
        let mut f1 = eval(x1);
        let mut f2 = eval(x2);
        for _ in 0..40 {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = eval(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = eval(x2);
            }
        }
        for (t, f) in [(x1, f1), (x2, f2)] {
            if f < best.1 {
                best = (t, f);
            }
        }
        (mix(best.0), best.1)
    }

    fn field_from(&self, u: &[f64]) -> TrajectoryField {
        let p = self.p;
        let nv = self.net.n_vertices();
        let mut f = TrajectoryField::zeros(self.grid, nv);
        for j in 0..self.grid.n_edges() {
            let n = self.grid.cells(j);
            for k in 0..=p {
                for c in 0..n {
                    f.rho[j][k * n + c] = self.rho_value(u, true, j, k, c);
                }
            }
            let fo = self.flux_idx(j, 0, 0);
            f.flux[j].copy_from_slice(&u[fo..fo + p * (n + 1)]);
        }
        for i in 0..nv {
            for k in 0..=p {
                f.gamma[i][k] =
                    if self.mode.has_vertex_vars() { self.gamma_value(u, true, i, k) } else { self.ends.initial.vertex_masses[i] };
            }
            if self.mode.has_vertex_vars() {
                for k in 0..p {
                    f.exchange[i][k] = u[self.exch_idx(i, k)];
                }
            }
        }
        f
    }

    /// Least-squares multipliers for the stationarity `Kᵀ Ω z + Dᵀ η = 0`.
    fn multipliers(&self, z: &Point, zn: &[f64]) -> DualPotentials {
        let mut g = vec![0.0; self.n_vars];
        self.kt_apply(z, zn, &mut g);
        for (x, w) in g.iter_mut().zip(&self.w) {
            *x = -*x / w;
        }
        let mut eta = vec![0.0; self.d.n_rows()];
        self.d.mul(&g, &mut eta);
        self.gram_solve(&mut eta);
        self.duals_from_rows(&eta)
    }

    fn duals_from_rows(&self, eta: &[f64]) -> DualPotentials {
        let nv = self.net.n_vertices();
        let mut d = DualPotentials::zeros(self.grid, nv);
        let at = |r: usize| eta.get(r).copied().unwrap_or(0.0);
        for k in 0..self.p {
            let base = k * self.rows_per_step;
            for j in 0..self.grid.n_edges() {
                let n = self.grid.cells(j);
                for c in 0..n {
                    d.phi[j][k * n + c] = at(base + self.row_e[j] + c);
                }
            }
            for i in 0..nv {
                if self.mode.has_vertex_vars() {
                    d.psi[i][k] = at(base + self.row_v + i);
                }
                d.lambda[i][k] = at(base + self.row_c + i);
            }
        }
        if self.mode == VertexMode::Free {
            d.lambda = d.psi.clone();
        }
        d
    }

    fn run(&self, params: &SolverParams) -> SolveReport {
        let n_rows = self.d.n_rows();
        let mut sr = vec![0.0; n_rows];
        let mut sv = vec![0.0; self.n_vars];

        let l2 = self.operator_norm_sq().max(1e-300);
        let (mut tau, mut sigma) = match params.steps {
            StepRule::Fixed { tau, sigma } => (tau, sigma),
            StepRule::Adaptive => {
                let s = 0.9 / l2.sqrt();
                (s, s)
            }
        };
        let adaptive = params.steps == StepRule::Adaptive;
        let mut alpha = 0.5;

        let omega = self.point_weights();
        let curv: Vec<f64> = (0..self.n_pts).map(|pt| self.point_curvature(pt)).collect();

        let mut u = self.seed();
        self.project(&mut u, &mut sr, &mut sv);
        let pos = self.positive_path();
        let mut anchor = pos.clone();
        let mut z = Point::zeros(self.n_pts);
        let mut zn = vec![0.0; self.n_nodes];

        let mut ut = vec![0.0; self.n_vars];
        let mut zt = Point::zeros(self.n_pts);
        let mut znt = vec![0.0; self.n_nodes];
        let mut grad = vec![0.0; self.n_vars];
        let mut extra = vec![0.0; self.n_vars];
        let mut kx = Point::zeros(self.n_pts);
        let mut scratch_pts = Point::zeros(self.n_pts);
        let mut dz = Point::zeros(self.n_pts);
        let mut du = vec![0.0; self.n_vars];

        let mut history = Vec::new();
        let mut best_primal: Option<(f64, Vec<f64>)> = None;
        let mut best_dual: Option<(f64, DualPotentials)> = None;
        let mut converged = false;
        let mut iterations = 0;
        let (mut pres, mut dres) = (0.0, 0.0);

        for it in 1..=params.max_iters {
            iterations = it;
            // primal step
            self.kt_apply(&z, &zn, &mut grad);
            for i in 0..self.n_vars {
                ut[i] = u[i] - tau * grad[i] / self.w[i];
            }
            self.project(&mut ut, &mut sr, &mut sv);
            // dual step at the extrapolated point
            for i in 0..self.n_vars {
                extra[i] = 2.0 * ut[i] - u[i];
            }
            self.k_apply(&extra, true, &mut kx);
            for pt in 0..self.n_pts {
                let (pa, pb) = project_paraboloid(z.a[pt] + sigma * kx.a[pt], z.b[pt] + sigma * kx.b[pt], curv[pt]);
                zt.a[pt] = pa;
                zt.b[pt] = pb;
            }
            for ix in 0..self.n_nodes {
                znt[ix] = (zn[ix] + sigma * (extra[ix] - self.floor)).min(0.0);
            }

            let check = it % params.check_every == 0 || it == params.max_iters;
            let balance = adaptive && it % BALANCE_EVERY == 0;
            if balance || check {
                // residuals of the fixed-point map
                for i in 0..self.n_vars {
                    du[i] = u[i] - ut[i];
                }
                for pt in 0..self.n_pts {
                    dz.a[pt] = z.a[pt] - zt.a[pt];
                    dz.b[pt] = z.b[pt] - zt.b[pt];
                }
                let dzn: Vec<f64> = zn.iter().zip(&znt).map(|(a, b)| a - b).collect();
                let mut kdz = vec![0.0; self.n_vars];
                self.kt_apply(&dz, &dzn, &mut kdz);
                let mut pr: Vec<f64> = (0..self.n_vars).map(|i| du[i] / tau - kdz[i] / self.w[i]).collect();
                self.project_tangent(&mut pr, &mut sr, &mut sv);
                pres = self.wnorm(&pr);
                self.k_apply(&du, false, &mut scratch_pts);
                let mut dsum = 0.0;
                for pt in 0..self.n_pts {
                    let ra = dz.a[pt] / sigma - scratch_pts.a[pt];
                    let rb = dz.b[pt] / sigma - scratch_pts.b[pt];
                    dsum += omega[pt] * (ra * ra + rb * rb);
                }
                for ix in 0..self.n_nodes {
                    let r = dzn[ix] / sigma - du[ix];
                    dsum += self.w[ix] * r * r;
                }
                dres = dsum.sqrt();
            }

            // relaxation
            let r = params.relaxation;
            for i in 0..self.n_vars {
                u[i] += r * (ut[i] - u[i]);
            }
            for pt in 0..self.n_pts {
                z.a[pt] += r * (zt.a[pt] - z.a[pt]);
                z.b[pt] += r * (zt.b[pt] - z.b[pt]);
            }
            for ix in 0..self.n_nodes {
                zn[ix] += r * (znt[ix] - zn[ix]);
            }

            if balance && alpha > 1e-3 {
                let delta = 1.5;
                if pres > delta * dres {
                    tau /= 1.0 - alpha;
                    sigma *= 1.0 - alpha;
                    alpha *= 0.95;
                } else if dres > delta * pres {
                    tau *= 1.0 - alpha;
                    sigma /= 1.0 - alpha;
                    alpha *= 0.95;
                }
            }

            if check {
                let (urep, value) = self.repair(&ut, &anchor, &mut scratch_pts);
                if best_primal.as_ref().is_none_or(|(v, _)| value < *v) {
                    // the next repair mixes towards this point, kept strictly positive
                    for ((a, r), q) in anchor.iter_mut().zip(&urep).zip(&pos) {
                        *a = (1.0 - ANCHOR_SHARE) * r + ANCHOR_SHARE * q;
                    }
                    best_primal = Some((value, urep));
                }
                let raw = self.multipliers(&zt, &znt);
                let (duals, dual_value) = certify(raw, self.ends, self.mode, self.net, self.grid, self.floor);
                if best_dual.as_ref().is_none_or(|(v, _)| dual_value > *v) {
                    best_dual = Some((dual_value, duals));
                }
                let pv = best_primal.as_ref().map(|b| b.0).unwrap_or(f64::INFINITY);
                let dv = best_dual.as_ref().map(|b| b.0).unwrap_or(f64::NEG_INFINITY);
                let rel = relative_gap(pv, dv);
                history.push(HistoryEntry {
                    iteration: it,
                    value: pv,
                    dual_value: dv,
                    rel_gap: rel,
                    primal_residual: pres,
                    dual_residual: dres,
                    tau,
                    sigma,
                });
                if rel <= params.tol_gap {
                    converged = true;
                    break;
                }
            }
        }

        let (_, ubest) = best_primal.unwrap_or_else(|| {
            let (urep, v) = self.repair(&u, &pos, &mut scratch_pts);
            (v, urep)
        });
        let geodesic = self.field_from(&ubest);
        let kappa = self.mode.kappa().unwrap_or(0.0);
        let value = action_eval(&geodesic, kappa, self.grid).total;
        let (dual_value, duals) = best_dual.unwrap_or_else(|| (f64::NEG_INFINITY, DualPotentials::zeros(self.grid, self.net.n_vertices())));
        let ce = ce_residual(&geodesic, self.ends, self.net, self.grid).map(|r| r.max()).unwrap_or(f64::INFINITY);
        let rel_gap = relative_gap(value, dual_value);
        SolveReport {
            mode: self.mode,
            value,
            dual_value,
            gap: value - dual_value,
            rel_gap,
            ce_residual: ce,
            iterations,
            converged: converged && ce <= params.tol_ce && rel_gap <= params.tol_gap,
            history,
            geodesic,
            duals,
        }
    }
}

/// Per-node slack of the discrete Hamilton-Jacobi inequalities and the
/// endpoint pairing of a set of potentials.
struct DualTerms {
    /// `g ≥ 0` is the subsolution condition; indexed like the density nodes.
    edge_slack: Vec<Vec<f64>>,
    vertex_slack: Vec<Vec<f64>>,
    /// Terms of the dual objective not involving the slacks.
    pairing: f64,
    /// Sum of endpoint contributions subtracted from the pairing.
    endpoint_correction: f64,
}

fn dual_terms(duals: &DualPotentials, mode: VertexMode, net: &Network, grid: &GridSpec, ends: Option<&Endpoints>) -> DualTerms {
    let p = grid.steps();
    let dt = grid.dt();
    let nv = net.n_vertices();
    let mut edge_slack: Vec<Vec<f64>> = (0..grid.n_edges()).map(|j| vec![0.0; (p + 1) * grid.cells(j)]).collect();
    let mut vertex_slack = vec![vec![0.0; p + 1]; nv];
    let mut endpoint_correction = 0.0;

    for j in 0..grid.n_edges() {
        let n = grid.cells(j);
        let dx = grid.dx(j);
        let edge = &net.edges()[j];
        let phi = &duals.phi[j];
        let slack = &mut edge_slack[j];
        for k in 0..p {
            let lam_tail = duals.lambda[edge.tail][k];
            let lam_head = duals.lambda[edge.head][k];
            let row = &phi[k * n..(k + 1) * n];
            for e in 0..=n {
                let y = if e == 0 {
                    dt * (lam_tail - row[0])
                } else if e == n {
                    dt * (row[n - 1] - lam_head)
                } else {
                    dt * (row[e - 1] - row[e])
                };
                let w = grid.face_weight(j, e) * dt;
                let q = y * y / (2.0 * w);
                // nodes feeding this face at both ends of the interval
                let coef = |c: usize| -> f64 {
                    if e == 0 || e == n {
                        0.5
                    } else if c + 1 == e || c == e {
                        0.25
                    } else {
                        0.0
                    }
                };
                let cells: &[usize] = if e == 0 {
                    &[0]
                } else if e == n {
                    &[n - 1]
                } else {
                    &[e - 1, e]
                };
                for &c in cells {
                    for kk in [k, k + 1] {
                        slack[kk * n + c] -= coef(c) * q;
                        if kk == 0 {
                            if let Some(ends) = ends {
                                endpoint_correction += coef(c) * q * ends.initial.edge_densities[j][c];
                            }
                        } else if kk == p {
                            if let Some(ends) = ends {
                                endpoint_correction += coef(c) * q * ends.terminal.edge_densities[j][c];
                            }
                        }
                    }
                }
            }
        }
        for k in 1..p {
            for c in 0..n {
                slack[k * n + c] += dx * (phi[(k - 1) * n + c] - phi[k * n + c]);
            }
        }
    }

    if mode.has_vertex_vars() {
        for i in 0..nv {
            let psi = &duals.psi[i];
            let slack = &mut vertex_slack[i];
            for k in 1..p {
                slack[k] += psi[k - 1] - psi[k];
            }
            if let VertexMode::Exchange { kappa } = mode {
                for k in 0..p {
                    let y = dt * (duals.lambda[i][k] - psi[k]);
                    let q = y * y / (2.0 * dt * kappa * kappa);
                    for kk in [k, k + 1] {
                        slack[kk] -= 0.5 * q;
                        if let Some(ends) = ends {
                            if kk == 0 {
                                endpoint_correction += 0.5 * q * ends.initial.vertex_masses[i];
                            } else if kk == p {
                                endpoint_correction += 0.5 * q * ends.terminal.vertex_masses[i];
                            }
                        }
                    }
                }
            }
        }
    }

    let mut pairing = 0.0;
    if let Some(ends) = ends {
        for j in 0..grid.n_edges() {
            let n = grid.cells(j);
            let dx = grid.dx(j);
            for c in 0..n {
                pairing += dx
                    * (duals.phi[j][(p - 1) * n + c] * ends.terminal.edge_densities[j][c]
                        - duals.phi[j][c] * ends.initial.edge_densities[j][c]);
            }
        }
        if mode.has_vertex_vars() {
            for i in 0..nv {
                pairing += duals.psi[i][p - 1] * ends.terminal.vertex_masses[i] - duals.psi[i][0] * ends.initial.vertex_masses[i];
            }
        }
    }

    DualTerms { edge_slack, vertex_slack, pairing, endpoint_correction }
}

/// Largest per-mass violation of the node inequalities (`0` when satisfied).
fn hj_violations(terms: &DualTerms, mode: VertexMode, grid: &GridSpec) -> (f64, f64) {
    let p = grid.steps();
    let dt = grid.dt();
    let mut edge = 0.0f64;
    for (j, s) in terms.edge_slack.iter().enumerate() {
        let n = grid.cells(j);
        let dx = grid.dx(j);
        for k in 1..p {
            for c in 0..n {
                edge = edge.max(-s[k * n + c] / (dx * dt));
            }
        }
    }
    let mut vertex = 0.0f64;
    if mode.has_vertex_vars() {
        for s in &terms.vertex_slack {
            for &v in &s[1..p] {
                vertex = vertex.max(-v / dt);
            }
        }
    }
    (edge.max(0.0), vertex.max(0.0))
}

/// Shifts potentials slice by slice so that they become an exact
/// subsolution, fixes the additive constant, and returns the dual value.
pub(crate) fn certify(
    mut duals: DualPotentials,
    ends: &Endpoints,
    mode: VertexMode,
    net: &Network,
    grid: &GridSpec,
    floor: f64,
) -> (DualPotentials, f64) {
    let p = grid.steps();
    let nv = net.n_vertices();
    let terms = dual_terms(&duals, mode, net, grid, Some(ends));
    // Adding m to every potential on intervals ≥ τ lowers only the slack of
    // slice τ (by m per unit mass) and raises the pairing by m times the mass.
    let mut shift = 0.0;
    for k in 1..p {
        let mut m = f64::INFINITY;
        for (j, s) in terms.edge_slack.iter().enumerate() {
            let n = grid.cells(j);
            let dx = grid.dx(j);
            m = s[k * n..(k + 1) * n].iter().fold(m, |m, &v| m.min(v / dx));
        }
        if mode.has_vertex_vars() {
            m = terms.vertex_slack.iter().fold(m, |m, s| m.min(s[k]));
        }
        shift += m;
        for j in 0..grid.n_edges() {
            let n = grid.cells(j);
            duals.phi[j][k * n..(k + 1) * n].iter_mut().for_each(|v| *v += shift);
        }
        for i in 0..nv {
            duals.psi[i][k] += shift;
            duals.lambda[i][k] += shift;
        }
    }
    // additive constant
    let c0 = duals.phi[0][0];
    for v in duals.phi.iter_mut().chain(duals.psi.iter_mut()).chain(duals.lambda.iter_mut()).flatten() {
        *v -= c0;
    }
    let value = dual_value_unchecked(&duals, ends, mode, net, grid, floor);
    (duals, value)
}

fn dual_value_unchecked(duals: &DualPotentials, ends: &Endpoints, mode: VertexMode, net: &Network, grid: &GridSpec, floor: f64) -> f64 {
    let terms = dual_terms(duals, mode, net, grid, Some(ends));
    let mut value = terms.pairing - terms.endpoint_correction;
    if floor > 0.0 {
        let p = grid.steps();
        for s in &terms.edge_slack {
            let n = s.len() / (p + 1);
            value += floor * s[n..p * n].iter().sum::<f64>();
        }
    }
    value
}

/// Dual objective of arbitrary potentials: `None` (the `−∞` marker) unless
/// the discrete Hamilton-Jacobi inequalities hold to `1e-9` per unit mass.
pub fn eval_dual_objective(
    duals: &DualPotentials,
    endpoints: &Endpoints,
    mode: VertexMode,
    net: &Network,
    grid: &GridSpec,
) -> Result<Option<f64>, SolveError> {
    duals.check_shape(grid, net.n_vertices())?;
    endpoints.check_shape(grid, net.n_vertices())?;
    let terms = dual_terms(duals, mode, net, grid, Some(endpoints));
    let (e, v) = hj_violations(&terms, mode, grid);
    if mode == VertexMode::Free && duals.psi.iter().flatten().zip(duals.lambda.iter().flatten()).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Ok(None);
    }
    if e > 1e-9 || v > 1e-9 {
        return Ok(None);
    }
    Ok(Some(terms.pairing - terms.endpoint_correction))
}

/// Maximal violations of the discrete Hamilton-Jacobi inequalities, edge
/// nodes first, vertex nodes second.
pub fn hj_residual(duals: &DualPotentials, mode: VertexMode, net: &Network, grid: &GridSpec) -> Result<(f64, f64), SolveError> {
    duals.check_shape(grid, net.n_vertices())?;
    let terms = dual_terms(duals, mode, net, grid, None);
    Ok(hj_violations(&terms, mode, grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimalityResidual {
    /// Weighted `L²` norm of `F − ρ̄ ∂ₓφ` over faces with positive density.
    pub flux: f64,
    /// Max of `|κ² f − γ̄ (ψ − λ)|` over intervals with positive vertex mass.
    pub exchange: f64,
}

pub fn optimality_residual(
    field: &TrajectoryField,
    duals: &DualPotentials,
    kappa: f64,
    net: &Network,
    grid: &GridSpec,
) -> Result<OptimalityResidual, SolveError> {
    field.check_shape(grid, net.n_vertices())?;
    duals.check_shape(grid, net.n_vertices())?;
    let p = grid.steps();
    let dt = grid.dt();
    let max_density = field.rho.iter().flatten().fold(0.0f64, |m, &x| m.max(x));
    let eps = 1e-6 * max_density;
    let mut sq = 0.0;
    for j in 0..grid.n_edges() {
        let n = grid.cells(j);
        let edge = &net.edges()[j];
        for k in 0..p {
            let row = &duals.phi[j][k * n..(k + 1) * n];
            for e in 0..=n {
                let rho = field.face_density(grid, j, k, e);
                if rho <= eps {
                    continue;
                }
                let grad = if e == 0 {
                    (row[0] - duals.lambda[edge.tail][k]) / (0.5 * grid.dx(j))
                } else if e == n {
                    (duals.lambda[edge.head][k] - row[n - 1]) / (0.5 * grid.dx(j))
                } else {
                    (row[e] - row[e - 1]) / grid.dx(j)
                };
                let r = field.flux_at(grid, j, k, e) - rho * grad;
                sq += grid.face_weight(j, e) * dt * r * r;
            }
        }
    }
    let gmax = field.gamma.iter().flatten().fold(0.0f64, |m, &x| m.max(x));
    let geps = 1e-6 * gmax;
    let mut exchange = 0.0f64;
    for i in 0..net.n_vertices() {
        for k in 0..p {
            let gbar = 0.5 * (field.gamma[i][k] + field.gamma[i][k + 1]);
            if gbar <= geps {
                continue;
            }
            let r = kappa * kappa * field.exchange[i][k] - gbar * (duals.psi[i][k] - duals.lambda[i][k]);
            exchange = exchange.max(r.abs());
        }
    }
    Ok(OptimalityResidual { flux: sq.sqrt(), exchange })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{fixtures, NetworkMeasure};

    fn bump(grid: &GridSpec, j: usize, center: f64, width: f64, mass: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..grid.cells(j)).map(|c| (-(grid.cell_center(j, c) - center).powi(2) / (2.0 * width * width)).exp()).collect();
        let s: f64 = v.iter().sum::<f64>() * grid.dx(j);
        v.iter().map(|x| mass * x / s).collect()
    }

    fn params(tol_gap: f64) -> SolverParams {
        SolverParams { tol_gap, max_iters: 40_000, ..Default::default() }
    }

    fn segment_bumps(n: usize, p: usize) -> (Network, GridSpec, Endpoints) {
        let net = fixtures::segment(1.0);
        let grid = GridSpec::uniform(&net, n, p).unwrap();
        let ends = Endpoints {
            initial: NetworkMeasure { edge_densities: vec![bump(&grid, 0, 0.3, 0.08, 1.0)], vertex_masses: vec![0.0; 2] },
            terminal: NetworkMeasure { edge_densities: vec![bump(&grid, 0, 0.7, 0.08, 1.0)], vertex_masses: vec![0.0; 2] },
        };
        (net, grid, ends)
    }

    #[test]
    fn identity_has_zero_value() {
        let net = fixtures::y_graph();
        let grid = GridSpec::uniform(&net, 8, 4).unwrap();
        let mu = NetworkMeasure {
            edge_densities: (0..3).map(|j| bump(&grid, j, 0.5, 0.3, 0.2)).collect(),
            vertex_masses: vec![0.1, 0.1, 0.1, 0.1],
        };
        let ends = Endpoints { initial: mu.clone(), terminal: mu };
        let r = solve_geodesic(&net, &grid, &ends, 1.0, &params(1e-6)).unwrap();
        assert!(r.converged);
        assert!(r.value <= 1e-6, "value {}", r.value);
        assert!(r.dual_value <= r.value + 1e-12);
    }

    #[test]
    fn bump_transport_near_half_squared_shift() {
        let (net, grid, ends) = segment_bumps(32, 16);
        let r = solve_geodesic(&net, &grid, &ends, 1.0, &params(1e-5)).unwrap();
        assert!(r.converged, "gap {}", r.rel_gap);
        // ½·0.4² = 0.08 in the continuum; the coarse grid adds numerical diffusion
        assert!((r.value - 0.08).abs() < 0.05 * 0.08, "value {}", r.value);
        assert!(r.dual_value <= r.value);
        assert!(r.rel_gap <= 1e-5);
        assert!(r.ce_residual <= 1e-10);
        assert!(r.geodesic.mass_drift(&grid) <= 1e-12);
        assert!(r.geodesic.min_density() >= 0.0);
    }

    #[test]
    fn reported_duals_certify_the_dual_value() {
        let (net, grid, ends) = segment_bumps(16, 8);
        let r = solve_geodesic(&net, &grid, &ends, 1.0, &params(1e-4)).unwrap();
        let mode = VertexMode::Exchange { kappa: 1.0 };
        let (e, v) = hj_residual(&r.duals, mode, &net, &grid).unwrap();
        assert!(e <= 1e-12 && v <= 1e-12, "{e} {v}");
        let d = eval_dual_objective(&r.duals, &ends, mode, &net, &grid).unwrap().unwrap();
        assert!((d - r.dual_value).abs() < 1e-12);
    }

    #[test]
    fn vertex_transfer_pays_at_least_the_mass_bound() {
        let net = fixtures::segment(1.0);
        let grid = GridSpec::uniform(&net, 8, 8).unwrap();
        let ends = Endpoints {
            initial: NetworkMeasure { edge_densities: vec![vec![0.0; 8]], vertex_masses: vec![1.0, 0.0] },
            terminal: NetworkMeasure { edge_densities: vec![vec![0.0; 8]], vertex_masses: vec![0.0, 1.0] },
        };
        let r = solve_geodesic(&net, &grid, &ends, 1.0, &params(1e-4)).unwrap();
        assert!(r.converged);
        assert!(r.value >= 1.0, "value {}", r.value);
        assert!(r.geodesic.mass_drift(&grid) <= 1e-12);
    }

    #[test]
    fn endpoint_validation() {
        let (net, grid, mut ends) = segment_bumps(8, 4);
        assert!(matches!(solve_geodesic(&net, &grid, &ends, 0.0, &params(1e-4)), Err(SolveError::Parameter(_))));
        ends.terminal.edge_densities[0][0] += 1.0;
        assert!(matches!(solve_geodesic(&net, &grid, &ends, 1.0, &params(1e-4)), Err(SolveError::MassMismatch { .. })));
        ends.terminal.edge_densities[0][0] = -1.0;
        assert!(solve_geodesic(&net, &grid, &ends, 1.0, &params(1e-4)).is_err());
        let bad = SolverParams { relaxation: 2.0, ..Default::default() };
        let (net, grid, ends) = segment_bumps(8, 4);
        assert!(matches!(solve_geodesic(&net, &grid, &ends, 1.0, &bad), Err(SolveError::Parameter(_))));
    }

    #[test]
    fn frozen_vertices_need_equal_masses() {
        let (net, grid, mut ends) = segment_bumps(8, 4);
        ends.initial.vertex_masses = vec![0.1, 0.0];
        ends.initial.edge_densities[0].iter_mut().for_each(|x| *x *= 0.9);
        ends.terminal.vertex_masses = vec![0.0, 0.1];
        ends.terminal.edge_densities[0].iter_mut().for_each(|x| *x *= 0.9);
        assert!(matches!(solve_with_mode(&net, &grid, &ends, VertexMode::Frozen, &params(1e-4)), Err(SolveError::Parameter(_))));
    }

    fn y_ends(grid: &GridSpec) -> Endpoints {
        Endpoints {
            initial: NetworkMeasure {
                edge_densities: vec![bump(grid, 0, 0.5, 0.15, 0.6), bump(grid, 1, 0.5, 0.2, 0.2), vec![0.0; grid.cells(2)]],
                vertex_masses: vec![0.1, 0.0, 0.0, 0.1],
            },
            terminal: NetworkMeasure {
                edge_densities: vec![vec![0.0; grid.cells(0)], bump(grid, 1, 0.3, 0.2, 0.3), bump(grid, 2, 0.6, 0.15, 0.5)],
                vertex_masses: vec![0.1, 0.0, 0.0, 0.1],
            },
        }
    }

    #[test]
    fn modes_are_ordered() {
        let net = fixtures::y_graph();
        let grid = GridSpec::uniform(&net, 8, 8).unwrap();
        let ends = y_ends(&grid);
        let p = params(1e-4);
        let free = solve_with_mode(&net, &grid, &ends, VertexMode::Free, &p).unwrap();
        let one = solve_with_mode(&net, &grid, &ends, VertexMode::Exchange { kappa: 1.0 }, &p).unwrap();
        let frozen = solve_with_mode(&net, &grid, &ends, VertexMode::Frozen, &p).unwrap();
        for r in [&free, &one, &frozen] {
            assert!(r.converged, "{:?} gap {}", r.mode, r.rel_gap);
            assert!(r.geodesic.mass_drift(&grid) <= 1e-12);
        }
        // lower bounds of the cheaper problem never exceed the values of the dearer one
        assert!(free.dual_value <= one.value);
        assert!(one.dual_value <= frozen.value);
        for k in 0..=grid.steps() {
            assert_eq!(frozen.geodesic.gamma[3][k], 0.1);
        }
    }

    fn t_potentials(net: &Network, grid: &GridSpec, a: f64, b: f64) -> DualPotentials {
        DualPotentials::from_functions(|_, t, _| a * t, |_, t| b * t, net, grid)
    }

    #[test]
    fn dual_objective_examples() {
        let (net, grid, ends) = segment_bumps(8, 4);
        let mode = VertexMode::Exchange { kappa: 1.0 };
        // midpoint sampling of −t pairs interval midpoints with the endpoints
        let d = eval_dual_objective(&t_potentials(&net, &grid, -1.0, -1.0), &ends, mode, &net, &grid).unwrap();
        assert!((d.unwrap() - (-1.0 + grid.dt())).abs() < 1e-12, "{d:?}");
        let d = eval_dual_objective(&DualPotentials::zeros(&grid, 2), &ends, mode, &net, &grid).unwrap();
        assert_eq!(d, Some(0.0));
        let d = eval_dual_objective(&t_potentials(&net, &grid, 1.0, 0.0), &ends, mode, &net, &grid).unwrap();
        assert_eq!(d, None);
    }

    #[test]
    fn hj_residual_examples() {
        let net = fixtures::y_graph();
        let grid = GridSpec::uniform(&net, 6, 5).unwrap();
        let mode = VertexMode::Exchange { kappa: 2.0 };
        let (e, v) = hj_residual(&t_potentials(&net, &grid, -1.0, -1.0), mode, &net, &grid).unwrap();
        assert_eq!((e, v), (0.0, 0.0));
        let (e, _) = hj_residual(&t_potentials(&net, &grid, 1.0, 0.0), mode, &net, &grid).unwrap();
        assert!((e - 1.0).abs() < 1e-12, "{e}");
        let mut bad = DualPotentials::zeros(&grid, 4);
        bad.phi.pop();
        assert!(hj_residual(&bad, mode, &net, &grid).is_err());
    }

    #[test]
    fn optimality_residual_of_zero_field() {
        let net = fixtures::y_graph();
        let grid = GridSpec::uniform(&net, 4, 3).unwrap();
        let field = TrajectoryField::zeros(&grid, 4);
        let r = optimality_residual(&field, &DualPotentials::zeros(&grid, 4), 1.0, &net, &grid).unwrap();
        assert_eq!((r.flux, r.exchange), (0.0, 0.0));
    }

    #[test]
    fn optimality_residual_small_at_convergence() {
        let (net, grid, ends) = segment_bumps(16, 8);
        let r = solve_geodesic(&net, &grid, &ends, 1.0, &params(1e-6)).unwrap();
        let o = optimality_residual(&r.geodesic, &r.duals, 1.0, &net, &grid).unwrap();
        assert!(o.flux < 1e-3 * r.value.sqrt(), "{o:?}");
    }

    #[test]
    fn relative_gap_floor() {
        assert_eq!(relative_gap(2.0, 1.0), 0.5);
        assert_eq!(relative_gap(0.0, -1e-6), 1e-3);
    }
}
