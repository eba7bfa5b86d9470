//! Staggered space-time grid on a network and fields living on it.
//!
//! Densities sit at cell centers and time nodes `t_k = k Δt`, fluxes at
//! faces and time midpoints. Face 0 of an edge is its tail, face `N` its head.

use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::netgraph::{Network, NetworkMeasure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    cells: Vec<usize>,
    dx: Vec<f64>,
    steps: usize,
}

impl GridSpec {
    pub fn new(net: &Network, cells: Vec<usize>, steps: usize) -> Result<Self, GridError> {
        if cells.len() != net.n_edges() {
            return Err(GridError::Shape(format!("{} cell counts for {} edges", cells.len(), net.n_edges())));
        }
        if let Some(j) = cells.iter().position(|&n| n < 2) {
            return Err(GridError::TooFewCells { edge: j, cells: cells[j] });
        }
        if steps == 0 {
            return Err(GridError::NoSteps);
        }
        let dx = net.edges().iter().zip(&cells).map(|(e, &n)| e.length / n as f64).collect();
        Ok(GridSpec { cells, dx, steps })
    }

    pub fn uniform(net: &Network, cells: usize, steps: usize) -> Result<Self, GridError> {
        Self::new(net, vec![cells; net.n_edges()], steps)
    }

    /// Cell counts chosen so that every edge has width close to `target_dx`.
    pub fn with_target_dx(net: &Network, target_dx: f64, steps: usize) -> Result<Self, GridError> {
        let cells = net.edges().iter().map(|e| ((e.length / target_dx).round() as usize).max(2)).collect();
        Self::new(net, cells, steps)
    }

    pub fn cells(&self, j: usize) -> usize {
        self.cells[j]
    }

    pub fn all_cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn dx(&self, j: usize) -> f64 {
        self.dx[j]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn n_edges(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_center(&self, j: usize, c: usize) -> f64 {
        (c as f64 + 0.5) * self.dx[j]
    }

    pub fn face_position(&self, j: usize, e: usize) -> f64 {
        e as f64 * self.dx[j]
    }

    /// Quadrature weight of face `e`: half a cell at the two ends.
    pub fn face_weight(&self, j: usize, e: usize) -> f64 {
        if e == 0 || e == self.cells[j] {
            0.5 * self.dx[j]
        } else {
            self.dx[j]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub initial: NetworkMeasure,
    pub terminal: NetworkMeasure,
}

impl Endpoints {
    pub fn reversed(&self) -> Endpoints {
        Endpoints { initial: self.terminal.clone(), terminal: self.initial.clone() }
    }

    pub fn check_shape(&self, grid: &GridSpec, n_vertices: usize) -> Result<(), GridError> {
        for (name, mu) in [("initial", &self.initial), ("terminal", &self.terminal)] {
            if mu.edge_densities.len() != grid.n_edges() || mu.vertex_masses.len() != n_vertices {
                return Err(GridError::Shape(format!("{name} measure does not match the network")));
            }
            for (j, d) in mu.edge_densities.iter().enumerate() {
                if d.len() != grid.cells(j) {
                    return Err(GridError::Shape(format!("{name} density on edge {j} has {} cells, grid has {}", d.len(), grid.cells(j))));
                }
            }
        }
        Ok(())
    }
}

/// Staggered trajectory. Per-edge arrays are row-major in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryField {
    /// `(P+1) × N_j` cell densities.
    pub rho: Vec<Vec<f64>>,
    /// `P × (N_j+1)` face fluxes.
    pub flux: Vec<Vec<f64>>,
    /// `P+1` vertex masses.
    pub gamma: Vec<Vec<f64>>,
    /// `P` vertex exchange rates.
    pub exchange: Vec<Vec<f64>>,
}

impl TrajectoryField {
    pub fn zeros(grid: &GridSpec, n_vertices: usize) -> Self {
        let p = grid.steps();
        TrajectoryField {
            rho: (0..grid.n_edges()).map(|j| vec![0.0; (p + 1) * grid.cells(j)]).collect(),
            flux: (0..grid.n_edges()).map(|j| vec![0.0; p * (grid.cells(j) + 1)]).collect(),
            gamma: vec![vec![0.0; p + 1]; n_vertices],
            exchange: vec![vec![0.0; p]; n_vertices],
        }
    }

    pub fn check_shape(&self, grid: &GridSpec, n_vertices: usize) -> Result<(), GridError> {
        let p = grid.steps();
        let bad = |what: &str| Err(GridError::Shape(format!("{what} does not match the grid")));
        if self.rho.len() != grid.n_edges() || self.flux.len() != grid.n_edges() {
            return bad("edge field count");
        }
        if self.gamma.len() != n_vertices || self.exchange.len() != n_vertices {
            return bad("vertex field count");
        }
        for j in 0..grid.n_edges() {
            if self.rho[j].len() != (p + 1) * grid.cells(j) {
                return bad("density array");
            }
            if self.flux[j].len() != p * (grid.cells(j) + 1) {
                return bad("flux array");
            }
        }
        if self.gamma.iter().any(|g| g.len() != p + 1) || self.exchange.iter().any(|f| f.len() != p) {
            return bad("vertex array");
        }
        Ok(())
    }

    pub fn rho_at(&self, grid: &GridSpec, j: usize, k: usize, c: usize) -> f64 {
        self.rho[j][k * grid.cells(j) + c]
    }

    pub fn flux_at(&self, grid: &GridSpec, j: usize, k: usize, e: usize) -> f64 {
        self.flux[j][k * (grid.cells(j) + 1) + e]
    }

    /// Face density at time midpoint `k + ½`: four-point average inside the
    /// edge, two-point time average of the adjacent cell on boundary faces.
    pub fn face_density(&self, grid: &GridSpec, j: usize, k: usize, e: usize) -> f64 {
        let n = grid.cells(j);
        let r = &self.rho[j];
        let (a, b) = (k * n, (k + 1) * n);
        if e == 0 {
            0.5 * (r[a] + r[b])
        } else if e == n {
            0.5 * (r[a + n - 1] + r[b + n - 1])
        } else {
            0.25 * (r[a + e - 1] + r[a + e] + r[b + e - 1] + r[b + e])
        }
    }

    pub fn slice(&self, grid: &GridSpec, k: usize) -> NetworkMeasure {
        NetworkMeasure {
            edge_densities: (0..grid.n_edges())
                .map(|j| {
                    let n = grid.cells(j);
                    self.rho[j][k * n..(k + 1) * n].to_vec()
                })
                .collect(),
            vertex_masses: self.gamma.iter().map(|g| g[k]).collect(),
        }
    }

    pub fn slice_mass(&self, grid: &GridSpec, k: usize) -> f64 {
        let edges: f64 = (0..grid.n_edges())
            .map(|j| {
                let n = grid.cells(j);
                self.rho[j][k * n..(k + 1) * n].iter().sum::<f64>() * grid.dx(j)
            })
            .sum();
        edges + self.gamma.iter().map(|g| g[k]).sum::<f64>()
    }

    /// Largest deviation of any slice mass from the initial one.
    pub fn mass_drift(&self, grid: &GridSpec) -> f64 {
        let m0 = self.slice_mass(grid, 0);
        (1..=grid.steps()).map(|k| (self.slice_mass(grid, k) - m0).abs()).fold(0.0, f64::max)
    }

    pub fn min_density(&self) -> f64 {
        self.rho.iter().flatten().chain(self.gamma.iter().flatten()).copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_exchange(&self) -> f64 {
        self.exchange.iter().flatten().fold(0.0, |m, f| m.max(f.abs()))
    }

    /// Discrete `L²(0,1)` norm of the vertex exchange, summed over vertices.
    pub fn exchange_l2(&self, grid: &GridSpec) -> f64 {
        let dt = grid.dt();
        self.exchange.iter().flatten().map(|f| f * f * dt).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CEResidual {
    pub edge_max: Vec<f64>,
    pub edge_l2: Vec<f64>,
    pub vertex_max: Vec<f64>,
    pub coupling_max: f64,
    pub endpoint_max: f64,
}

impl CEResidual {
    /// Largest entry of the whole report.
    pub fn max(&self) -> f64 {
        self.edge_max.iter().chain(&self.vertex_max).chain([&self.coupling_max, &self.endpoint_max]).fold(0.0, |m, &x| m.max(x))
    }
}

pub fn ce_residual(field: &TrajectoryField, endpoints: &Endpoints, net: &Network, grid: &GridSpec) -> Result<CEResidual, GridError> {
    field.check_shape(grid, net.n_vertices())?;
    endpoints.check_shape(grid, net.n_vertices())?;
    let p = grid.steps();
    let dt = grid.dt();

    let mut edge_max = Vec::with_capacity(grid.n_edges());
    let mut edge_l2 = Vec::with_capacity(grid.n_edges());
    let mut endpoint_max = 0.0f64;
    for j in 0..grid.n_edges() {
        let n = grid.cells(j);
        let dx = grid.dx(j);
        let (mut mx, mut sq) = (0.0f64, 0.0);
        for k in 0..p {
            for c in 0..n {
                let drho = field.rho_at(grid, j, k + 1, c) - field.rho_at(grid, j, k, c);
                let dflux = field.flux_at(grid, j, k, c + 1) - field.flux_at(grid, j, k, c);
                let r = drho / dt + dflux / dx;
                mx = mx.max(r.abs());
                sq += r * r * dx * dt;
            }
        }
        edge_max.push(mx);
        edge_l2.push(sq.sqrt());
        for c in 0..n {
            endpoint_max = endpoint_max
                .max((field.rho_at(grid, j, 0, c) - endpoints.initial.edge_densities[j][c]).abs())
                .max((field.rho_at(grid, j, p, c) - endpoints.terminal.edge_densities[j][c]).abs());
        }
    }

    let mut vertex_max = Vec::with_capacity(net.n_vertices());
    let mut coupling_max = 0.0f64;
    for i in 0..net.n_vertices() {
        let g = &field.gamma[i];
        let f = &field.exchange[i];
        let mut mx = 0.0f64;
        for k in 0..p {
            mx = mx.max(((g[k + 1] - g[k]) / dt - f[k]).abs());
            let inflow = boundary_inflow(field, net, grid, i, k);
            coupling_max = coupling_max.max((f[k] - inflow).abs());
        }
        vertex_max.push(mx);
        endpoint_max =
            endpoint_max.max((g[0] - endpoints.initial.vertex_masses[i]).abs()).max((g[p] - endpoints.terminal.vertex_masses[i]).abs());
    }

    Ok(CEResidual { edge_max, edge_l2, vertex_max, coupling_max, endpoint_max })
}

/// `Σ_j σ_ij F^j` at the faces touching vertex `i` during interval `k`.
pub fn boundary_inflow(field: &TrajectoryField, net: &Network, grid: &GridSpec, i: usize, k: usize) -> f64 {
    net.incident(i)
        .iter()
        .map(|&j| {
            let e = &net.edges()[j];
            let mut s = 0.0;
            if e.head == i {
                s += field.flux_at(grid, j, k, grid.cells(j));
            }
            if e.tail == i {
                s -= field.flux_at(grid, j, k, 0);
            }
            s
        })
        .sum()
}

/// Smooth test function for the weak form, with exact derivatives.
pub trait TestFunction {
    /// `(φ, ∂_t φ, ∂_x φ)` on edge `j` at arclength `x`.
    fn edge(&self, j: usize, t: f64, x: f64) -> (f64, f64, f64);
    /// `(ψ, ψ')` on vertex `i`.
    fn vertex(&self, i: usize, t: f64) -> (f64, f64);
}

/// Defect of the discrete weak formulation under midpoint quadrature.
///
/// The vertex value of the edge test function is the mean of its traces
/// over incident edges, which is the common value for continuous tests.
pub fn weak_form_residual(field: &TrajectoryField, test: &dyn TestFunction, net: &Network, grid: &GridSpec) -> Result<f64, GridError> {
    field.check_shape(grid, net.n_vertices())?;
    let p = grid.steps();
    let dt = grid.dt();

    let mut edge_part = 0.0;
    for j in 0..grid.n_edges() {
        let n = grid.cells(j);
        let dx = grid.dx(j);
        for k in 0..p {
            let tm = (k as f64 + 0.5) * dt;
            for c in 0..n {
                let rho_mid = 0.5 * (field.rho_at(grid, j, k, c) + field.rho_at(grid, j, k + 1, c));
                edge_part += dt * dx * test.edge(j, tm, grid.cell_center(j, c)).1 * rho_mid;
            }
            for e in 0..=n {
                let d = test.edge(j, tm, grid.face_position(j, e)).2;
                edge_part += grid.face_weight(j, e) * dt * d * field.flux_at(grid, j, k, e);
            }
        }
        for c in 0..n {
            let x = grid.cell_center(j, c);
            edge_part -= dx * (test.edge(j, 1.0, x).0 * field.rho_at(grid, j, p, c) - test.edge(j, 0.0, x).0 * field.rho_at(grid, j, 0, c));
        }
    }
    for i in 0..net.n_vertices() {
        for k in 0..p {
            let tm = (k as f64 + 0.5) * dt;
            let trace = vertex_trace(test, net, i, tm);
            edge_part -= dt * trace * field.exchange[i][k];
        }
    }

    let mut vertex_part = 0.0;
    for i in 0..net.n_vertices() {
        let g = &field.gamma[i];
        for k in 0..p {
            let tm = (k as f64 + 0.5) * dt;
            let (psi, dpsi) = test.vertex(i, tm);
            vertex_part += dt * (dpsi * 0.5 * (g[k] + g[k + 1]) + psi * field.exchange[i][k]);
        }
        vertex_part -= test.vertex(i, 1.0).0 * g[p] - test.vertex(i, 0.0).0 * g[0];
    }
    Ok(edge_part.abs() + vertex_part.abs())
}

fn vertex_trace(test: &dyn TestFunction, net: &Network, i: usize, t: f64) -> f64 {
    let inc = net.incident(i);
    inc.iter()
        .map(|&j| {
            let e = &net.edges()[j];
            let x = if e.tail == i { 0.0 } else { e.length };
            test.edge(j, t, x).0
        })
        .sum::<f64>()
        / inc.len() as f64
}

/// Linear interpolation between the endpoints with zero flux.
pub fn linear_seed(endpoints: &Endpoints, grid: &GridSpec) -> TrajectoryField {
    let p = grid.steps();
    let nv = endpoints.initial.vertex_masses.len();
    let mut field = TrajectoryField::zeros(grid, nv);
    for k in 0..=p {
        let t = k as f64 / p as f64;
        for j in 0..grid.n_edges() {
            let n = grid.cells(j);
            let (r0, r1) = (&endpoints.initial.edge_densities[j], &endpoints.terminal.edge_densities[j]);
            for c in 0..n {
                field.rho[j][k * n + c] = (1.0 - t) * r0[c] + t * r1[c];
            }
        }
        for i in 0..nv {
            let (g0, g1) = (endpoints.initial.vertex_masses[i], endpoints.terminal.vertex_masses[i]);
            field.gamma[i][k] = (1.0 - t) * g0 + t * g1;
        }
    }
    field
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaceVelocity {
    Defined(f64),
    /// Zero flux through zero density: admissible, velocity arbitrary.
    Undefined,
}

/// Face velocities `F / ρ̄`, indexed like the flux arrays.
pub fn velocity_field(field: &TrajectoryField, grid: &GridSpec) -> Result<Vec<Vec<FaceVelocity>>, GridError> {
    let p = grid.steps();
    let mut out = Vec::with_capacity(grid.n_edges());
    for j in 0..grid.n_edges() {
        let n = grid.cells(j);
        let mut u = Vec::with_capacity(p * (n + 1));
        for k in 0..p {
            for e in 0..=n {
                let rho = field.face_density(grid, j, k, e);
                let flux = field.flux_at(grid, j, k, e);
                u.push(face_velocity(rho, flux).ok_or(GridError::FluxWithoutMass { edge: j, step: k, face: e, flux })?);
            }
        }
        out.push(u);
    }
    Ok(out)
}

pub fn face_velocity(rho: f64, flux: f64) -> Option<FaceVelocity> {
    if rho > 0.0 {
        Some(FaceVelocity::Defined(flux / rho))
    } else if flux == 0.0 {
        Some(FaceVelocity::Undefined)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::fixtures::{segment, y_graph};

    fn endpoints_const(grid: &GridSpec, nv: usize, rho: f64, gamma: f64) -> Endpoints {
        let mu =
            NetworkMeasure { edge_densities: grid.all_cells().iter().map(|&n| vec![rho; n]).collect(), vertex_masses: vec![gamma; nv] };
        Endpoints { initial: mu.clone(), terminal: mu }
    }

    #[test]
    fn constant_field_has_zero_residual() {
        let net = y_graph();
        let grid = GridSpec::uniform(&net, 5, 4).unwrap();
        let ends = endpoints_const(&grid, 4, 0.2, 0.1);
        let field = linear_seed(&ends, &grid);
        let r = ce_residual(&field, &ends, &net, &grid).unwrap();
        assert_eq!(r.max(), 0.0);
    }

    #[test]
    fn draining_cell_residual() {
        let net = segment(1.0);
        let grid = GridSpec::uniform(&net, 2, 1).unwrap();
        let mut field = TrajectoryField::zeros(&grid, 2);
        field.rho[0] = vec![1.0, 1.0, 0.0, 0.0];
        let ends = Endpoints { initial: field.slice(&grid, 0), terminal: field.slice(&grid, 1) };
        let r = ce_residual(&field, &ends, &net, &grid).unwrap();
        assert!((r.edge_max[0] - 1.0).abs() < 1e-15);
        assert_eq!(r.coupling_max, 0.0);
    }

    #[test]
    fn seed_interpolates() {
        let net = segment(1.0);
        let grid = GridSpec::uniform(&net, 2, 2).unwrap();
        let ends = Endpoints {
            initial: NetworkMeasure { edge_densities: vec![vec![0.0, 0.0]], vertex_masses: vec![1.0, 0.0] },
            terminal: NetworkMeasure { edge_densities: vec![vec![1.0, 1.0]], vertex_masses: vec![0.0, 0.0] },
        };
        let field = linear_seed(&ends, &grid);
        assert_eq!(field.gamma[0], vec![1.0, 0.5, 0.0]);
        assert_eq!(field.rho_at(&grid, 0, 1, 1), 0.5);
        let r = ce_residual(&field, &ends, &net, &grid).unwrap();
        assert_eq!(r.coupling_max, 0.0);
    }

    #[test]
    fn velocities() {
        assert_eq!(face_velocity(0.4, 0.2), Some(FaceVelocity::Defined(0.5)));
        assert_eq!(face_velocity(0.0, 0.0), Some(FaceVelocity::Undefined));
        assert_eq!(face_velocity(0.0, 0.1), None);

        let net = segment(1.0);
        let grid = GridSpec::uniform(&net, 2, 1).unwrap();
        let mut field = TrajectoryField::zeros(&grid, 2);
        field.flux[0][1] = 0.1;
        assert!(matches!(velocity_field(&field, &grid), Err(GridError::FluxWithoutMass { face: 1, .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = segment(1.0);
        let grid = GridSpec::uniform(&net, 4, 2).unwrap();
        let other = GridSpec::uniform(&net, 3, 2).unwrap();
        let field = TrajectoryField::zeros(&other, 2);
        let ends = endpoints_const(&grid, 2, 0.0, 0.5);
        assert!(ce_residual(&field, &ends, &net, &grid).is_err());
    }

    #[test]
    fn grid_validation() {
        let net = segment(1.0);
        assert!(matches!(GridSpec::uniform(&net, 1, 4), Err(GridError::TooFewCells { .. })));
        assert!(matches!(GridSpec::uniform(&net, 4, 0), Err(GridError::NoSteps)));
        let g = GridSpec::with_target_dx(&segment(2.0), 0.1, 3).unwrap();
        assert_eq!(g.cells(0), 20);
    }
}
