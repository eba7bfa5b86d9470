//! Reference distances and the relations between them: vertex Fisher-Rao,
//! per-edge Wasserstein, the Kirchhoff-coupled edge distance, free vertex
//! exchange, bounded-Lipschitz distances and sweeps over `kappa`.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::grid::{Endpoints, GridSpec, TrajectoryField};
use crate::linalg::solve_tridiagonal;
use crate::netgraph::{Network, NetworkMeasure};
use crate::solver::{hj_residual, solve_with_mode, SolveReport, SolverParams, VertexMode};

fn check_nonnegative(v: &[f64]) -> Result<(), MetricError> {
    if v.iter().all(|x| *x >= 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(MetricError::NegativeMass)
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(MetricError::Shape(format!("lengths {} and {}", a.len(), b.len())))
    }
}

/// Closed-form vertex Fisher-Rao cost `Σ 2κ²(√γ₁ − √γ₀)²`.
pub fn fisher_rao(gamma0: &[f64], gamma1: &[f64], kappa: f64) -> Result<f64, MetricError> {
    check_len(gamma0, gamma1)?;
    check_nonnegative(gamma0)?;
    check_nonnegative(gamma1)?;
    Ok(gamma0.iter().zip(gamma1).map(|(a, b)| 2.0 * kappa * kappa * (b.sqrt() - a.sqrt()).powi(2)).sum())
}

/// The same cost from the time-discretized program
/// `min Σ_k κ² Δt f_k² / (γ_k + γ_{k+1})` with `γ_{k+1} − γ_k = Δt f_k`,
/// solved by damped Newton on the interior masses.
pub fn fisher_rao_discrete(gamma0: &[f64], gamma1: &[f64], kappa: f64, steps: usize) -> Result<f64, MetricError> {
    check_len(gamma0, gamma1)?;
    check_nonnegative(gamma0)?;
    check_nonnegative(gamma1)?;
    if steps == 0 {
        return Err(MetricError::Shape("need at least one time step".into()));
    }
    let mut total = 0.0;
    for (&a, &b) in gamma0.iter().zip(gamma1) {
        total += kappa * kappa * single_vertex_program(a, b, steps);
    }
    Ok(total)
}

/// `Σ (γ_{k+1} − γ_k)² / (Δt (γ_k + γ_{k+1}))` minimized over positive interior nodes.
fn single_vertex_program(a: f64, b: f64, p: usize) -> f64 {
    if a == b {
        return 0.0;
    }
    let dt = 1.0 / p as f64;
    let objective = |g: &[f64]| -> f64 {
        g.windows(2)
            .map(|w| {
                let s = w[0] + w[1];
                if s > 0.0 {
                    (w[1] - w[0]).powi(2) / (dt * s)
                } else if w[0] == w[1] {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .sum()
    };
    // linear start, nudged off zero so every sum is positive
    let floor = 1e-3 * a.max(b);
    let mut g: Vec<f64> = (0..=p)
        .map(|k| {
            let t = k as f64 * dt;
            let v = (1.0 - t) * a + t * b;
            if k == 0 || k == p {
                v
            } else {
                v.max(floor)
            }
        })
        .collect();
    if p == 1 {
        return objective(&g);
    }
    let m = p - 1;
    for _ in 0..200 {
        let mut grad = vec![0.0; p + 1];
        let mut diag = vec![0.0; p + 1];
        let mut off = vec![0.0; p];
        for k in 0..p {
            let x = g[k + 1] - g[k];
            let y = g[k] + g[k + 1];
            let (hxx, hxy, hyy) = (2.0 / y, -2.0 * x / (y * y), 2.0 * x * x / (y * y * y));
            grad[k] += (-2.0 * x / y - x * x / (y * y)) / dt;
            grad[k + 1] += (2.0 * x / y - x * x / (y * y)) / dt;
            diag[k] += (hxx - 2.0 * hxy + hyy) / dt;
            diag[k + 1] += (hxx + 2.0 * hxy + hyy) / dt;
            off[k] += (hyy - hxx) / dt;
        }
        let lower: Vec<f64> = (0..m).map(|i| if i == 0 { 0.0 } else { off[i] }).collect();
        let upper: Vec<f64> = (0..m).map(|i| off[i + 1]).collect();
        let d: Vec<f64> = diag[1..p].iter().map(|v| v * (1.0 + 1e-14)).collect();
        let rhs: Vec<f64> = grad[1..p].iter().map(|v| -v).collect();
        let step = solve_tridiagonal(&lower, &d, &upper, &rhs);
        let decrement: f64 = step.iter().zip(&grad[1..p]).map(|(s, g)| -s * g).sum();
        if !(decrement > 1e-15 * objective(&g).max(1e-300)) {
            break;
        }
        // fraction-to-boundary, then Armijo backtracking
        let mut t = 1.0f64;
        for (s, &v) in step.iter().zip(&g[1..p]) {
            if *s < 0.0 {
                t = t.min(-0.99 * v / s);
            }
        }
        let f0 = objective(&g);
        loop {
            let trial: Vec<f64> = g.iter().enumerate().map(|(k, &v)| if k == 0 || k == p { v } else { v + t * step[k - 1] }).collect();
            let f = objective(&trial);
            if f <= f0 - 0.25 * t * decrement || t < 1e-12 {
                g = trial;
                break;
            }
            t *= 0.5;
        }
    }
    objective(&g)
}

/// `½∫₀^m |Q₀(s) − Q₁(s)|² ds` for piecewise-constant densities on a
/// uniform grid of an interval of the given length. Exact for that
/// representation because both quantile functions are piecewise linear.
pub fn wasserstein_edge_1d(rho0: &[f64], rho1: &[f64], length: f64) -> Result<f64, MetricError> {
    check_len(rho0, rho1)?;
    check_nonnegative(rho0)?;
    check_nonnegative(rho1)?;
    if rho0.is_empty() {
        return Ok(0.0);
    }
    let dx = length / rho0.len() as f64;
    let m0: f64 = rho0.iter().sum::<f64>() * dx;
    let m1: f64 = rho1.iter().sum::<f64>() * dx;
    if (m0 - m1).abs() > 1e-10 * m0.max(m1).max(1.0) {
        return Err(MetricError::MassMismatch(m0, m1));
    }
    let cum = |rho: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0];
        for r in rho {
            c.push(c.last().unwrap() + r * dx);
        }
        c
    };
    let (c0, c1) = (cum(rho0), cum(rho1));
    // quantile on cell i: x = i·dx + (s − c[i]) / ρ_i
    let quantile = |rho: &[f64], c: &[f64], i: usize, s: f64| -> f64 { i as f64 * dx + (s - c[i]) / rho[i] };
    let mut total = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let mut s = 0.0;
    let m = m0.min(m1);
    let n = rho0.len();
    loop {
        while i < n && (rho0[i] == 0.0 || c0[i + 1] <= s) {
            i += 1;
        }
        while j < n && (rho1[j] == 0.0 || c1[j + 1] <= s) {
            j += 1;
        }
        if i == n || j == n || s >= m {
            break;
        }
        let e = c0[i + 1].min(c1[j + 1]).min(m);
        if e > s {
            let da = quantile(rho0, &c0, i, s) - quantile(rho1, &c1, j, s);
            let db = quantile(rho0, &c0, i, e) - quantile(rho1, &c1, j, e);
            total += (e - s) * (da * da + da * db + db * db) / 3.0;
        }
        s = e;
    }
    Ok(0.5 * total)
}

/// Edge transport with vertex masses frozen at their initial values; edge
/// fluxes satisfy Kirchhoff balance at every vertex.
pub fn wasserstein_edges_kirchhoff(
    net: &Network,
    grid: &GridSpec,
    endpoints: &Endpoints,
    params: &SolverParams,
) -> Result<SolveReport, MetricError> {
    let mut ends = endpoints.clone();
    let edge_mass = |mu: &NetworkMeasure| -> f64 { (0..net.n_edges()).map(|j| mu.edge_mass(net, j)).sum() };
    endpoints.check_shape(grid, net.n_vertices()).map_err(crate::SolveError::from)?;
    let (a, b) = (edge_mass(&ends.initial), edge_mass(&ends.terminal));
    if (a - b).abs() > 1e-12 * a.max(1.0) {
        return Err(MetricError::MassMismatch(a, b));
    }
    ends.terminal.vertex_masses = ends.initial.vertex_masses.clone();
    Ok(solve_with_mode(net, grid, &ends, VertexMode::Frozen, params)?)
}

/// The problem with free vertex exchange (`kappa = 0`).
pub fn w_zero(net: &Network, grid: &GridSpec, endpoints: &Endpoints, params: &SolverParams) -> Result<SolveReport, MetricError> {
    Ok(solve_with_mode(net, grid, endpoints, VertexMode::Free, params)?)
}

/// Bounded-Lipschitz distance of two densities on a uniform edge grid:
/// `max Σ Φ_c (ρ₁ − ρ₀)_c Δx` over `|Φ| ≤ s`, `|ΔΦ| ≤ ℓ Δx`, `s + ℓ ≤ 1`.
pub fn bl_distance_edge(rho0: &[f64], rho1: &[f64], dx: f64) -> Result<f64, MetricError> {
    check_len(rho0, rho1)?;
    if rho0.iter().zip(rho1).all(|(a, b)| a == b) {
        return Ok(0.0);
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let phi: Vec<_> = rho0.iter().zip(rho1).map(|(a, b)| lp.add_var((b - a) * dx, (-1.0, 1.0))).collect();
    let s = lp.add_var(0.0, (0.0, 1.0));
    let l = lp.add_var(0.0, (0.0, 1.0));
    lp.add_constraint([(s, 1.0), (l, 1.0)], ComparisonOp::Le, 1.0);
    for &v in &phi {
        lp.add_constraint([(v, 1.0), (s, -1.0)], ComparisonOp::Le, 0.0);
        lp.add_constraint([(v, -1.0), (s, -1.0)], ComparisonOp::Le, 0.0);
    }
    for w in phi.windows(2) {
        lp.add_constraint([(w[1], 1.0), (w[0], -1.0), (l, -dx)], ComparisonOp::Le, 0.0);
        lp.add_constraint([(w[0], 1.0), (w[1], -1.0), (l, -dx)], ComparisonOp::Le, 0.0);
    }
    let sol = lp.solve().map_err(|e| MetricError::Lp(e.to_string()))?;
    Ok(sol.objective().max(0.0))
}

pub fn bl_distance_vertex(gamma0: f64, gamma1: f64) -> f64 {
    (gamma0 - gamma1).abs()
}

/// `Σ_j d_BL(ρ^j_s, ρ^j_t) + Σ_i |γ^i_s − γ^i_t|` between time nodes `s` and `t`.
pub fn bl_between_slices(field: &TrajectoryField, grid: &GridSpec, s: usize, t: usize) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for j in 0..grid.n_edges() {
        let n = grid.cells(j);
        let a = &field.rho[j][s * n..(s + 1) * n];
        let b = &field.rho[j][t * n..(t + 1) * n];
        total += bl_distance_edge(a, b, grid.dx(j))?;
    }
    for g in &field.gamma {
        total += bl_distance_vertex(g[s], g[t]);
    }
    Ok(total)
}

/// Constant of the bounded-Lipschitz Hölder estimate.
pub fn bl_constant(n_vertices: usize, n_edges: usize, kappa: f64) -> f64 {
    2.0 * (2.0 * (n_vertices + n_edges) as f64).sqrt() * 1f64.max(1.0 / kappa)
}

/// `½ Σ |γ₁ − γ₀|²`; `𝒲²_κ / κ²` never falls below it.
pub fn vertex_mass_bound(gamma0: &[f64], gamma1: &[f64]) -> f64 {
    0.5 * gamma0.iter().zip(gamma1).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaPoint {
    pub kappa: f64,
    pub value: f64,
    pub dual_value: f64,
    pub rel_gap: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `L²` norm in time of the vertex exchange rates.
    pub flux_norm: f64,
    /// Larger of the two Hamilton-Jacobi violations of the reported duals.
    pub hj_residual: f64,
    pub mass_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSweep {
    pub points: Vec<KappaPoint>,
    /// Edge-only reference when the vertex masses agree at both ends.
    pub reference: Option<f64>,
    /// `½ Σ |Δγ|²`.
    pub mass_bound: f64,
    /// `max(0, value_i − value_{i+1})` for consecutive kappas.
    pub monotonicity_defects: Vec<f64>,
}

impl KappaSweep {
    /// Monotone up to the certified gaps of both solves.
    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| {
            let slack = w[0].value - w[0].dual_value + (w[1].value - w[1].dual_value);
            w[0].value <= w[1].value + slack + 1e-12
        })
    }
}

pub fn sweep_kappa(
    net: &Network,
    grid: &GridSpec,
    endpoints: &Endpoints,
    kappas: &[f64],
    params: &SolverParams,
) -> Result<KappaSweep, MetricError> {
    if kappas.is_empty() || kappas.windows(2).any(|w| w[0] >= w[1]) || kappas[0] <= 0.0 {
        return Err(MetricError::Shape("kappa grid must be positive and strictly increasing".into()));
    }
    let solve = |&kappa: &f64| -> Result<KappaPoint, MetricError> {
        let mode = VertexMode::Exchange { kappa };
        let r = solve_with_mode(net, grid, endpoints, mode, params)?;
        let (he, hv) = hj_residual(&r.duals, mode, net, grid)?;
        Ok(KappaPoint {
            kappa,
            value: r.value,
            dual_value: r.dual_value,
            rel_gap: r.rel_gap,
            converged: r.converged,
            iterations: r.iterations,
            flux_norm: r.geodesic.exchange_l2(grid),
            hj_residual: he.max(hv),
            mass_drift: r.geodesic.mass_drift(grid),
        })
    };
    #[cfg(feature = "parallel")]
    let points: Vec<KappaPoint> = {
        use rayon::prelude::*;
        kappas.par_iter().map(solve).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let points: Vec<KappaPoint> = kappas.iter().map(solve).collect::<Result<_, _>>()?;

    let g0 = &endpoints.initial.vertex_masses;
    let g1 = &endpoints.terminal.vertex_masses;
    let reference = if g0 == g1 { Some(wasserstein_edges_kirchhoff(net, grid, endpoints, params)?.value) } else { None };
    let monotonicity_defects = points.windows(2).map(|w| (w[0].value - w[1].value).max(0.0)).collect();
    Ok(KappaSweep { points, reference, mass_bound: vertex_mass_bound(g0, g1), monotonicity_defects })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlDistances {
    pub edges: Vec<f64>,
    pub vertices: Vec<f64>,
    pub total: f64,
}

/// Reference distances between the two endpoint measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointMetrics {
    pub fisher_rao: f64,
    /// Kirchhoff-coupled edge distance; absent when total edge masses differ.
    pub wasserstein_edges: Option<f64>,
    pub wasserstein_edges_converged: Option<bool>,
    /// Per-edge 1-D distances; absent where an edge's mass changes.
    pub per_edge_1d: Vec<Option<f64>>,
    pub bl_distances: BlDistances,
}

pub fn endpoint_metrics(
    net: &Network,
    grid: &GridSpec,
    endpoints: &Endpoints,
    kappa: f64,
    params: &SolverParams,
) -> Result<EndpointMetrics, MetricError> {
    endpoints.check_shape(grid, net.n_vertices()).map_err(crate::SolveError::from)?;
    let (a, b) = (&endpoints.initial, &endpoints.terminal);
    let fisher_rao = fisher_rao(&a.vertex_masses, &b.vertex_masses, kappa)?;
    let edge_total = |m: &NetworkMeasure| (0..net.n_edges()).map(|j| m.edge_mass(net, j)).sum::<f64>();
    let (wasserstein_edges, wasserstein_edges_converged) = if (edge_total(a) - edge_total(b)).abs() <= 1e-12 {
        let r = wasserstein_edges_kirchhoff(net, grid, endpoints, params)?;
        (Some(r.value), Some(r.converged))
    } else {
        (None, None)
    };
    let mut per_edge_1d = Vec::with_capacity(net.n_edges());
    let mut edges = Vec::with_capacity(net.n_edges());
    for (j, e) in net.edges().iter().enumerate() {
        let (ra, rb) = (&a.edge_densities[j], &b.edge_densities[j]);
        let same_mass = (a.edge_mass(net, j) - b.edge_mass(net, j)).abs() <= 1e-12;
        per_edge_1d.push(if same_mass { Some(wasserstein_edge_1d(ra, rb, e.length)?) } else { None });
        edges.push(bl_distance_edge(ra, rb, grid.dx(j))?);
    }
    let vertices: Vec<f64> = a.vertex_masses.iter().zip(&b.vertex_masses).map(|(x, y)| bl_distance_vertex(*x, *y)).collect();
    let total = edges.iter().chain(&vertices).sum();
    Ok(EndpointMetrics {
        fisher_rao,
        wasserstein_edges,
        wasserstein_edges_converged,
        per_edge_1d,
        bl_distances: BlDistances { edges, vertices, total },
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}
