//! Action density, its subsolution sets and the induced proximal maps.
//!
//! `A(a, b) = b²/(2a)` is the support function of the paraboloid
//! `S_c = {(α, β) : α + β²/(2c) ≤ 0}` at `c = 1`; at general `c` the support
//! function is `c·A`. All proximal maps go through the projection onto `S_c`.

use serde::Serialize;

use crate::grid::{GridSpec, TrajectoryField};

pub fn action_density(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        b * b / (2.0 * a)
    } else if a == 0.0 && b == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `{(α, s) : α + s²/(2c) ≤ 0}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParaboloidSet {
    pub curvature: f64,
}

impl ParaboloidSet {
    pub fn new(curvature: f64) -> Self {
        assert!(curvature > 0.0, "paraboloid curvature must be positive");
        ParaboloidSet { curvature }
    }

    pub fn contains(&self, alpha: f64, s: f64) -> bool {
        alpha + s * s / (2.0 * self.curvature) <= 0.0
    }

    pub fn project(&self, alpha: f64, s: f64) -> (f64, f64) {
        project_paraboloid(alpha, s, self.curvature)
    }
}

const ROOT_MAX_ITERS: usize = 200;

/// Euclidean projection onto `{α + s²/(2c) ≤ 0}`.
///
/// Outside points land on the boundary at `s* = c s/(c + μ)`, where the KKT
/// multiplier `μ ≥ 0` is the root of the decreasing function
/// `g(μ) = α − μ + c s²/(2(c + μ)²)`.
pub fn project_paraboloid(alpha: f64, s: f64, c: f64) -> (f64, f64) {
    let excess = alpha + s * s / (2.0 * c);
    if excess <= 0.0 {
        return (alpha, s);
    }
    if s == 0.0 {
        return (0.0, 0.0);
    }
    let g = |mu: f64| alpha - mu + c * s * s / (2.0 * (c + mu) * (c + mu));
    let (mut lo, mut hi) = (0.0f64, excess);
    let mut mu = if alpha > 0.0 { alpha.min(hi) } else { 0.5 * hi };
    let scale = 1.0 + alpha.abs() + excess;
    for _ in 0..ROOT_MAX_ITERS {
        let gv = g(mu);
        if gv.abs() <= 1e-15 * scale {
            break;
        }
        if gv > 0.0 {
            lo = mu;
        } else {
            hi = mu;
        }
        let dg = -1.0 - c * s * s / ((c + mu) * (c + mu) * (c + mu));
        let next = mu - gv / dg;
        mu = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-16 * scale {
            break;
        }
    }
    let s_star = c * s / (c + mu);
    (-s_star * s_star / (2.0 * c), s_star)
}

/// Projection onto `{(a, b, c⃗) : a + |b − mean(c⃗)|²/(2κ²) ≤ 0}`.
///
/// Only the component of `(b, c⃗)` along `w = (1, −1/d, …, −1/d)` enters the
/// constraint, so the problem reduces to a 2-D paraboloid with curvature
/// `κ²/‖w‖²`.
pub fn project_vertex_set(a: f64, b: f64, c: &[f64], kappa: f64) -> (f64, f64, Vec<f64>) {
    assert!(kappa > 0.0 && !c.is_empty());
    let d = c.len() as f64;
    let s = b - c.iter().sum::<f64>() / d;
    let wn2 = 1.0 + 1.0 / d;
    let wn = wn2.sqrt();
    let t = s / wn;
    let (a_star, t_star) = project_paraboloid(a, t, kappa * kappa / wn2);
    let shift = (t_star - t) / wn;
    let b_star = b + shift;
    let c_star = c.iter().map(|&cj| cj - shift / d).collect();
    (a_star, b_star, c_star)
}

/// `prox_{σ c A}(x) = x − σ Π_{S_c}(x/σ)`. The output always has `a' ≥ 0`.
pub fn prox_action(a: f64, b: f64, sigma: f64, c: f64) -> (f64, f64) {
    let (pa, pb) = project_paraboloid(a / sigma, b / sigma, c);
    ((a - sigma * pa).max(0.0), b - sigma * pb)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionBreakdown {
    pub edge: f64,
    pub vertex: f64,
    pub total: f64,
    pub per_edge: Vec<f64>,
    pub per_vertex: Vec<f64>,
}

/// Discrete action of a trajectory. Face quadrature weights are half a cell
/// on the two boundary faces of each edge; `kappa = 0` drops the vertex term.
pub fn action_eval(field: &TrajectoryField, kappa: f64, grid: &GridSpec) -> ActionBreakdown {
    let p = grid.steps();
    let dt = grid.dt();
    let per_edge: Vec<f64> = (0..grid.n_edges())
        .map(|j| {
            let n = grid.cells(j);
            let mut sum = 0.0;
            for k in 0..p {
                for e in 0..=n {
                    let a = action_density(field.face_density(grid, j, k, e), field.flux_at(grid, j, k, e));
                    sum += grid.face_weight(j, e) * dt * a;
                }
            }
            sum
        })
        .collect();
    let per_vertex: Vec<f64> = field
        .gamma
        .iter()
        .zip(&field.exchange)
        .map(|(g, f)| {
            if kappa == 0.0 {
                return 0.0;
            }
            (0..p).map(|k| kappa * kappa * dt * action_density(0.5 * (g[k] + g[k + 1]), f[k])).sum()
        })
        .collect();
    let edge: f64 = per_edge.iter().sum();
    let vertex: f64 = per_vertex.iter().sum();
    ActionBreakdown { edge, vertex, total: edge + vertex, per_edge, per_vertex }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Endpoints;
    use crate::netgraph::{fixtures::segment, NetworkMeasure};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Brute-force projection onto the paraboloid: scan the boundary curve
    /// `α = −s²/(2c)` and refine the best sample by ternary search.
    fn projection_oracle(alpha: f64, s: f64, c: f64) -> (f64, f64) {
        if alpha + s * s / (2.0 * c) <= 0.0 {
            return (alpha, s);
        }
        let dist = |u: f64| {
            let a = -u * u / (2.0 * c);
            (a - alpha).powi(2) + (u - s).powi(2)
        };
        let r = s.abs() + alpha.abs() + 1.0;
        let m = 20_000;
        let mut best = -r;
        for i in 0..=m {
            let u = -r + 2.0 * r * i as f64 / m as f64;
            if dist(u) < dist(best) {
                best = u;
            }
        }
        let h = 2.0 * r / m as f64;
        let (mut lo, mut hi) = (best - h, best + h);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if dist(m1) < dist(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let u = 0.5 * (lo + hi);
        (-u * u / (2.0 * c), u)
    }

    #[test]
    fn density_examples() {
        assert_eq!(action_density(1.0, 2.0), 2.0);
        assert_eq!(action_density(0.0, 0.0), 0.0);
        assert_eq!(action_density(0.0, 1.0), f64::INFINITY);
        assert_eq!(action_density(-1.0, 0.0), f64::INFINITY);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_paraboloid(-1.0, 0.0, 1.0), (-1.0, 0.0));
        let (a, s) = project_paraboloid(1.0, 0.0, 1.0);
        assert!(close(a, 0.0, 1e-15) && s == 0.0);
        let (a, s) = project_paraboloid(0.0, 2.0, 1.0);
        let (oa, os) = projection_oracle(0.0, 2.0, 1.0);
        assert!(close(a, oa, 1e-4) && close(s, os, 1e-4));
        assert!(close(a, -0.6956, 1e-4) && close(s, 1.1795, 1e-4));
        assert!((s.powi(3) + 2.0 * s - 4.0).abs() < 1e-12);
    }

    /// Dense grid search over a box in `(a, b, c)` for the three-dimensional
    /// vertex set with `d = 1`.
    #[test]
    fn vertex_projection_matches_grid_search() {
        let (a, b, c) = project_vertex_set(1.0, 1.0, &[1.0], 1.0);
        assert!(close(a, 0.0, 1e-14) && close(b, 1.0, 1e-14) && close(c[0], 1.0, 1e-14));

        let point = (0.3, 1.2, -0.4);
        let kappa = 0.8f64;
        let m = 120;
        let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
        for ia in 0..=m {
            let pa = -1.0 + 1.5 * ia as f64 / m as f64;
            for ib in 0..=m {
                let pb = -0.5 + 2.0 * ib as f64 / m as f64;
                for ic in 0..=m {
                    let pc = -1.5 + 2.0 * ic as f64 / m as f64;
                    if pa + (pb - pc).powi(2) / (2.0 * kappa * kappa) > 0.0 {
                        continue;
                    }
                    let d = (pa - point.0).powi(2) + (pb - point.1).powi(2) + (pc - point.2).powi(2);
                    if d < best.0 {
                        best = (d, pa, pb, pc);
                    }
                }
            }
        }
        let (a, b, c) = project_vertex_set(point.0, point.1, &[point.2], kappa);
        let h = 2.0 / m as f64;
        assert!(close(a, best.1, 2.0 * h) && close(b, best.2, 2.0 * h) && close(c[0], best.3, 2.0 * h));
        let d = (a - point.0).powi(2) + (b - point.1).powi(2) + (c[0] - point.2).powi(2);
        assert!(d <= best.0 + 1e-12);
    }

    #[test]
    fn prox_of_nonpositive_is_zero() {
        for a in [-2.0, -0.5, 0.0] {
            assert_eq!(prox_action(a, 0.0, 1.0, 1.0), (0.0, 0.0));
        }
    }

    #[test]
    fn prox_matches_grid_minimization() {
        let (xa, xb, sigma) = (0.7, -1.3, 0.6);
        let obj = |a: f64, b: f64| action_density(a, b) + ((a - xa).powi(2) + (b - xb).powi(2)) / (2.0 * sigma);
        let (pa, pb) = prox_action(xa, xb, sigma, 1.0);
        let m = 800;
        let mut best = f64::INFINITY;
        for i in 1..=m {
            let a = 3.0 * i as f64 / m as f64;
            for l in 0..=m {
                let b = -3.0 + 3.0 * l as f64 / m as f64;
                best = best.min(obj(a, b));
            }
        }
        assert!(obj(pa, pb) <= best + 1e-9);
        assert!(obj(pa, pb) >= best - 1e-3);
    }

    #[test]
    fn action_eval_examples() {
        let net = segment(1.0);
        let grid = GridSpec::uniform(&net, 2, 1).unwrap();
        let mu = NetworkMeasure { edge_densities: vec![vec![1.0, 1.0]], vertex_masses: vec![0.0, 0.0] };
        let ends = Endpoints { initial: mu.clone(), terminal: mu };
        let mut field = crate::grid::linear_seed(&ends, &grid);
        assert_eq!(action_eval(&field, 1.0, &grid).total, 0.0);

        // interior face of width Δx = ½, Δt = 1: weight ½, so F = 2√2 gives 2
        field.flux[0][1] = 8f64.sqrt();
        let a = action_eval(&field, 1.0, &grid);
        assert!(close(a.edge, 2.0, 1e-14));

        let mut field = TrajectoryField::zeros(&grid, 2);
        field.gamma[0] = vec![1.0, 1.0];
        field.exchange[0] = vec![1.0];
        let a = action_eval(&field, 2.0, &grid);
        assert!(close(a.vertex, 2.0, 1e-15));
        assert!(close(a.total, a.edge + a.vertex, 0.0));
    }

    #[test]
    fn infinite_action_propagates() {
        let net = segment(1.0);
        let grid = GridSpec::uniform(&net, 2, 1).unwrap();
        let mut field = TrajectoryField::zeros(&grid, 2);
        field.flux[0][0] = 0.5;
        assert_eq!(action_eval(&field, 1.0, &grid).total, f64::INFINITY);
    }

    proptest! {
        #[test]
        fn one_homogeneous(a in 1e-3f64..10.0, b in -10.0f64..10.0, l in 1e-2f64..100.0) {
            let lhs = action_density(l * a, l * b);
            let rhs = l * action_density(a, b);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }

        #[test]
        fn jointly_convex(a1 in 1e-3f64..5.0, b1 in -5.0f64..5.0, a2 in 1e-3f64..5.0, b2 in -5.0f64..5.0, t in 0.0f64..1.0) {
            let mid = action_density(t * a1 + (1.0 - t) * a2, t * b1 + (1.0 - t) * b2);
            let chord = t * action_density(a1, b1) + (1.0 - t) * action_density(a2, b2);
            prop_assert!(mid <= chord + 1e-12 * chord.max(1.0));
        }

        /// `A(a, b) = sup_{S_E} aα + bβ`, by scanning the boundary of `S_E`.
        #[test]
        fn fenchel_identity(a in 0.05f64..3.0, b in -3.0f64..3.0) {
            let target = action_density(a, b);
            let r = 4.0 * (b.abs() / a + 1.0);
            let m = 20_000;
            let mut best = f64::NEG_INFINITY;
            for i in 0..=m {
                let beta = -r + 2.0 * r * i as f64 / m as f64;
                best = best.max(-a * beta * beta / 2.0 + b * beta);
            }
            prop_assert!((best - target).abs() <= 1e-3 * target.max(1e-3));
        }

        #[test]
        fn projection_matches_oracle(alpha in -3.0f64..3.0, s in -3.0f64..3.0, c in 0.1f64..10.0) {
            let (pa, ps) = project_paraboloid(alpha, s, c);
            let (oa, os) = projection_oracle(alpha, s, c);
            prop_assert!((pa - oa).abs() < 1e-6 && (ps - os).abs() < 1e-6);
        }

        #[test]
        fn projection_idempotent_and_nonexpansive(
            a1 in -5.0f64..5.0, s1 in -5.0f64..5.0, a2 in -5.0f64..5.0, s2 in -5.0f64..5.0, c in 0.05f64..20.0
        ) {
            let p1 = project_paraboloid(a1, s1, c);
            let pp = project_paraboloid(p1.0, p1.1, c);
            prop_assert!((pp.0 - p1.0).abs() <= 1e-12 && (pp.1 - p1.1).abs() <= 1e-12);
            prop_assert!(p1.0 + p1.1 * p1.1 / (2.0 * c) <= 1e-12);
            let p2 = project_paraboloid(a2, s2, c);
            let before = (a1 - a2).hypot(s1 - s2);
            let after = (p1.0 - p2.0).hypot(p1.1 - p2.1);
            prop_assert!(after <= before + 1e-12);
        }

        #[test]
        fn prox_is_optimal(xa in -3.0f64..3.0, xb in -3.0f64..3.0, sigma in 0.05f64..5.0,
                           za in 1e-3f64..4.0, zb in -4.0f64..4.0) {
            let (ya, yb) = prox_action(xa, xb, sigma, 1.0);
            prop_assert!(ya >= 0.0);
            let obj = |a: f64, b: f64| action_density(a, b) + ((a - xa).powi(2) + (b - xb).powi(2)) / (2.0 * sigma);
            let fy = if ya == 0.0 && yb.abs() < 1e-12 { obj(0.0, 0.0) } else { obj(ya, yb) };
            prop_assert!(fy <= obj(za, zb) + 1e-9);
        }

        #[test]
        fn vertex_projection_shift_equivariant(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in proptest::collection::vec(-3.0f64..3.0, 1..5),
            k in -5.0f64..5.0, kappa in 0.2f64..4.0
        ) {
            let (a0, b0, c0) = project_vertex_set(a, b, &c, kappa);
            let shifted: Vec<f64> = c.iter().map(|x| x + k).collect();
            let (a1, b1, c1) = project_vertex_set(a, b + k, &shifted, kappa);
            prop_assert!((a1 - a0).abs() < 1e-10);
            prop_assert!((b1 - b0 - k).abs() < 1e-10);
            for (x, y) in c1.iter().zip(&c0) {
                prop_assert!((x - y - k).abs() < 1e-10);
            }
            let s = b0 - c0.iter().sum::<f64>() / c0.len() as f64;
            prop_assert!(a0 + s * s / (2.0 * kappa * kappa) <= 1e-10);
        }

        #[test]
        fn feasible_vertex_points_are_fixed(a in -3.0f64..0.0, c in proptest::collection::vec(-3.0f64..3.0, 1..5)) {
            let b = c.iter().sum::<f64>() / c.len() as f64;
            let (pa, pb, pc) = project_vertex_set(a, b, &c, 1.0);
            prop_assert_eq!(pa, a);
            prop_assert!((pb - b).abs() < 1e-14);
            for (x, y) in pc.iter().zip(&c) {
                prop_assert!((x - y).abs() < 1e-14);
            }
        }
    }
}
