//! Barrier interior-point solver for the fully discrete transport problem on
//! a single edge.
//!
//! The problem is assembled here from scratch (cell densities at time
//! nodes, fluxes on faces at interval midpoints, vertex masses with exchange
//! equal to the boundary inflow) and solved with a dense equality-constrained
//! Newton method on a log barrier. Dense linear algebra comes from nalgebra,
//! so nothing is shared with the first-order solver except the model.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct TinyProblem {
    pub cells: usize,
    pub steps: usize,
    pub length: f64,
    pub rho0: Vec<f64>,
    pub rho1: Vec<f64>,
    /// `[tail, head]` vertex masses.
    pub gamma0: [f64; 2],
    pub gamma1: [f64; 2],
    pub kappa: f64,
}

/// Affine function `c + Σ a_i x_i`.
#[derive(Debug, Clone, Default)]
struct Affine {
    c: f64,
    terms: Vec<(usize, f64)>,
}

impl Affine {
    fn constant(c: f64) -> Self {
        Affine { c, terms: Vec::new() }
    }

    fn var(i: usize) -> Self {
        Affine { c: 0.0, terms: vec![(i, 1.0)] }
    }

    fn scaled_add(mut self, s: f64, o: &Affine) -> Self {
        self.c += s * o.c;
        self.terms.extend(o.terms.iter().map(|&(i, a)| (i, s * a)));
        self
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.c + self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>()
    }

    fn dense(&self, n: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        for &(i, a) in &self.terms {
            v[i] += a;
        }
        v
    }
}

/// `w · b²/(2a)`.
struct Term {
    w: f64,
    a: Affine,
    b: Affine,
}

struct Model {
    n_vars: usize,
    terms: Vec<Term>,
    /// Variables under the log barrier.
    positive: Vec<usize>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
}

fn build(p: &TinyProblem) -> Model {
    let (n, steps) = (p.cells, p.steps);
    let dx = p.length / n as f64;
    let dt = 1.0 / steps as f64;
    let n_rho = (steps - 1) * n;
    let n_flux = steps * (n + 1);
    let n_vars = n_rho + n_flux + 2 * (steps - 1);

    let rho = |k: usize, c: usize| -> Affine {
        if k == 0 {
            Affine::constant(p.rho0[c])
        } else if k == steps {
            Affine::constant(p.rho1[c])
        } else {
            Affine::var((k - 1) * n + c)
        }
    };
    let flux = |k: usize, e: usize| Affine::var(n_rho + k * (n + 1) + e);
    let gamma = |i: usize, k: usize| -> Affine {
        if k == 0 {
            Affine::constant(p.gamma0[i])
        } else if k == steps {
            Affine::constant(p.gamma1[i])
        } else {
            Affine::var(n_rho + n_flux + i * (steps - 1) + k - 1)
        }
    };
    // exchange equals the inflow: out of face 0 at the tail, into the head
    let inflow = |i: usize, k: usize| -> Affine {
        if i == 0 {
            Affine::default().scaled_add(-1.0, &flux(k, 0))
        } else {
            flux(k, n)
        }
    };

    let mut terms = Vec::new();
    for k in 0..steps {
        for e in 0..=n {
            let (a, w) = if e == 0 || e == n {
                let c = if e == 0 { 0 } else { n - 1 };
                (Affine::default().scaled_add(0.5, &rho(k, c)).scaled_add(0.5, &rho(k + 1, c)), 0.5 * dx)
            } else {
                let a = Affine::default()
                    .scaled_add(0.25, &rho(k, e - 1))
                    .scaled_add(0.25, &rho(k, e))
                    .scaled_add(0.25, &rho(k + 1, e - 1))
                    .scaled_add(0.25, &rho(k + 1, e));
                (a, dx)
            };
            terms.push(Term { w: w * dt, a, b: flux(k, e) });
        }
        for i in 0..2 {
            let a = Affine::default().scaled_add(0.5, &gamma(i, k)).scaled_add(0.5, &gamma(i, k + 1));
            terms.push(Term { w: p.kappa * p.kappa * dt, a, b: inflow(i, k) });
        }
    }

    let mut rows: Vec<Affine> = Vec::new();
    for k in 0..steps {
        for c in 0..n {
            rows.push(
                Affine::default()
                    .scaled_add(1.0 / dt, &rho(k + 1, c))
                    .scaled_add(-1.0 / dt, &rho(k, c))
                    .scaled_add(1.0 / dx, &flux(k, c + 1))
                    .scaled_add(-1.0 / dx, &flux(k, c)),
            );
        }
        for i in 0..2 {
            rows.push(
                Affine::default()
                    .scaled_add(1.0 / dt, &gamma(i, k + 1))
                    .scaled_add(-1.0 / dt, &gamma(i, k))
                    .scaled_add(-1.0, &inflow(i, k)),
            );
        }
    }
    let mut a_eq = DMatrix::zeros(rows.len(), n_vars);
    let mut b_eq = DVector::zeros(rows.len());
    for (r, row) in rows.iter().enumerate() {
        for &(i, a) in &row.terms {
            a_eq[(r, i)] += a;
        }
        b_eq[r] = -row.c;
    }
    let positive = (0..n_rho).chain(n_rho + n_flux..n_vars).collect();
    Model { n_vars, terms, positive, a_eq, b_eq }
}

impl Model {
    fn objective(&self, x: &DVector<f64>) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let (a, b) = (t.a.eval(x), t.b.eval(x));
                t.w * b * b / (2.0 * a)
            })
            .sum()
    }

    fn feasible(&self, x: &DVector<f64>) -> bool {
        self.positive.iter().all(|&i| x[i] > 0.0)
    }

    /// Value, gradient and Hessian of `t·J + barrier`.
    fn local(&self, x: &DVector<f64>, t: f64) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.n_vars;
        let mut val = 0.0;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for term in &self.terms {
            let (a, b) = (term.a.eval(x), term.b.eval(x));
            let (da, db) = (term.a.dense(n), term.b.dense(n));
            val += t * term.w * b * b / (2.0 * a);
            g += (t * term.w) * (&db * (b / a) - &da * (b * b / (2.0 * a * a)));
            let v = &db - &da * (b / a);
            h += (t * term.w / a) * &v * v.transpose();
        }
        for &i in &self.positive {
            val -= x[i].ln();
            g[i] -= 1.0 / x[i];
            h[(i, i)] += 1.0 / (x[i] * x[i]);
        }
        (val, g, h)
    }

    fn barrier_value(&self, x: &DVector<f64>, t: f64) -> f64 {
        t * self.objective(x) - self.positive.iter().map(|&i| x[i].ln()).sum::<f64>()
    }
}

/// Feasible start: linear interpolation of all masses, fluxes from the
/// least-squares solution of the remaining linear system.
fn start(m: &Model, p: &TinyProblem) -> Result<DVector<f64>, String> {
    let (n, steps) = (p.cells, p.steps);
    let mut x = DVector::zeros(m.n_vars);
    let n_rho = (steps - 1) * n;
    let n_flux = steps * (n + 1);
    for k in 1..steps {
        let s = k as f64 / steps as f64;
        for c in 0..n {
            x[(k - 1) * n + c] = (1.0 - s) * p.rho0[c] + s * p.rho1[c];
        }
        for i in 0..2 {
            x[n_rho + n_flux + i * (steps - 1) + k - 1] = (1.0 - s) * p.gamma0[i] + s * p.gamma1[i];
        }
    }
    let flux_cols = m.a_eq.columns(n_rho, n_flux).into_owned();
    let rhs = &m.b_eq - &m.a_eq * &x;
    let f = flux_cols.svd(true, true).solve(&rhs, 1e-12)?;
    x.rows_mut(n_rho, n_flux).copy_from(&f);
    let residual = (&m.a_eq * &x - &m.b_eq).amax();
    if residual > 1e-10 {
        return Err(format!("no feasible start (residual {residual:e})"));
    }
    Ok(x)
}

/// Optimal value of the discrete problem. Endpoint masses must be positive.
pub fn interior_point(p: &TinyProblem) -> Result<f64, String> {
    let all = p.rho0.iter().chain(&p.rho1).chain(&p.gamma0).chain(&p.gamma1);
    if all.clone().any(|v| !(*v > 0.0)) || p.rho0.len() != p.cells || p.rho1.len() != p.cells {
        return Err("endpoints must be positive and match the cell count".into());
    }
    if p.steps < 2 || p.kappa <= 0.0 {
        return Err("need at least two steps and a positive kappa".into());
    }
    let m = build(p);
    let mut x = start(&m, p)?;
    // moves stay in the null space of the constraints, so every iterate is
    // feasible up to rounding; the rows are rank deficient by one (global
    // mass balance), which the eigenvalue threshold absorbs
    let ata = m.a_eq.transpose() * &m.a_eq;
    let eig = ata.symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let cols: Vec<usize> = (0..m.n_vars).filter(|&i| eig.eigenvalues[i] <= 1e-12 * top).collect();
    let z = DMatrix::from_fn(m.n_vars, cols.len(), |r, c| eig.eigenvectors[(r, cols[c])]);
    let barrier_terms = m.positive.len() as f64;
    let mut t = 1.0;
    while barrier_terms / t > 1e-11 {
        for _ in 0..200 {
            let (_, g, h) = m.local(&x, t);
            let gy = z.transpose() * &g;
            let hy = z.transpose() * &h * &z;
            let dy = hy.cholesky().ok_or("reduced Hessian not positive definite")?.solve(&(-&gy));
            let dx = &z * &dy;
            let decrement = -gy.dot(&dy);
            if decrement / 2.0 < 1e-12 {
                break;
            }
            let f0 = m.barrier_value(&x, t);
            let mut s = 1.0;
            loop {
                let trial = &x + &dx * s;
                if m.feasible(&trial) && m.barrier_value(&trial, t) <= f0 - 0.25 * s * decrement {
                    x = trial;
                    break;
                }
                s *= 0.5;
                if s < 1e-14 {
                    return Err("line search failed".into());
                }
            }
        }
        t *= 8.0;
    }
    let residual = (&m.a_eq * &x - &m.b_eq).amax();
    if residual > 1e-9 {
        return Err(format!("interior point lost feasibility (residual {residual:e})"));
    }
    Ok(m.objective(&x))
}
