//! The acceptance properties, each checked on seeded instances.
//!
//! Every solve made by a criterion is logged, and the duality and mass
//! criteria are evaluated over that log once the others have run.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;
use std::time::Instant;

use netot_core::gradflow::{simulate, transmission_defect, EnergySpec, FlowState, VertexEnergy};
use netot_core::grid::{Endpoints, GridSpec};
use netot_core::metrics::{
    bl_between_slices, bl_constant, fisher_rao, fisher_rao_discrete, loglog_slope, sweep_kappa, wasserstein_edge_1d,
    wasserstein_edges_kirchhoff, KappaSweep,
};
use netot_core::netgraph::{fixtures, Network, NetworkMeasure};
use netot_core::solver::{hj_residual, optimality_residual, solve_with_mode, SolveReport, SolverParams, VertexMode};
use rand::Rng;

use crate::instances::{self, bump, node_compatible, node_incompatible, random_measure, rng, segment_bumps, suite_params, y_grid};
use crate::oracle::{interior_point, TinyProblem};

pub const GAP_TOL: f64 = 1e-4;
pub const HJ_TOL: f64 = 1e-3;
pub const MASS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// The sizes and instance counts of the acceptance table.
    Full,
    /// Fewer instances and one level coarser refinement studies.
    Quick,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} [{:>2}] {}: {} ({:.1} s)", self.id, self.name, self.detail, self.seconds)
    }
}

#[derive(Debug, Clone)]
pub struct SolveRecord {
    pub label: String,
    pub value: f64,
    pub rel_gap: f64,
    pub hj: f64,
    pub converged: bool,
    pub mass_drift: f64,
}

pub struct Suite {
    scale: Scale,
    params: SolverParams,
    log: Mutex<Vec<SolveRecord>>,
    segment_cache: Mutex<HashMap<(usize, usize), SolveReport>>,
}

type Check = Result<(bool, String), String>;

impl Suite {
    pub fn new(scale: Scale) -> Self {
        Suite { scale, params: suite_params(), log: Mutex::new(Vec::new()), segment_cache: Mutex::new(HashMap::new()) }
    }

    fn quick(&self) -> bool {
        self.scale == Scale::Quick
    }

    pub fn records(&self) -> Vec<SolveRecord> {
        self.log.lock().unwrap().clone()
    }

    fn record(&self, label: String, r: &SolveReport, net: &Network, grid: &GridSpec) -> Result<(), String> {
        let (he, hv) = hj_residual(&r.duals, r.mode, net, grid).map_err(|e| e.to_string())?;
        self.log.lock().unwrap().push(SolveRecord {
            label,
            value: r.value,
            rel_gap: r.rel_gap,
            hj: he.max(hv),
            converged: r.converged,
            mass_drift: r.geodesic.mass_drift(grid),
        });
        Ok(())
    }

    fn solve(
        &self,
        label: impl Into<String>,
        net: &Network,
        grid: &GridSpec,
        ends: &Endpoints,
        mode: VertexMode,
    ) -> Result<SolveReport, String> {
        let r = solve_with_mode(net, grid, ends, mode, &self.params).map_err(|e| e.to_string())?;
        self.record(label.into(), &r, net, grid)?;
        Ok(r)
    }

    fn record_sweep(&self, label: &str, sweep: &KappaSweep) {
        let mut log = self.log.lock().unwrap();
        for p in &sweep.points {
            log.push(SolveRecord {
                label: format!("{label} kappa={}", p.kappa),
                value: p.value,
                rel_gap: p.rel_gap,
                hj: p.hj_residual,
                converged: p.converged,
                mass_drift: p.mass_drift,
            });
        }
    }

    /// Bump transport on the unit segment at `kappa = 1`, shared by the
    /// oracle and the optimality criteria.
    fn segment(&self, cells: usize, steps: usize) -> Result<(SolveReport, instances::Instance), String> {
        let inst = segment_bumps(cells, steps);
        if let Some(r) = self.segment_cache.lock().unwrap().get(&(cells, steps)) {
            return Ok((r.clone(), inst));
        }
        let r = self.solve(
            format!("segment {cells}x{steps}"),
            &inst.network,
            &inst.grid,
            &inst.endpoints,
            VertexMode::Exchange { kappa: 1.0 },
        )?;
        self.segment_cache.lock().unwrap().insert((cells, steps), r.clone());
        Ok((r, inst))
    }

    fn distance(&self, label: String, net: &Network, grid: &GridSpec, a: &NetworkMeasure, b: &NetworkMeasure) -> Result<f64, String> {
        let ends = Endpoints { initial: a.clone(), terminal: b.clone() };
        Ok(self.solve(label, net, grid, &ends, VertexMode::Exchange { kappa: 1.0 })?.value.max(0.0).sqrt())
    }

    fn metric_axioms(&self) -> Check {
        let count = if self.quick() { 2 } else { 5 };
        let (mut worst_id, mut worst_sym, mut worst_tri, mut slowest) = (0.0f64, 0.0f64, f64::NEG_INFINITY, 0.0f64);
        for s in 0..count {
            let start = Instant::now();
            let mut r = rng(100 + s);
            let (net, grid) = y_grid(32, 16);
            let a = random_measure(&net, &grid, &mut r);
            let b = random_measure(&net, &grid, &mut r);
            let c = random_measure(&net, &grid, &mut r);
            let d = |x: &NetworkMeasure, y: &NetworkMeasure, name: &str| self.distance(format!("axioms #{s} {name}"), &net, &grid, x, y);
            let aa = d(&a, &a, "aa")?;
            let ab = d(&a, &b, "ab")?;
            let ba = d(&b, &a, "ba")?;
            let bc = d(&b, &c, "bc")?;
            let ac = d(&a, &c, "ac")?;
            worst_id = worst_id.max(aa);
            worst_sym = worst_sym.max((ab - ba).abs() / ab.max(ba));
            // relative excess of each side over the sum of the other two
            let ab = 0.5 * (ab + ba);
            for (x, y, z) in [(ac, ab, bc), (ab, ac, bc), (bc, ab, ac)] {
                worst_tri = worst_tri.max(x / (y + z) - 1.0);
            }
            slowest = slowest.max(start.elapsed().as_secs_f64());
        }
        let ok = worst_id <= 1e-3 && worst_sym <= 0.02 && worst_tri <= 0.02 && slowest <= 60.0;
        Ok((
            ok,
            format!("{count} instances; max W(a,a) {worst_id:.1e}, max asymmetry {worst_sym:.2e}, max triangle excess {worst_tri:.2e}, slowest {slowest:.1} s"),
        ))
    }

    fn levels(&self) -> [(usize, usize); 3] {
        if self.quick() {
            [(16, 8), (32, 16), (64, 32)]
        } else {
            [(32, 16), (64, 32), (128, 64)]
        }
    }

    fn oracle_1d(&self) -> Check {
        let [_, coarse, fine] = self.levels();
        let mut errs = Vec::new();
        for (n, p) in [coarse, fine] {
            let (r, inst) = self.segment(n, p)?;
            let exact = wasserstein_edge_1d(&inst.endpoints.initial.edge_densities[0], &inst.endpoints.terminal.edge_densities[0], 1.0)
                .map_err(|e| e.to_string())?;
            errs.push((r.value - exact).abs() / exact);
        }
        let ok = errs[0] <= 0.05 && errs[1] < errs[0];
        Ok((ok, format!("relative error {:.3e} at {}x{}, {:.3e} at {}x{}", errs[0], coarse.0, coarse.1, errs[1], fine.0, fine.1)))
    }

    fn sandwich(&self) -> Check {
        let count = if self.quick() { 2 } else { 5 };
        let kappa = 1.0;
        let (mut worst_lo, mut worst_hi, mut worst_bl) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0f64);
        for s in 0..count {
            let mut r = rng(200 + s);
            let inst = node_compatible(&mut r, 32, 16);
            let (net, grid, ends) = (&inst.network, &inst.grid, &inst.endpoints);
            let w = self.solve(format!("sandwich #{s}"), net, grid, ends, VertexMode::Exchange { kappa })?;
            let we = wasserstein_edges_kirchhoff(net, grid, ends, &self.params).map_err(|e| e.to_string())?;
            self.record(format!("sandwich #{s} edges"), &we, net, grid)?;
            let fr = fisher_rao(&ends.initial.vertex_masses, &ends.terminal.vertex_masses, kappa).map_err(|e| e.to_string())?;
            worst_lo = worst_lo.max(fr / w.value - 1.0);
            worst_hi = worst_hi.max(w.value / we.value - 1.0);
            let c = bl_constant(net.n_vertices(), net.n_edges(), kappa);
            let p = grid.steps();
            for a in 0..=p {
                for b in a + 1..=p {
                    let d = bl_between_slices(&w.geodesic, grid, a, b).map_err(|e| e.to_string())?;
                    let bound = c * w.value.sqrt() * ((b - a) as f64 * grid.dt()).sqrt();
                    worst_bl = worst_bl.max(d / bound);
                }
            }
        }
        let ok = worst_lo <= 0.01 && worst_hi <= 0.01 && worst_bl <= 1.0;
        Ok((ok, format!("{count} instances; max FR/W - 1 = {worst_lo:.2e}, max W/W_E - 1 = {worst_hi:.2e}, max BL ratio {worst_bl:.3}")))
    }

    fn monotonicity(&self) -> Check {
        let kappas = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
        let (n, p) = if self.quick() { (16, 8) } else { (32, 16) };
        let mut r = rng(300);
        let comp = node_compatible(&mut r, n, p);
        let inc = node_incompatible(&mut r, n, p);
        let run =
            |i: &instances::Instance| sweep_kappa(&i.network, &i.grid, &i.endpoints, &kappas, &self.params).map_err(|e| e.to_string());
        let sc = run(&comp)?;
        let si = run(&inc)?;
        self.record_sweep("sweep compatible", &sc);
        self.record_sweep("sweep incompatible", &si);

        let reference = sc.reference.ok_or("compatible instance has no edge reference")?;
        let last = sc.points.last().unwrap().value;
        let limit_err = (last - reference).abs() / reference;
        let norms: Vec<f64> = sc.points.iter().map(|q| q.flux_norm).collect();
        let slope = loglog_slope(&kappas, &norms);
        let lower_ok = si.points.iter().all(|q| q.value >= q.kappa * q.kappa * si.mass_bound * (1.0 - 1e-9));
        let min_ratio = si.points.iter().map(|q| q.value / (q.kappa * q.kappa * si.mass_bound)).fold(f64::INFINITY, f64::min);
        let ok = sc.is_monotone() && si.is_monotone() && limit_err <= 0.05 && slope <= -0.8 && lower_ok;
        Ok((
            ok,
            format!(
                "monotone {}/{}; |W(16) - W_E|/W_E = {limit_err:.3e}; flux slope {slope:.3}; min W/(kappa^2 bound) = {min_ratio:.3}",
                sc.is_monotone(),
                si.is_monotone()
            ),
        ))
    }

    fn vertex_hellinger(&self) -> Check {
        let count = if self.quick() { 10 } else { 20 };
        let mut r = rng(400);
        let mut worst = 0.0f64;
        for _ in 0..count {
            let g0: f64 = r.gen_range(0.0..1.0);
            let g1: f64 = r.gen_range(0.0..1.0);
            let kappa: f64 = r.gen_range(0.25..4.0);
            let exact = fisher_rao(&[g0], &[g1], kappa).map_err(|e| e.to_string())?;
            let disc = fisher_rao_discrete(&[g0], &[g1], kappa, 200).map_err(|e| e.to_string())?;
            worst = worst.max((disc - exact).abs() / exact);
        }
        Ok((worst <= 1e-3, format!("{count} triples at 200 steps; max relative difference {worst:.2e}")))
    }

    fn optimality(&self) -> Check {
        let mut h = Vec::new();
        let mut r1 = Vec::new();
        for (n, p) in self.levels() {
            let (r, inst) = self.segment(n, p)?;
            let res = optimality_residual(&r.geodesic, &r.duals, 1.0, &inst.network, &inst.grid).map_err(|e| e.to_string())?;
            h.push(1.0 / n as f64);
            r1.push(res.flux);
        }
        let slope = loglog_slope(&h, &r1);
        let decreasing = r1.windows(2).all(|w| w[1] < w[0]);
        Ok((
            decreasing && slope >= 0.5,
            format!("r1 = {:.2e}, {:.2e}, {:.2e}; decreasing {decreasing}; slope vs h {slope:.3}", r1[0], r1[1], r1[2]),
        ))
    }

    fn vertex_activity(&self) -> Check {
        let net = fixtures::segment(1.0);
        let grid = GridSpec::uniform(&net, 32, 16).map_err(|e| e.to_string())?;
        let ends = Endpoints {
            initial: NetworkMeasure { edge_densities: vec![bump(&grid, 0, 0.3, 0.1, 0.8)], vertex_masses: vec![0.1, 0.1] },
            terminal: NetworkMeasure { edge_densities: vec![bump(&grid, 0, 0.7, 0.1, 0.8)], vertex_masses: vec![0.1, 0.1] },
        };
        let r = self.solve("vertex activity", &net, &grid, &ends, VertexMode::Exchange { kappa: 1.0 })?;
        let f = r.geodesic.max_exchange();
        let bar = 10.0 * self.params.tol_ce;
        Ok((r.converged && f > bar, format!("max vertex flux {f:.3e} against {bar:.0e}, converged {}", r.converged)))
    }

    fn gradient_flow(&self) -> Check {
        let quad0 = |n| vec![VertexEnergy::Quadratic { c: 0.0, target: 0.0 }; n];
        let net = fixtures::y_graph();
        let grid = GridSpec::uniform(&net, 30, 1).map_err(|e| e.to_string())?;
        let energy = EnergySpec::from_fn(&net, &grid, |_, _| 0.0, quad0(4), 1.0);
        let mut r = rng(500);
        let rho = instances::random_edges(&net, &grid, &mut r, 1.0);
        let s0 = FlowState::new(rho, vec![0.0; 4], &energy, &net, &grid).map_err(|e| e.to_string())?;
        let diff = simulate(&s0, 10.0, 0.01, &energy, &net, &grid, 100).map_err(|e| e.to_string())?;

        let net2 = fixtures::path2();
        let grid2 = GridSpec::uniform(&net2, 20, 1).map_err(|e| e.to_string())?;
        let energy2 = EnergySpec::from_fn(&net2, &grid2, |j, _| if j == 1 { 2f64.ln() } else { 0.0 }, quad0(3), 1.0);
        let s2 = FlowState::new(vec![vec![1.0; 20], vec![0.0; 20]], vec![0.0; 3], &energy2, &net2, &grid2).map_err(|e| e.to_string())?;
        let tr = simulate(&s2, 50.0, 0.05, &energy2, &net2, &grid2, 1000).map_err(|e| e.to_string())?;
        let defect = transmission_defect(tr.states.last().unwrap(), &energy2, &net2, &grid2);

        let drift = diff.max_mass_drift.max(tr.max_mass_drift);
        let ok = drift <= MASS_TOL && diff.energy_increases == 0 && defect <= 0.01;
        Ok((
            ok,
            format!(
                "max mass change per step {drift:.1e}; energy increases {} over T = 10; transmission defect {defect:.2e} at T = 50",
                diff.energy_increases
            ),
        ))
    }

    fn brute_force(&self) -> Check {
        let count = if self.quick() { 2 } else { 3 };
        let tight = SolverParams { tol_gap: 1e-7, max_iters: 200_000, ..self.params.clone() };
        let mut worst = 0.0f64;
        let mut r = rng(600);
        for s in 0..count {
            let kappa = [1.0, 0.5, 2.0][s as usize % 3];
            let net = fixtures::segment(1.0);
            let grid = GridSpec::uniform(&net, 3, 3).map_err(|e| e.to_string())?;
            let share = r.gen_range(0.1..0.4);
            let g0 = instances::random_vertices(2, &mut r, share);
            let g1 = instances::random_vertices(2, &mut r, share);
            let cells = |r: &mut instances::SuiteRng| -> Vec<f64> {
                let v: Vec<f64> = (0..3).map(|_| r.gen_range(0.2..1.0)).collect();
                let m = v.iter().sum::<f64>() / 3.0;
                v.iter().map(|x| x * (1.0 - share) / m).collect()
            };
            let rho0 = cells(&mut r);
            let rho1 = cells(&mut r);
            let tiny = TinyProblem {
                cells: 3,
                steps: 3,
                length: 1.0,
                rho0: rho0.clone(),
                rho1: rho1.clone(),
                gamma0: [g0[0], g0[1]],
                gamma1: [g1[0], g1[1]],
                kappa,
            };
            let reference = interior_point(&tiny)?;
            let ends = Endpoints {
                initial: NetworkMeasure { edge_densities: vec![rho0], vertex_masses: g0 },
                terminal: NetworkMeasure { edge_densities: vec![rho1], vertex_masses: g1 },
            };
            let rep = solve_with_mode(&net, &grid, &ends, VertexMode::Exchange { kappa }, &tight).map_err(|e| e.to_string())?;
            self.record(format!("tiny #{s}"), &rep, &net, &grid)?;
            worst = worst.max((rep.value - reference).abs() / reference);
        }
        Ok((worst <= 1e-3, format!("{count} instances; max relative difference to interior point {worst:.2e}")))
    }

    fn duality(&self) -> Check {
        let recs = self.records();
        let converged: Vec<&SolveRecord> = recs.iter().filter(|r| r.converged).collect();
        let worst_gap = converged.iter().map(|r| r.rel_gap).fold(0.0f64, f64::max);
        // hj relative to the value, floored like the relative gap
        let worst_hj = converged.iter().map(|r| r.hj / r.value.abs().max(1e-3)).fold(0.0f64, f64::max);
        let missed: Vec<&str> = recs.iter().filter(|r| !r.converged).map(|r| r.label.as_str()).collect();
        let ok = !converged.is_empty() && worst_gap <= GAP_TOL && worst_hj <= HJ_TOL;
        let mut detail =
            format!("{} of {} solves converged; max gap/value {worst_gap:.2e}; max hj/value {worst_hj:.1e}", converged.len(), recs.len());
        if !missed.is_empty() {
            detail.push_str(&format!("; not converged: {}", missed.join(", ")));
        }
        Ok((ok, detail))
    }

    fn mass(&self) -> Check {
        let recs = self.records();
        let worst = recs.iter().map(|r| r.mass_drift).fold(0.0f64, f64::max);
        Ok((!recs.is_empty() && worst <= MASS_TOL, format!("{} geodesics; max slice mass drift {worst:.1e}", recs.len())))
    }

    fn run_one(&self, id: u8) -> Outcome {
        let (name, f): (&'static str, fn(&Suite) -> Check) = match id {
            1 => ("identity and metric axioms", Suite::metric_axioms),
            2 => ("1-D oracle equivalence", Suite::oracle_1d),
            3 => ("duality gap", Suite::duality),
            4 => ("mass conservation", Suite::mass),
            5 => ("sandwich bounds", Suite::sandwich),
            6 => ("monotonicity and limits in kappa", Suite::monotonicity),
            7 => ("vertex Hellinger cost", Suite::vertex_hellinger),
            8 => ("optimality relations under refinement", Suite::optimality),
            9 => ("vertex activity", Suite::vertex_activity),
            10 => ("gradient flow", Suite::gradient_flow),
            11 => ("tiny-instance brute force", Suite::brute_force),
            _ => panic!("no criterion {id}"),
        };
        let start = Instant::now();
        let (passed, detail) = f(self).unwrap_or_else(|e| (false, format!("error: {e}")));
        Outcome { id, name, passed, detail, seconds: start.elapsed().as_secs_f64() }
    }
}

/// Runs every criterion; the log-based ones (3 and 4) go last but are
/// reported in order. `on_done` sees each outcome as soon as it is known.
pub fn run_suite(scale: Scale, mut on_done: impl FnMut(&Outcome)) -> Vec<Outcome> {
    let suite = Suite::new(scale);
    let mut out = Vec::new();
    for id in [1, 2, 5, 6, 7, 8, 9, 10, 11, 3, 4] {
        let o = suite.run_one(id);
        on_done(&o);
        out.push(o);
    }
    out.sort_by_key(|o| o.id);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_line_format() {
        let o = Outcome { id: 3, name: "duality gap", passed: true, detail: "ok".into(), seconds: 1.25 };
        assert_eq!(o.to_string(), "PASS [ 3] duality gap: ok (1.2 s)");
    }

    #[test]
    fn cheap_criteria_pass() {
        let s = Suite::new(Scale::Quick);
        assert!(s.run_one(7).passed);
        assert!(s.run_one(11).passed, "{}", s.run_one(11));
    }
}
