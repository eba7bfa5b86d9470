//! Seeded problem instances for the property suite.

use netot_core::grid::{Endpoints, GridSpec};
use netot_core::netgraph::{fixtures, Network, NetworkMeasure};
use netot_core::solver::SolverParams;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;
pub type SuiteRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SuiteRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Solver settings used throughout the suite.
pub fn suite_params() -> SolverParams {
    SolverParams { max_iters: 60_000, tol_gap: 5e-5, ..SolverParams::default() }
}

pub struct Instance {
    pub network: Network,
    pub grid: GridSpec,
    pub endpoints: Endpoints,
}

/// Gaussian bump sampled at the cell centers of edge `j`, scaled to `mass`.
pub fn bump(grid: &GridSpec, j: usize, center: f64, width: f64, mass: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..grid.cells(j)).map(|c| (-(grid.cell_center(j, c) - center).powi(2) / (2.0 * width * width)).exp()).collect();
    let total = raw.iter().sum::<f64>() * grid.dx(j);
    raw.into_iter().map(|r| r * mass / total).collect()
}

/// Positive edge densities (a floor plus one or two bumps per edge) with
/// the given total edge mass split at random between edges.
pub fn random_edges(net: &Network, grid: &GridSpec, rng: &mut SuiteRng, edge_mass: f64) -> Vec<Vec<f64>> {
    let mut rho: Vec<Vec<f64>> = (0..net.n_edges())
        .map(|j| {
            let len = net.edges()[j].length;
            let mut v = vec![rng.gen_range(0.1..0.4); grid.cells(j)];
            for _ in 0..rng.gen_range(1..=2) {
                let b = bump(grid, j, rng.gen_range(0.15..0.85) * len, rng.gen_range(0.06..0.2) * len, rng.gen_range(0.3..1.0));
                v.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            v
        })
        .collect();
    let total: f64 = rho.iter().enumerate().map(|(j, v)| v.iter().sum::<f64>() * grid.dx(j)).sum();
    rho.iter_mut().flatten().for_each(|x| *x *= edge_mass / total);
    rho
}

/// Random vertex masses summing to `total`.
pub fn random_vertices(n: usize, rng: &mut SuiteRng, total: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x * total / s).collect()
}

/// Unit-mass measure with a random share of it stored at the vertices.
pub fn random_measure(net: &Network, grid: &GridSpec, rng: &mut SuiteRng) -> NetworkMeasure {
    let share = rng.gen_range(0.1..0.3);
    NetworkMeasure {
        edge_densities: random_edges(net, grid, rng, 1.0 - share),
        vertex_masses: random_vertices(net.n_vertices(), rng, share),
    }
}

pub fn y_grid(cells: usize, steps: usize) -> (Network, GridSpec) {
    let net = fixtures::y_graph();
    let grid = GridSpec::uniform(&net, cells, steps).expect("valid grid");
    (net, grid)
}

/// Equal vertex masses at both ends, different edge densities.
pub fn node_compatible(rng: &mut SuiteRng, cells: usize, steps: usize) -> Instance {
    let (network, grid) = y_grid(cells, steps);
    let share = rng.gen_range(0.1..0.3);
    let gamma = random_vertices(network.n_vertices(), rng, share);
    let initial = NetworkMeasure { edge_densities: random_edges(&network, &grid, rng, 1.0 - share), vertex_masses: gamma.clone() };
    let terminal = NetworkMeasure { edge_densities: random_edges(&network, &grid, rng, 1.0 - share), vertex_masses: gamma };
    Instance { network, grid, endpoints: Endpoints { initial, terminal } }
}

/// Vertex masses that differ between the two ends.
pub fn node_incompatible(rng: &mut SuiteRng, cells: usize, steps: usize) -> Instance {
    let (network, grid) = y_grid(cells, steps);
    let initial = random_measure(&network, &grid, rng);
    let mut terminal = random_measure(&network, &grid, rng);
    // concentrate the terminal vertex mass so the change is clearly visible
    let s1: f64 = terminal.vertex_masses.iter().sum();
    terminal.vertex_masses = vec![0.05 * s1, 0.6 * s1, 0.05 * s1, 0.3 * s1];
    Instance { network, grid, endpoints: Endpoints { initial, terminal } }
}

/// A bump moving along a unit segment; vertices carry no mass.
pub fn segment_bumps(cells: usize, steps: usize) -> Instance {
    let network = fixtures::segment(1.0);
    let grid = GridSpec::uniform(&network, cells, steps).expect("valid grid");
    let initial = NetworkMeasure { edge_densities: vec![bump(&grid, 0, 0.3, 0.08, 1.0)], vertex_masses: vec![0.0; 2] };
    let terminal = NetworkMeasure { edge_densities: vec![bump(&grid, 0, 0.7, 0.08, 1.0)], vertex_masses: vec![0.0; 2] };
    Instance { network, grid, endpoints: Endpoints { initial, terminal } }
}
