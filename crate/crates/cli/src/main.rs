use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netot_core::gradflow::simulate;
use netot_core::io::{self, Problem, ProblemError};
use netot_core::metrics::{self, sweep_kappa};
use netot_core::solver::{solve_with_mode, SolveReport, VertexMode};
use netot_verify::criteria::{run_suite, Scale};
use serde::Serialize;
use thiserror::Error;

/// Dynamic optimal transport on metric graphs.
#[derive(Parser)]
#[command(name = "netot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the transport distance and print a JSON report.
    Distance { file: PathBuf },
    /// Solve and write the report plus CSV frames of the geodesic.
    Geodesic {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve for several coupling constants and print a CSV table.
    SweepKappa {
        file: PathBuf,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        kappas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference distances between the two endpoint measures, as JSON.
    Metrics { file: PathBuf },
    /// Integrate the gradient flow from the initial measure and write CSVs.
    Gradflow {
        file: PathBuf,
        #[arg(long = "T")]
        t_end: f64,
        #[arg(long)]
        dt: f64,
        #[arg(long, default_value = "gradflow_out")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        record_every: usize,
    },
    /// Run the acceptance property suite; exit 0 iff every criterion passes.
    Verify {
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("solver did not converge: {0}")]
    NotConverged(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Failed(_) => 1,
            CliError::NotConverged(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<ProblemError> for CliError {
    fn from(e: ProblemError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn validation(e: impl ToString) -> CliError {
    CliError::Validation(e.to_string())
}

fn load(path: &Path) -> Result<Problem, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(io::parse_problem_str(&text)?)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct DistanceReport {
    value: f64,
    dual_value: f64,
    gap: f64,
    rel_gap: f64,
    ce_residual: f64,
    iterations: usize,
    converged: bool,
}

impl From<&SolveReport> for DistanceReport {
    fn from(r: &SolveReport) -> Self {
        DistanceReport {
            value: r.value,
            dual_value: r.dual_value,
            gap: r.gap,
            rel_gap: r.rel_gap,
            ce_residual: r.ce_residual,
            iterations: r.iterations,
            converged: r.converged,
        }
    }
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("reports always serialize") + "\n"
}

fn solve(p: &Problem) -> Result<SolveReport, CliError> {
    solve_with_mode(&p.network, &p.grid, &p.endpoints, VertexMode::from_kappa(p.kappa), &p.params).map_err(validation)
}

fn converged(r: &SolveReport) -> Result<(), CliError> {
    if r.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!("relative gap {:.3e} after {} iterations", r.rel_gap, r.iterations)))
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Distance { file } => {
            let p = load(&file)?;
            let r = solve(&p)?;
            print!("{}", to_json(&DistanceReport::from(&r)));
            converged(&r)
        }
        Command::Geodesic { file, out } => {
            let p = load(&file)?;
            let r = solve(&p)?;
            mkdir(&out)?;
            write(&out.join("report.json"), &to_json(&DistanceReport::from(&r)))?;
            write(&out.join("densities.csv"), &io::densities_csv(&r.geodesic, &p.network, &p.grid))?;
            write(&out.join("fluxes.csv"), &io::fluxes_csv(&r.geodesic, &p.network, &p.grid))?;
            write(&out.join("vertices.csv"), &io::vertices_csv(&r.geodesic, &p.network, &p.grid))?;
            converged(&r)
        }
        Command::SweepKappa { file, kappas, out } => {
            let p = load(&file)?;
            let sweep = sweep_kappa(&p.network, &p.grid, &p.endpoints, &kappas, &p.params).map_err(validation)?;
            let csv = io::sweep_csv(&sweep);
            match out {
                Some(path) => write(&path, &csv)?,
                None => print!("{csv}"),
            }
            match sweep.points.iter().find(|q| !q.converged) {
                Some(q) => Err(CliError::NotConverged(format!("kappa = {}", q.kappa))),
                None => Ok(()),
            }
        }
        Command::Metrics { file } => {
            let p = load(&file)?;
            let m = metrics::endpoint_metrics(&p.network, &p.grid, &p.endpoints, p.kappa, &p.params).map_err(validation)?;
            print!("{}", to_json(&m));
            match m.wasserstein_edges_converged {
                Some(false) => Err(CliError::NotConverged("edge distance".into())),
                _ => Ok(()),
            }
        }
        Command::Gradflow { file, t_end, dt, out, record_every } => {
            let p = load(&file)?;
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(validation("--dt must be positive"));
            }
            let (energy, state) = p.flow_setup()?;
            let sim = simulate(&state, t_end, dt, &energy, &p.network, &p.grid, record_every).map_err(validation)?;
            mkdir(&out)?;
            write(&out.join("edges.csv"), &io::flow_edges_csv(&sim, &p.network, &p.grid))?;
            write(&out.join("vertices.csv"), &io::flow_vertices_csv(&sim, &p.network))?;
            write(&out.join("energy.csv"), &io::flow_energy_csv(&sim))?;
            #[derive(Serialize)]
            struct Summary {
                steps: usize,
                final_energy: f64,
                max_mass_drift: f64,
                energy_increases: usize,
            }
            let summary = Summary {
                steps: sim.times.len() - 1,
                final_energy: *sim.energies.last().unwrap(),
                max_mass_drift: sim.max_mass_drift,
                energy_increases: sim.energy_increases,
            };
            print!("{}", to_json(&summary));
            Ok(())
        }
        Command::Verify { quick } => {
            let scale = if quick { Scale::Quick } else { Scale::Full };
            let outcomes = run_suite(scale, |o| println!("{o}"));
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} of {} criteria pass", outcomes.len() - failed, outcomes.len());
            if failed == 0 {
                Ok(())
            } else {
                Err(CliError::Failed(format!("{failed} criteria failed")))
            }
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NETOT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| validation(format!("NETOT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(validation)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
