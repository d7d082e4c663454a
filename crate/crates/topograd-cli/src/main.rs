//! Benchmark runner: pick a problem/algorithm pair, execute the level-set
//! optimization loop, and archive its artifacts.
//!
//! Everything lands in `--output-dir`:
//!
//! - `history.csv` — one row per visited iterate, with the fixed header
//!   `iter,cost,theta_deg,proj_norm,step,state_solves,wall_time_s`.
//! - `snapshot_<k>.vtk` — the level set every `--snapshot-every` accepted
//!   iterations (0 disables snapshots).
//! - `final.vtk` — final level set, generalized topological derivative, and
//!   the state fields of the converged design.
//! - `summary.txt` — run configuration and termination diagnostics as
//!   `key: value` lines.
//!
//! Exit codes: 0 when the run stops by the angle criterion or the iteration
//! budget; 1 when a solver fails (Newton breakdown, singular system,
//! exhausted line search); 2 for invalid usage; 3 for I/O failures.
//!
//! Two runs with the same configuration produce byte-identical artifacts
//! except for the wall-time column and line.

use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write as _};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use topograd::benchmarks::{initial_level_set, Problem};
use topograd::fem::NodalField;
use topograd::mesh::Mesh;
use topograd::optimizer::{
    run_with_observer, Algorithm, IterationRecord, OptConfig, OptimizerError, RunResult,
    Termination,
};
use topograd::problems::ProblemError;
use topograd::vtk::{write_vtk, VtkError};

const HISTORY_HEADER: &str = "iter,cost,theta_deg,proj_norm,step,state_solves,wall_time_s";

#[derive(Parser)]
#[command(name = "topograd", version, about = "Run a topology-optimization benchmark")]
struct Args {
    /// Benchmark problem (clover_linear, clover_semilinear, cantilever,
    /// bridge_single, bridge_multi, pipe_bend, rugby).
    #[arg(long, value_parser = parse_problem)]
    problem: Problem,

    /// Update algorithm (sphere, convex, gradient, bfgs).
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Algorithm,

    /// Vertical cell count; defaults to the benchmark's published resolution.
    #[arg(long, value_parser = parse_mesh_n)]
    mesh_n: Option<usize>,

    /// Stopping tolerance for the angle criterion, in degrees.
    #[arg(long, default_value_t = 1.5, allow_negative_numbers = true)]
    tol_deg: f64,

    /// Maximum number of accepted iterations.
    #[arg(long, default_value_t = 500)]
    max_iter: usize,

    /// Curvature pairs retained by the bfgs algorithm.
    #[arg(long, default_value_t = 5)]
    memory: usize,

    /// Write snapshot_<k>.vtk every this many iterations (0 disables).
    #[arg(long, default_value_t = 50)]
    snapshot_every: usize,

    /// Directory receiving history.csv, VTK files, and summary.txt.
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

fn parse_problem(s: &str) -> Result<Problem, String> {
    s.parse().map_err(|e: topograd::benchmarks::UnknownProblem| e.to_string())
}

fn parse_mesh_n(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n < 4 {
        return Err(format!("grid resolution must be at least 4, got {n}"));
    }
    Ok(n)
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    Algorithm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
        let names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.name()).collect();
        format!("unknown algorithm `{s}`; expected one of {}", names.join(", "))
    })
}

/// Everything that can go wrong after argument parsing, partitioned by the
/// exit code it maps to.
#[derive(Debug)]
enum RunError {
    /// The parsed flags do not describe a well-posed run (exit 2).
    Setup(ProblemError),
    /// The optimization loop failed (exit 1, or 2 for config rejection).
    Run(OptimizerError),
    /// Evaluating the final design for output failed (exit 1).
    Final(ProblemError),
    /// Writing an artifact failed (exit 3).
    Vtk(VtkError),
    /// Any other I/O failure (exit 3).
    Io(io::Error),
}

impl RunError {
    fn exit_code(&self) -> u8 {
        match self {
            RunError::Setup(_) | RunError::Run(OptimizerError::InvalidConfig(_)) => 2,
            RunError::Run(_) | RunError::Final(_) => 1,
            RunError::Vtk(_) | RunError::Io(_) => 3,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Setup(e) => write!(f, "invalid run configuration: {e}"),
            RunError::Run(e) => write!(f, "optimization failed: {e}"),
            RunError::Final(e) => write!(f, "evaluating the final design failed: {e}"),
            RunError::Vtk(e) => write!(f, "writing VTK output failed: {e}"),
            RunError::Io(e) => write!(f, "I/O failure: {e}"),
        }
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> RunError {
        RunError::Io(e)
    }
}

impl From<VtkError> for RunError {
    fn from(e: VtkError) -> RunError {
        RunError::Vtk(e)
    }
}

impl From<OptimizerError> for RunError {
    fn from(e: OptimizerError) -> RunError {
        RunError::Run(e)
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn execute(args: &Args) -> Result<u8, RunError> {
    let problem = args.problem;
    let mesh_n = args.mesh_n.unwrap_or_else(|| problem.default_mesh_n());
    let mut oracle = problem.oracle(mesh_n).map_err(RunError::Setup)?;
    let mesh = oracle.mesh().clone();
    let psi0 = initial_level_set(&mesh).map_err(|e| RunError::Setup(e.into()))?;

    let mut config = OptConfig::new(args.algorithm);
    config.tol_angle_deg = args.tol_deg;
    config.max_iter = args.max_iter;
    config.memory = args.memory;

    fs::create_dir_all(&args.output_dir)?;
    let mut csv = BufWriter::new(File::create(args.output_dir.join("history.csv"))?);
    writeln!(csv, "{HISTORY_HEADER}")?;

    println!(
        "{problem} on a {}x{} grid ({} nodes), algorithm {}",
        mesh.nx,
        mesh.ny,
        mesh.node_count(),
        args.algorithm.name()
    );

    // The observer cannot return errors, so the first failure is parked here
    // and re-raised once the run hands control back.
    let mut deferred: Option<RunError> = None;
    let outcome = run_with_observer(oracle.as_mut(), &psi0, &config, |record, psi| {
        if deferred.is_some() {
            return;
        }
        print_progress(record);
        if let Err(e) = write_row(&mut csv, record) {
            deferred = Some(e.into());
            return;
        }
        if args.snapshot_every > 0 && record.iter > 0 && record.iter % args.snapshot_every == 0 {
            let path = args.output_dir.join(format!("snapshot_{}.vtk", record.iter));
            let title = format!("{problem} iteration {}", record.iter);
            if let Err(e) = write_vtk(&path, &title, &mesh, &[("psi", psi)]) {
                deferred = Some(e.into());
            }
        }
    });
    csv.flush()?;
    if let Some(err) = deferred {
        return Err(err);
    }
    let result = outcome?;

    let derivative = oracle.derivative(&result.psi).map_err(RunError::Final)?;
    let state = oracle.state(&result.psi).map_err(RunError::Final)?;
    let mut fields: Vec<(&str, &NodalField)> =
        vec![("psi", &result.psi), ("derivative", &derivative)];
    for (name, field) in &state {
        fields.push((name.as_str(), field));
    }
    let title = format!("{problem} final design");
    write_vtk(&args.output_dir.join("final.vtk"), &title, &mesh, &fields)?;

    fs::write(
        args.output_dir.join("summary.txt"),
        summary_text(args, mesh_n, &mesh, &result),
    )?;

    let last = result.records.last().expect("a run logs at least iteration 0");
    println!(
        "{problem}: {} at iteration {} (cost {:.6e}, theta {:.4} deg, {} state solves)",
        result.termination.reason(),
        last.iter,
        last.cost,
        last.theta_deg,
        last.state_solves
    );
    Ok(if result.termination == Termination::LineSearchFailure { 1 } else { 0 })
}

fn print_progress(r: &IterationRecord) {
    println!(
        "iter {:>4}  cost {:>13.6e}  theta {:>9.4} deg  proj {:>10.3e}  step {:>9.3e}  solves {}",
        r.iter, r.cost, r.theta_deg, r.proj_norm, r.step, r.state_solves
    );
}

/// One CSV row. Every column except the wall time uses Rust's shortest
/// round-tripping float format, keeping reruns byte-identical.
fn write_row(w: &mut impl io::Write, r: &IterationRecord) -> io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{:.3}",
        r.iter, r.cost, r.theta_deg, r.proj_norm, r.step, r.state_solves, r.wall_time_s
    )
}

fn summary_text(args: &Args, mesh_n: usize, mesh: &Mesh, result: &RunResult) -> String {
    let last = result.records.last().expect("a run logs at least iteration 0");
    let mut out = String::new();
    // Writing to a String cannot fail.
    writeln!(out, "problem: {}", args.problem).unwrap();
    writeln!(out, "algorithm: {}", args.algorithm.name()).unwrap();
    writeln!(out, "mesh_n: {mesh_n}").unwrap();
    writeln!(out, "grid: {}x{}", mesh.nx, mesh.ny).unwrap();
    writeln!(out, "nodes: {}", mesh.node_count()).unwrap();
    writeln!(out, "triangles: {}", mesh.triangle_count()).unwrap();
    writeln!(out, "tol_deg: {}", args.tol_deg).unwrap();
    writeln!(out, "max_iter: {}", args.max_iter).unwrap();
    writeln!(out, "memory: {}", args.memory).unwrap();
    writeln!(out, "snapshot_every: {}", args.snapshot_every).unwrap();
    writeln!(out, "termination: {}", result.termination.reason()).unwrap();
    writeln!(out, "iterations: {}", last.iter).unwrap();
    writeln!(out, "final_cost: {}", last.cost).unwrap();
    writeln!(out, "final_theta_deg: {}", last.theta_deg).unwrap();
    writeln!(out, "final_proj_norm: {}", last.proj_norm).unwrap();
    writeln!(out, "optimality_constant: {}", result.optimality_constant).unwrap();
    writeln!(out, "degenerate_derivative: {}", result.degenerate_derivative).unwrap();
    writeln!(out, "state_solves: {}", last.state_solves).unwrap();
    writeln!(out, "wall_time_s: {:.3}", last.wall_time_s).unwrap();
    out
}
