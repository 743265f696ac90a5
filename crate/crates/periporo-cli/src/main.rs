use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use periporo::io::deck::load_problem;
use periporo::io::run::{run_problem, Overrides};
use periporo::io::snapshot::Snapshot;
use periporo::Error;

/// Meshfree coupled deformation, unsaturated flow and fracture.
#[derive(Parser)]
#[command(name = "periporo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a problem file to the end and write snapshots and reports.
    Run {
        problem: PathBuf,
        /// Output directory (default: <problem stem>_out next to the deck).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Time step override (s).
        #[arg(long)]
        dt: Option<f64>,
        /// Step count override.
        #[arg(long)]
        steps: Option<usize>,
        /// Stabilization parameter G for every material.
        #[arg(long = "stab")]
        stab: Option<f64>,
    },
    /// Load and check a problem file without running it.
    Validate { problem: PathBuf },
    /// Print a field of the snapshot point nearest to a position.
    Probe {
        snapshot: PathBuf,
        #[arg(long = "point-at", value_parser = parse_point, allow_hyphen_values = true)]
        point_at: [f64; 3],
        #[arg(long, default_value = "p_w")]
        field: String,
    },
}

fn parse_point(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|c| c.trim().parse::<f64>().map_err(|e| format!("{c:?}: {e}"))).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected x,y,z, got {} values", v.len()))
}

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Schema { .. } | Error::Geometry(_) => EXIT_INVALID,
        e if e.is_step_rejection() => EXIT_NONCONVERGENCE,
        _ => EXIT_FAILURE,
    }
}

fn default_out(problem: &Path) -> PathBuf {
    let stem = problem.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    problem.with_file_name(format!("{stem}_out"))
}

fn run(problem: PathBuf, out: Option<PathBuf>, overrides: Overrides) -> Result<u8, Error> {
    let mut p = load_problem(&problem)?;
    overrides.apply(&mut p);
    p.validate().map_err(Error::Validation)?;
    let out = out.unwrap_or_else(|| default_out(&problem));
    println!("{}: {} points, {} steps of {:e} s", problem.display(), p.points.len(), p.steps, p.config.dt);
    let outcome = run_problem(p, Some(out.clone()))?;
    let r = &outcome.report;
    println!("status: {}", r.status);
    println!("accepted steps: {}, bisections: {}", r.steps, r.bisections.len());
    println!("fluid mass imbalance: {:.3e} relative", r.conservation.relative_imbalance);
    println!("output: {}", out.display());
    Ok(match &outcome.failure {
        None => 0,
        Some(e) => {
            eprintln!("error: {e}");
            exit_for(e)
        }
    })
}

fn validate(problem: PathBuf) -> Result<u8, Error> {
    let p = load_problem(&problem)?;
    println!("{}: ok", problem.display());
    println!("  points: {}", p.points.len());
    println!("  materials: {}", p.materials.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join(", "));
    println!("  boundary groups: {}", p.boundaries.iter().map(|b| format!("{} ({})", b.name, b.points.len())).collect::<Vec<_>>().join(", "));
    println!("  horizon: {} m, steps: {} x {:e} s", p.horizon(), p.steps, p.config.dt);
    Ok(0)
}

fn probe(snapshot: PathBuf, at: [f64; 3], field: String) -> Result<u8, Error> {
    let s = Snapshot::read(&snapshot)?;
    let Some(i) = s.nearest(at) else {
        return Err(Error::Snapshot { path: snapshot, message: "snapshot has no points".into() });
    };
    let Some(values) = s.field(&field, i) else {
        eprintln!("error: unknown field {field:?} (pw, sr, porosity, damage, u, v, sigma_eff, interface)");
        return Ok(EXIT_INVALID);
    };
    let x = s.position[i];
    println!("point {i} at {:.6e},{:.6e},{:.6e} t={:.16e}", x[0], x[1], x[2], s.time);
    println!("{field} = {}", values.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" "));
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { problem, out, dt, steps, stab } => run(problem, out, Overrides { dt, steps, stabilization: stab }),
        Command::Validate { problem } => validate(problem),
        Command::Probe { snapshot, point_at, field } => probe(snapshot, point_at, field),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
