//! Batch driver: steps a problem to the end, feeding the writer thread and
//! collecting the run report.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::Problem;
use crate::solver::metrics::{fluid_mass, total_variation, velocity_profile};
use crate::solver::{Simulation, StepRecord};

use super::report::{report_run, ReportInput, RunReport, VariationSample};
use super::snapshot::{SeriesRow, Snapshot, Writer};

/// Command-line style overrides applied on top of a deck.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    /// Stabilization parameter G for every material.
    pub stabilization: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, problem: &mut Problem) {
        if let Some(dt) = self.dt {
            problem.config.dt = dt;
        }
        if let Some(s) = self.steps {
            problem.steps = s;
        }
        if let Some(g) = self.stabilization {
            for m in problem.materials.iter_mut() {
                m.stabilization = g;
            }
        }
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub records: Vec<StepRecord>,
    pub simulation: Simulation,
    /// Files written, snapshots and series first, then the reports.
    pub files: Vec<PathBuf>,
    /// The error that stopped the run early, if any.
    pub failure: Option<Error>,
}

fn variation(sim: &Simulation) -> VariationSample {
    let axis = sim.problem.output.profile_axis.min(2);
    let prof = velocity_profile(sim.points(), axis, axis, sim.problem.spacing, |_| true);
    VariationSample { time: sim.state.time, total_variation: total_variation(&prof) }
}

/// Runs `problem.steps` steps of `problem.config.dt`. With `out` set,
/// snapshots every `output.every` steps (and the last), `series.csv`,
/// `report.json` and `report.txt` are written there.
pub fn run_problem(problem: Problem, out: Option<PathBuf>) -> Result<RunOutcome> {
    let steps = problem.steps;
    let dt = problem.config.dt;
    let every = problem.output.every.max(1);
    let mut sim = Simulation::new(problem)?;
    let writer = out.as_ref().map(|d| Writer::spawn(d)).transpose()?;
    let initial_mass = fluid_mass(sim.points(), &sim.problem.materials);
    let mut samples = vec![variation(&sim)];
    let snap = |sim: &Simulation, writer: &Option<Writer>| -> Result<()> {
        if let (Some(w), Some(dir)) = (writer, out.as_ref()) {
            let path = dir.join(format!("snapshot_{:06}.vtk", sim.state.step));
            w.snapshot(Snapshot::capture(sim.state.time, sim.state.step, sim.points()), path)?;
        }
        Ok(())
    };
    snap(&sim, &writer)?;
    let mut records: Vec<StepRecord> = Vec::new();
    let mut failure = None;
    for k in 0..steps {
        match sim.step(dt) {
            Ok(recs) => {
                if let Some(w) = &writer {
                    for r in &recs {
                        w.row(SeriesRow { step: r.step + 1, time: r.time, reactions: r.reactions.clone(), fluid_mass: r.fluid_mass, max_damage: r.max_damage })?;
                    }
                }
                records.extend(recs);
                if (k + 1) % every == 0 || k + 1 == steps {
                    samples.push(variation(&sim));
                    snap(&sim, &writer)?;
                }
            }
            Err(e) => {
                samples.push(variation(&sim));
                snap(&sim, &writer)?;
                failure = Some(e);
                break;
            }
        }
    }
    let pts = sim.points();
    let pw_range = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.p_w), b.max(p.p_w)));
    let max_speed = pts.iter().map(|p| p.v.norm()).fold(0.0, f64::max);
    let status = match &failure {
        None => "completed".to_string(),
        Some(e) => format!("stopped at t={:.6e}: {e}", sim.state.time),
    };
    let report = report_run(ReportInput {
        title: &sim.problem.title,
        points: pts.len(),
        max_newton: sim.problem.config.max_newton,
        status: &status,
        records: &records,
        events: &sim.events,
        initial_mass,
        final_mass: fluid_mass(pts, &sim.problem.materials),
        pw_range,
        max_speed,
        variation: samples,
    });
    let mut files = Vec::new();
    if let (Some(w), Some(dir)) = (writer, out.as_ref()) {
        files = w.finish()?;
        for (name, body) in [("report.json", report.to_json()), ("report.txt", report.to_text())] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            files.push(path);
        }
    }
    Ok(RunOutcome { report, records, simulation: sim, files, failure })
}
