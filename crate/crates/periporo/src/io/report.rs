//! Run summaries: convergence table, bisections, conservation and peaks.

use std::fmt::Write as _;

use serde::Serialize;

use crate::solver::{BisectionEvent, StepRecord};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConvergenceRow {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub depth: u32,
    pub deformation_iterations: usize,
    pub deformation_linear: usize,
    pub flow_iterations: usize,
    pub flow_linear: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Conservation {
    pub initial_mass: f64,
    pub final_mass: f64,
    /// Water supplied through prescribed-pressure boundaries.
    pub supplied: f64,
    /// final − initial − supplied
    pub imbalance: f64,
    pub relative_imbalance: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Peaks {
    pub max_damage: f64,
    pub min_pw: f64,
    pub max_pw: f64,
    pub max_speed: f64,
    /// Largest reaction magnitude per reported group, with the time it occurred.
    pub reactions: Vec<(String, f64, f64)>,
}

/// Total variation of the layer-averaged velocity along the profile axis.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct VariationSample {
    pub time: f64,
    pub total_variation: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunReport {
    pub title: String,
    pub points: usize,
    pub steps: usize,
    pub final_time: f64,
    pub max_newton: usize,
    pub status: String,
    pub convergence: Vec<ConvergenceRow>,
    pub bisections: Vec<BisectionEvent>,
    pub conservation: Conservation,
    pub peaks: Peaks,
    pub velocity_variation: Vec<VariationSample>,
}

impl PartialEq for BisectionEvent {
    fn eq(&self, o: &Self) -> bool {
        self.step == o.step && self.time == o.time && self.dt == o.dt && self.depth == o.depth && self.reason == o.reason
    }
}

pub struct ReportInput<'a> {
    pub title: &'a str,
    pub points: usize,
    pub max_newton: usize,
    pub status: &'a str,
    pub records: &'a [StepRecord],
    pub events: &'a [BisectionEvent],
    pub initial_mass: f64,
    pub final_mass: f64,
    pub pw_range: (f64, f64),
    pub max_speed: f64,
    pub variation: Vec<VariationSample>,
}

pub fn report_run(inp: ReportInput) -> RunReport {
    let convergence = inp
        .records
        .iter()
        .map(|r| ConvergenceRow {
            step: r.step,
            time: r.time,
            dt: r.dt,
            depth: r.depth,
            deformation_iterations: r.deformation.iterations,
            deformation_linear: r.deformation.linear_iterations,
            flow_iterations: r.flow.iterations,
            flow_linear: r.flow.linear_iterations,
        })
        .collect();
    let supplied: f64 = inp.records.iter().map(|r| r.boundary_supply).sum();
    let imbalance = inp.final_mass - inp.initial_mass - supplied;
    let mut reactions: Vec<(String, f64, f64)> = Vec::new();
    for r in inp.records {
        for (name, f) in &r.reactions {
            let m = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
            match reactions.iter_mut().find(|e| &e.0 == name) {
                Some(e) if m > e.1 => {
                    e.1 = m;
                    e.2 = r.time;
                }
                Some(_) => {}
                None => reactions.push((name.clone(), m, r.time)),
            }
        }
    }
    RunReport {
        title: inp.title.to_string(),
        points: inp.points,
        steps: inp.records.len(),
        final_time: inp.records.last().map_or(0.0, |r| r.time),
        max_newton: inp.max_newton,
        status: inp.status.to_string(),
        convergence,
        bisections: inp.events.to_vec(),
        conservation: Conservation {
            initial_mass: inp.initial_mass,
            final_mass: inp.final_mass,
            supplied,
            imbalance,
            relative_imbalance: if inp.initial_mass != 0.0 { imbalance / inp.initial_mass } else { 0.0 },
        },
        peaks: Peaks {
            max_damage: inp.records.iter().map(|r| r.max_damage).fold(0.0, f64::max),
            min_pw: inp.pw_range.0,
            max_pw: inp.pw_range.1,
            max_speed: inp.max_speed,
            reactions,
        },
        velocity_variation: inp.variation,
    }
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let title = if self.title.is_empty() { "(untitled)" } else { &self.title };
        writeln!(s, "run: {title}").unwrap();
        writeln!(s, "status: {}", self.status).unwrap();
        writeln!(s, "points: {}   steps: {}   final time: {:.6e} s", self.points, self.steps, self.final_time).unwrap();
        let worst = |f: fn(&ConvergenceRow) -> usize| self.convergence.iter().map(f).max().unwrap_or(0);
        writeln!(
            s,
            "newton iterations (max {}): deformation ≤ {}, flow ≤ {}",
            self.max_newton,
            worst(|r| r.deformation_iterations),
            worst(|r| r.flow_iterations)
        )
        .unwrap();
        s.push_str("\nconvergence\n  step        time          dt  depth  def  def-lin  flow  flow-lin\n");
        for r in &self.convergence {
            writeln!(
                s,
                "{:6} {:11.4e} {:11.4e} {:6} {:4} {:8} {:5} {:9}",
                r.step, r.time, r.dt, r.depth, r.deformation_iterations, r.deformation_linear, r.flow_iterations, r.flow_linear
            )
            .unwrap();
        }
        s.push_str("\nbisections\n");
        if self.bisections.is_empty() {
            s.push_str("  none\n");
        }
        for e in &self.bisections {
            writeln!(s, "  step {} t={:.4e} dt={:.4e} depth {}: {}", e.step, e.time, e.dt, e.depth, e.reason).unwrap();
        }
        let c = &self.conservation;
        s.push_str("\nfluid mass (kg)\n");
        writeln!(s, "  initial   {:.10e}", c.initial_mass).unwrap();
        writeln!(s, "  final     {:.10e}", c.final_mass).unwrap();
        writeln!(s, "  supplied  {:.10e}", c.supplied).unwrap();
        writeln!(s, "  imbalance {:.4e} ({:.4e} relative)", c.imbalance, c.relative_imbalance).unwrap();
        let p = &self.peaks;
        s.push_str("\npeaks\n");
        writeln!(s, "  max damage {:.4}", p.max_damage).unwrap();
        writeln!(s, "  pore pressure range [{:.4e}, {:.4e}] Pa", p.min_pw, p.max_pw).unwrap();
        writeln!(s, "  max speed {:.4e} m/s", p.max_speed).unwrap();
        for (name, m, t) in &p.reactions {
            writeln!(s, "  reaction {name}: {m:.6e} N at t={t:.4e} s").unwrap();
        }
        s.push_str("\nvelocity profile total variation\n");
        for v in &self.velocity_variation {
            writeln!(s, "  t={:.4e}  {:.6e}", v.time, v.total_variation).unwrap();
        }
        s
    }
}
