//! Two-stage time integration.
//!
//! Every step re-searches the families in the current configuration,
//! classifies interface points, solves the undrained deformation stage,
//! updates bond energies and damage, and solves the flow stage on the
//! moved configuration. Rejected steps are retried with half the step.

pub mod deformation;
pub mod flow;
pub mod geometry;
pub mod linear;
pub mod metrics;
pub mod newmark;

use serde::Serialize;

use crate::constitutive::{saturation, storage, RetentionState};
use crate::discretization::{carry_history, classify_interface, neighbor_search, BondHistory, FamilyTable};
use crate::error::{Error, Result};
use crate::fracture::{bond_energy_increment, break_bonds, critical_bond_energy, damage_field};
use crate::kinematics::polar_rotation_at;
use crate::model::{MaterialPoint, Problem, Vec3};

use deformation::{DeformationSystem, Kinematic, StartData};
use flow::{flow_divergence, FlowSystem};
use geometry::Geometry;
use linear::{newton, NewtonSettings, PreconditionerCache};

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageStats {
    pub iterations: usize,
    pub linear_iterations: usize,
    pub history: Vec<f64>,
}

/// One accepted (sub)step.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub depth: u32,
    pub deformation: StageStats,
    pub flow: StageStats,
    pub reactions: Vec<(String, [f64; 3])>,
    pub fluid_mass: f64,
    /// Water mass supplied through prescribed-pressure points this step.
    pub boundary_supply: f64,
    pub max_damage: f64,
    pub broken_bonds: usize,
    pub fracture_points: usize,
    pub interface_points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BisectionEvent {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub depth: u32,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct State {
    pub time: f64,
    pub step: usize,
    pub points: Vec<MaterialPoint>,
    pub table: Option<FamilyTable>,
    pub history: BondHistory,
}

/// Start-of-step data shared by the two stages.
pub struct Prepared {
    pub geometry: Geometry,
    pub start: StartData,
    pub history: BondHistory,
}

pub struct Simulation {
    pub problem: Problem,
    pub state: State,
    pub events: Vec<BisectionEvent>,
    caches: [PreconditionerCache; 2],
}

impl Simulation {
    /// Validates the problem, evaluates the initial saturation and applies
    /// pre-cracks.
    pub fn new(problem: Problem) -> Result<Self> {
        problem.validate().map_err(Error::Validation)?;
        let mut points = problem.points.clone();
        for (i, p) in points.iter_mut().enumerate() {
            let mat = &problem.materials[p.material_id];
            let ret = saturation(p.def_grad.determinant(), p.phi_ref, p.p_w, mat)?;
            p.s_r = ret.s_r;
            p.id = i;
        }
        let positions: Vec<Vec3> = points.iter().map(|p| p.x_cur).collect();
        let volumes: Vec<f64> = points.iter().map(|p| p.volume).collect();
        let damage0: Vec<f64> = points.iter().map(|p| p.damage).collect();
        let mut table = neighbor_search(&positions, &volumes, problem.horizon(), problem.config.influence, &problem.periodicity)?;
        let mut history = BondHistory::default();
        carry_history(&mut table, None, &mut history, &problem.cracks, &positions, &damage0);
        let dmg = damage_field(&table, &volumes);
        for (p, d) in points.iter_mut().zip(dmg) {
            p.damage = p.damage.max(d);
        }
        Ok(Simulation {
            problem,
            state: State { time: 0.0, step: 0, points, table: Some(table), history },
            events: Vec::new(),
            caches: Default::default(),
        })
    }

    /// Advances one macro step of `dt`, bisecting on rejection.
    pub fn step(&mut self, dt: f64) -> Result<Vec<StepRecord>> {
        let recs = self.advance(dt, 0)?;
        self.state.step += 1;
        Ok(recs)
    }

    fn advance(&mut self, dt: f64, depth: u32) -> Result<Vec<StepRecord>> {
        match self.try_step(dt, depth) {
            Ok((state, rec)) => {
                self.state = state;
                Ok(vec![rec])
            }
            Err(e) if e.is_step_rejection() && depth < self.problem.config.max_bisections => {
                self.events.push(BisectionEvent { step: self.state.step, time: self.state.time, dt, depth: depth + 1, reason: e.to_string() });
                self.caches.iter_mut().for_each(|c| c.invalidate());
                let mut a = self.advance(0.5 * dt, depth + 1)?;
                a.extend(self.advance(0.5 * dt, depth + 1)?);
                Ok(a)
            }
            Err(e) => Err(e),
        }
    }

    /// Families, operators and frozen fluid data at the start of the next
    /// step, as both stages see them.
    pub fn prepare(&self) -> Result<Prepared> {
        let pb = &self.problem;
        let cfg = &pb.config;
        let state = &self.state;
        let pts = &state.points;
        let n = pts.len();

        let positions: Vec<Vec3> = pts.iter().map(|p| p.x_cur).collect();
        let volumes: Vec<f64> = pts.iter().map(|p| p.volume).collect();
        let damage_n: Vec<f64> = pts.iter().map(|p| p.damage).collect();
        let p_n: Vec<f64> = pts.iter().map(|p| p.p_w).collect();
        let mut history = state.history.clone();
        let mut table = neighbor_search(&positions, &volumes, pb.horizon(), cfg.influence, &pb.periodicity)?;
        carry_history(&mut table, state.table.as_ref(), &mut history, &pb.cracks, &positions, &damage_n);
        classify_interface(&mut table, &p_n, &volumes, cfg.zeta_bar, cfg.interface_mode);
        let geom = Geometry::build(pb, table, positions, volumes.clone(), &damage_n)?;

        let mut ret_n = Vec::with_capacity(n);
        let mut rot_n = Vec::with_capacity(n);
        for (i, p) in pts.iter().enumerate() {
            let mat = &pb.materials[p.material_id];
            ret_n.push(saturation(p.def_grad.determinant(), p.phi_ref, p.p_w, mat)?);
            rot_n.push(polar_rotation_at(&p.def_grad, i)?.0);
        }
        let storage_n: Vec<f64> = pts.iter().zip(&ret_n).map(|(p, r)| storage(p.phi, r, &pb.materials[p.material_id])).collect();
        let div = flow_divergence(pb, &geom, pts, &p_n, &ret_n, &rot_n);
        let flowdiv: Vec<f64> = div.iter().zip(pts).map(|(d, p)| d / pb.materials[p.material_id].rho_w).collect();
        let aux = StartData { ret: ret_n, storage: storage_n, flowdiv };

        Ok(Prepared { geometry: geom, start: aux, history })
    }

    fn try_step(&mut self, dt: f64, depth: u32) -> Result<(State, StepRecord)> {
        let Prepared { geometry: geom, start: aux, mut history } = self.prepare()?;
        let pb = &self.problem;
        let cfg = &pb.config;
        let state = &self.state;
        let pts = &state.points;
        let n = pts.len();
        let t_next = state.time + dt;

        // deformation stage
        let def = DeformationSystem::new(pb, &geom, pts, &aux, dt, t_next);
        let frozen = def.frozen()?;
        let mut dstats = StageStats::default();
        let trial = if cfg.rigid_skeleton {
            let kin: Vec<Kinematic> = pts.iter().map(|p| Kinematic { u: p.u, v: Vec3::zeros(), a: Vec3::zeros() }).collect();
            def.trial(&kin, false)?
        } else {
            let settings = NewtonSettings { tol: cfg.tol_u, abs_floor: cfg.abs_floor, max_iterations: cfg.max_newton };
            let out = newton(&def, vec![0.0; def.dofs.len()], settings, &cfg.linear, &mut self.caches[0])?;
            dstats = StageStats { iterations: out.iterations, linear_iterations: out.linear_iterations, history: out.history };
            def.trial(&def.kinematics(&out.x), false)?
        };
        let point_res = def.point_residuals(&trial);
        let reactions: Vec<(String, [f64; 3])> = pb
            .boundaries
            .iter()
            .enumerate()
            .filter(|(_, g)| g.report_reaction)
            .map(|(k, g)| {
                let r = def.reaction(&point_res, k);
                (g.name.clone(), [r.x, r.y, r.z])
            })
            .collect();

        // bond work and breakage
        let pair_n = def.pair_forces(&def.bond_states(&frozen));
        let pair_1 = def.pair_forces(&def.bond_states(&trial));
        drop(def);
        let Geometry { mut table, .. } = geom;
        let owners = table.owners();
        for (b, &i) in owners.iter().enumerate() {
            let rec = &mut table.bonds[b];
            if rec.intact {
                let deta = trial[rec.neighbor].du - trial[i].du;
                rec.bond_energy += bond_energy_increment(&pair_n[b], &pair_1[b], &deta);
            }
        }
        let delta = table.horizon;
        let w_cr: Vec<f64> = pts.iter().map(|p| critical_bond_energy(pb.materials[p.material_id].fracture_energy, delta, pb.dimension)).collect();
        let broken = break_bonds(&mut table, &w_cr, &mut history);

        let mut next: Vec<MaterialPoint> = pts.clone();
        let new_pos: Vec<Vec3> = pts.iter().zip(&trial).map(|(p, t)| p.x_ref + t.kin.u).collect();
        let new_vol: Vec<f64> = trial.iter().map(|t| t.volume).collect();
        table.refresh_omega0(&new_vol);
        let damage = damage_field(&table, &new_vol);
        for (i, p) in next.iter_mut().enumerate() {
            p.damage = p.damage.max(damage[i]);
            let cr = pb.materials[p.material_id].phi_cr;
            if !p.is_fracture && p.damage >= cr {
                p.is_fracture = true;
                p.p_f = trial[i].p;
                p.p_f_rate = 0.0;
            }
        }
        let dmg_now: Vec<f64> = next.iter().map(|p| p.damage).collect();
        let geom1 = Geometry::moved(pb, table, new_pos.clone(), new_vol.clone(), &dmg_now)?;

        // flow stage
        let fsys = FlowSystem::new(pb, &geom1, &next, &trial, dt, t_next);
        let settings = NewtonSettings { tol: cfg.tol_p, abs_floor: cfg.abs_floor, max_iterations: cfg.max_newton };
        let out = newton(&fsys, fsys.predictor(), settings, &cfg.linear, &mut self.caches[1])?;
        let fstats = StageStats { iterations: out.iterations, linear_iterations: out.linear_iterations, history: out.history.clone() };
        let eval = fsys.evaluate(&out.x)?;
        let fres = fsys.point_residuals(&eval);
        let boundary_supply: f64 = (0..n)
            .filter(|&i| matches!(pb.fluid_bc[i], crate::model::FluidBc::Prescribed { .. }))
            .map(|i| fres[i][0] * dt)
            .sum();
        drop(fsys);

        for (i, p) in next.iter_mut().enumerate() {
            let t = &trial[i];
            p.u = t.kin.u;
            p.v = t.kin.v;
            p.a = t.kin.a;
            p.x_cur = new_pos[i];
            p.def_grad = t.def_grad;
            p.sigma_rot = t.sigma_hat;
            p.sigma_eff = t.sigma;
            p.volume = t.volume;
            p.phi = t.phi;
            p.p_w = eval.p[i];
            p.p_w_rate = eval.rate[i];
            p.s_r = eval.ret[i].s_r;
            if p.is_fracture {
                p.p_f = eval.p_f[i];
                p.p_f_rate = eval.rate_f[i];
            }
            p.is_interface = geom1.table.interface[i];
        }
        let Geometry { table, .. } = geom1;
        let rec = StepRecord {
            step: state.step,
            time: t_next,
            dt,
            depth,
            deformation: dstats,
            flow: fstats,
            reactions,
            fluid_mass: metrics::fluid_mass(&next, &pb.materials),
            boundary_supply,
            max_damage: next.iter().map(|p| p.damage).fold(0.0, f64::max),
            broken_bonds: broken,
            fracture_points: next.iter().filter(|p| p.is_fracture).count(),
            interface_points: next.iter().filter(|p| p.is_interface).count(),
        };
        Ok((State { time: t_next, step: state.step, points: next, table: Some(table), history }, rec))
    }

    /// Retention state of every point at the current time.
    pub fn retention(&self) -> Result<Vec<RetentionState>> {
        self.state
            .points
            .iter()
            .map(|p| saturation(p.def_grad.determinant(), p.phi_ref, p.p_w, &self.problem.materials[p.material_id]))
            .collect()
    }

    pub fn points(&self) -> &[MaterialPoint] {
        &self.state.points
    }

    /// Families of the last step, with bond flags and energies.
    pub fn table(&self) -> Option<&FamilyTable> {
        self.state.table.as_ref()
    }
}
