//! Flow stage: mass balance of pore water (and crack water at fracture
//! points) on the configuration the deformation stage ended in.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::constitutive::{darcy_flux, saturation, storage, RetentionState};
use crate::error::{Result, Stage};
use crate::kinematics::residual_flow_state;
use crate::model::{FluidBc, MaterialPoint, Problem, Vec3};
use crate::states::{flow, fracture_flow_state, fracture_stencil, micro_conductivity, stabilization_coefficient};

use super::deformation::TrialPoint;
use super::geometry::Geometry;
use super::linear::{Coloring, NonlinearProblem};
use super::newmark::Newmark;

/// Fluid state of every point for one set of rates.
#[derive(Debug, Clone)]
pub struct FlowEval {
    pub p: Vec<f64>,
    pub rate: Vec<f64>,
    pub p_f: Vec<f64>,
    pub rate_f: Vec<f64>,
    pub ret: Vec<RetentionState>,
    pub storage: Vec<f64>,
    /// Σ(Q − Q′)V′ per point (mass outflow rate per unit volume).
    pub div: Vec<f64>,
    pub div_f: Vec<f64>,
}

/// Mass outflow rate per unit volume of every point for given pressures.
pub fn flow_divergence(
    problem: &Problem,
    geom: &Geometry,
    points: &[MaterialPoint],
    p: &[f64],
    ret: &[RetentionState],
    rot: &[crate::model::Mat3],
) -> Vec<f64> {
    let g = geom;
    let t = &g.table;
    let delta = t.horizon;
    let dim = problem.dimension;
    let n = t.len();
    let q: Vec<(Vec3, [Vec3; 2], [f64; 2])> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !g.fluid_active[i] {
                return (Vec3::zeros(), [Vec3::zeros(); 2], [0.0; 2]);
            }
            let mat = &problem.materials[points[i].material_id];
            let mut m = [Vec3::zeros(); 2];
            for b in t.range(i) {
                if g.flow_bond[b] {
                    let rec = &t.bonds[b];
                    let k = if t.interface[i] { rec.alpha as usize } else { 0 };
                    m[k] += rec.zeta * ((p[rec.neighbor] - p[i]) * rec.omega * g.volumes[rec.neighbor]);
                }
            }
            let ki = g.k_inv_f[i];
            let grad = ki * (m[0] + m[1]);
            let part = [ki * m[0], ki * m[1]];
            let kr = ret[i].k_r;
            let q = part.map(|gk| darcy_flux(&gk, &rot[i], kr, mat));
            let fp = &g.flow_partition[i];
            let lam = [0, 1].map(|k| {
                if fp.omega0[k] > 0.0 {
                    stabilization_coefficient(mat.stabilization, micro_conductivity(mat, delta, kr, fp.varphi[k], dim), fp.omega0[k], fp.varphi[k], delta, dim)
                } else {
                    0.0
                }
            });
            (grad, q, lam)
        })
        .collect();
    let states: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let (grad, qk, lam) = q[i];
            let rho = problem.materials[points[i].material_id].rho_w;
            t.range(i).map(move |b| {
                if !g.flow_bond[b] {
                    return 0.0;
                }
                let rec = &t.bonds[b];
                let k = if t.interface[i] { rec.alpha as usize } else { 0 };
                let rw = residual_flow_state(&rec.zeta, p[i], p[rec.neighbor], &grad);
                flow(rec, rho, &qk[k], &g.k_inv_f[i], lam[k], rw)
            })
        })
        .collect();
    (0..n)
        .into_par_iter()
        .map(|i| t.range(i).map(|b| (states[b] - states[t.reverse[b]]) * g.volumes[t.bonds[b].neighbor]).sum())
        .collect()
}

pub struct FlowSystem<'a> {
    pub problem: &'a Problem,
    pub geom: &'a Geometry,
    /// Start state, with fracture flags already updated for this step.
    pub start: &'a [MaterialPoint],
    pub trial: &'a [TrialPoint],
    pub dt: f64,
    pub t_next: f64,
    pub nm: Newmark,
    pub dofs: Vec<(usize, usize)>,
    pub dof_of: Vec<Vec<Option<usize>>>,
    typical: f64,
    coloring: OnceLock<Coloring>,
}

impl<'a> FlowSystem<'a> {
    pub fn new(problem: &'a Problem, geom: &'a Geometry, start: &'a [MaterialPoint], trial: &'a [TrialPoint], dt: f64, t_next: f64) -> Self {
        let n = start.len();
        let mut dofs = Vec::new();
        let mut dof_of = vec![vec![None; 2]; n];
        for i in 0..n {
            if !matches!(problem.fluid_bc[i], FluidBc::Prescribed { .. }) {
                dof_of[i][0] = Some(dofs.len());
                dofs.push((i, 0));
            }
        }
        for i in 0..n {
            if start[i].is_fracture {
                dof_of[i][1] = Some(dofs.len());
                dofs.push((i, 1));
            }
        }
        let nm = Newmark::from_config(&problem.config);
        let p_scale = start.iter().map(|p| p.p_w.abs().max(p.p_f.abs())).fold(1.0, f64::max);
        let typical = trial.iter().map(|t| t.p_rate.abs()).fold(0.1 * p_scale / (nm.beta3 * dt), f64::max);
        FlowSystem { problem, geom, start, trial, dt, t_next, nm, dofs, dof_of, typical, coloring: OnceLock::new() }
    }

    /// Rates of the deformation-stage predictor, the Newton starting point.
    pub fn predictor(&self) -> Vec<f64> {
        self.dofs.iter().map(|&(i, s)| if s == 0 { self.trial[i].p_rate } else { self.start[i].p_f_rate }).collect()
    }

    fn fracture_bond(&self, i: usize, j: usize) -> bool {
        self.start[i].is_fracture && self.start[j].is_fracture && self.problem.fluid_bc[i].takes_part_in_flow() && self.problem.fluid_bc[j].takes_part_in_flow()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<FlowEval> {
        let n = self.start.len();
        let mut p = vec![0.0; n];
        let mut rate = vec![0.0; n];
        let mut p_f = vec![0.0; n];
        let mut rate_f = vec![0.0; n];
        for i in 0..n {
            let s = &self.start[i];
            match (self.problem.fluid_bc[i], self.dof_of[i][0]) {
                (FluidBc::Prescribed { value, rate: r }, _) => {
                    p[i] = value + r * self.t_next;
                    rate[i] = r;
                }
                (_, Some(d)) => {
                    rate[i] = x[d];
                    p[i] = self.nm.pressure(s.p_w, s.p_w_rate, x[d], self.dt);
                }
                _ => unreachable!(),
            }
            if let Some(d) = self.dof_of[i][1] {
                rate_f[i] = x[d];
                p_f[i] = self.nm.pressure(s.p_f, s.p_f_rate, x[d], self.dt);
            }
        }
        let ret: Vec<RetentionState> = (0..n)
            .into_par_iter()
            .map(|i| {
                let s = &self.start[i];
                saturation(self.trial[i].j, s.phi_ref, p[i], &self.problem.materials[s.material_id])
            })
            .collect::<Result<_>>()?;
        let stor: Vec<f64> = (0..n).map(|i| storage(self.trial[i].phi, &ret[i], &self.problem.materials[self.start[i].material_id])).collect();
        let rot: Vec<_> = self.trial.iter().map(|t| t.rot).collect();
        let div = flow_divergence(self.problem, self.geom, self.start, &p, &ret, &rot);
        let div_f = self.fracture_divergence(&p_f);
        Ok(FlowEval { p, rate, p_f, rate_f, ret, storage: stor, div, div_f })
    }

    fn fracture_divergence(&self, p_f: &[f64]) -> Vec<f64> {
        let t = &self.geom.table;
        let n = t.len();
        if !self.start.iter().any(|s| s.is_fracture) {
            return vec![0.0; n];
        }
        let dim = self.problem.dimension;
        let states: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let fam = t.family(i);
                let active = |b: &crate::discretization::BondRecord| self.fracture_bond(i, b.neighbor);
                if !self.start[i].is_fracture {
                    return vec![0.0; fam.len()];
                }
                match fracture_stencil(fam, &self.geom.volumes, p_f, i, dim, active) {
                    Ok(st) => fracture_flow_state(fam, &st, &self.problem.materials[self.start[i].material_id], dim, active),
                    Err(_) => vec![0.0; fam.len()],
                }
            })
            .collect();
        let flat: Vec<f64> = states.into_iter().flatten().collect();
        (0..n)
            .map(|i| t.range(i).map(|b| (flat[b] - flat[t.reverse[b]]) * self.geom.volumes[t.bonds[b].neighbor]).sum())
            .collect()
    }

    /// Mass residual of every point (bulk water, crack water).
    pub fn point_residuals(&self, e: &FlowEval) -> Vec<[f64; 2]> {
        let c = self.problem.config.exchange_coefficient;
        (0..self.start.len())
            .map(|i| {
                let s = &self.start[i];
                let mat = &self.problem.materials[s.material_id];
                let v = self.trial[i].volume;
                let rho = mat.rho_w;
                let mut bulk = rho * (e.storage[i] * e.rate[i] + e.ret[i].s_r * self.trial[i].trl) + e.div[i];
                let mut crack = 0.0;
                if s.is_fracture {
                    let ex = rho * c * (e.p[i] - e.p_f[i]);
                    bulk += ex;
                    crack = rho * e.rate_f[i] / mat.water_bulk_modulus + e.div_f[i] - ex;
                }
                [bulk * v, crack * v]
            })
            .collect()
    }
}

impl NonlinearProblem for FlowSystem<'_> {
    fn dim(&self) -> usize {
        self.dofs.len()
    }

    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let e = self.evaluate(x)?;
        let r = self.point_residuals(&e);
        Ok(self.dofs.iter().map(|&(i, s)| r[i][s]).collect())
    }

    fn jacobi_diagonal(&self, x: &[f64]) -> Vec<f64> {
        let Ok(e) = self.evaluate(x) else { return vec![1.0; x.len()] };
        let g = self.geom;
        let t = &g.table;
        let b3dt = self.nm.beta3 * self.dt;
        let delta = t.horizon;
        self.dofs
            .iter()
            .map(|&(i, s)| {
                let st = &self.start[i];
                let mat = &self.problem.materials[st.material_id];
                let v = self.trial[i].volume;
                if s == 1 {
                    return mat.rho_w * v / mat.water_bulk_modulus;
                }
                // storage plus the stabilized conduction through every flow bond
                let kp = micro_conductivity(mat, delta, e.ret[i].k_r, 1.0, self.problem.dimension);
                let lam = stabilization_coefficient(mat.stabilization.max(1.0), kp, t.omega0[i].max(f64::MIN_POSITIVE), 1.0, delta, self.problem.dimension);
                let cond: f64 = t.range(i).filter(|&b| g.flow_bond[b]).map(|b| 2.0 * lam * t.bonds[b].omega * g.volumes[t.bonds[b].neighbor]).sum();
                mat.rho_w * v * (e.storage[i] + b3dt * cond)
            })
            .collect()
    }

    fn coloring(&self) -> &Coloring {
        self.coloring.get_or_init(|| self.geom.coloring(self.problem, &self.dof_of, self.dofs.len()).unwrap_or_default())
    }

    fn typical_scale(&self) -> f64 {
        self.typical
    }

    fn stage(&self) -> Stage {
        Stage::Flow
    }

    fn roundoff_scale(&self, x: &[f64]) -> f64 {
        let Ok(e) = self.evaluate(x) else { return 0.0 };
        let d2 = self.geom.table.horizon.powi(2);
        let mag: f64 = (0..self.start.len())
            .map(|i| {
                let mat = &self.problem.materials[self.start[i].material_id];
                let rho = mat.rho_w;
                let v = self.trial[i].volume;
                // every bond difference of p loses digits in proportion to |p|
                let bonds = self.geom.table.range(i).len() as f64;
                let mut cond = mat.permeability * e.p[i].abs();
                if self.start[i].is_fracture {
                    cond += mat.fracture_permeability * e.p_f[i].abs();
                }
                let m = (rho * (e.storage[i] * e.rate[i].abs() + e.ret[i].s_r * self.trial[i].trl.abs() + bonds * cond / (mat.mu_w * d2)) + e.div[i].abs()) * v;
                m * m
            })
            .sum();
        mag.sqrt()
    }
}
