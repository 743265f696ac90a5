//! Undrained deformation stage: balance of linear momentum with the pore
//! pressure predicted from the volumetric rate.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::constitutive::{elastic_stress_update, porosity_update_at, saturation, RetentionState};
use crate::error::{Error, Result, Stage};
use crate::kinematics::{polar_rotation_at, residual_deformation_state, sym, vector_moment};
use crate::model::{density, Mat3, MaterialPoint, Motion, Problem, Vec3};
use crate::states::{effective_force, fluid_force};

use super::geometry::Geometry;
use super::linear::{Coloring, NonlinearProblem};
use super::newmark::Newmark;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematic {
    pub u: Vec3,
    pub v: Vec3,
    pub a: Vec3,
}

/// Fluid quantities frozen at the start of the step.
#[derive(Debug, Clone)]
pub struct StartData {
    pub ret: Vec<RetentionState>,
    pub storage: Vec<f64>,
    /// Σ(Q − Q′)V′ / ρ_w: volumetric outflow rate per unit volume.
    pub flowdiv: Vec<f64>,
}

/// State of one point at the end of the step for a trial motion.
#[derive(Debug, Clone, Copy)]
pub struct TrialPoint {
    pub kin: Kinematic,
    pub du: Vec3,
    /// ∇Δu over the step.
    pub grad_inc: Mat3,
    pub def_grad: Mat3,
    pub j: f64,
    pub rot: Mat3,
    pub sigma_hat: Mat3,
    pub sigma: Mat3,
    pub sigma_part: [Mat3; 2],
    /// Trace of the step-average velocity gradient.
    pub trl: f64,
    pub p: f64,
    pub p_rate: f64,
    pub p_f: f64,
    pub ret: RetentionState,
    pub phi: f64,
    pub volume: f64,
    pub mass: f64,
}

pub struct DeformationSystem<'a> {
    pub problem: &'a Problem,
    pub geom: &'a Geometry,
    pub start: &'a [MaterialPoint],
    pub aux: &'a StartData,
    pub dt: f64,
    pub t_next: f64,
    pub nm: Newmark,
    pub dofs: Vec<(usize, usize)>,
    pub dof_of: Vec<Vec<Option<usize>>>,
    prescribed: Vec<[Option<Kinematic1>; 3]>,
    f_ext: Vec<Vec3>,
    typical: f64,
    coloring: OnceLock<Coloring>,
}

#[derive(Debug, Clone, Copy)]
struct Kinematic1 {
    u: f64,
    v: f64,
    a: f64,
}

impl<'a> DeformationSystem<'a> {
    pub fn new(problem: &'a Problem, geom: &'a Geometry, start: &'a [MaterialPoint], aux: &'a StartData, dt: f64, t_next: f64) -> Self {
        let nm = Newmark::from_config(&problem.config);
        let ndim = problem.dimension.dofs();
        let n = start.len();
        let mut dofs = Vec::new();
        let mut dof_of = vec![vec![None; 3]; n];
        let mut prescribed = vec![[None; 3]; n];
        for i in 0..n {
            let p = &start[i];
            for c in 0..ndim {
                match problem.constraint_of[i][c] {
                    None => {
                        dof_of[i][c] = Some(dofs.len());
                        dofs.push((i, c));
                    }
                    Some(g) => {
                        let k = match &problem.boundaries[g].motion {
                            Motion::Fixed => Kinematic1 { u: p.u[c], v: 0.0, a: 0.0 },
                            Motion::Velocity(vel) => Kinematic1 { u: p.u[c] + vel[c] * dt, v: vel[c], a: 0.0 },
                            m @ Motion::Acceleration(_) => {
                                let a1 = m.acceleration_at(t_next)[c];
                                let da = Vec3::repeat(a1 - p.a[c]);
                                let u = nm.displacement(p.u, p.v, p.a, da, dt)[c];
                                let v = nm.velocity(p.v, p.a, da, dt)[c];
                                Kinematic1 { u, v, a: a1 }
                            }
                        };
                        prescribed[i][c] = Some(k);
                    }
                }
            }
        }
        let mut f_ext = vec![Vec3::zeros(); n];
        for l in &problem.loads {
            let s = l.factor(t_next);
            for &i in &l.points {
                f_ext[i] += l.density * (s * start[i].volume);
            }
        }
        let gain = nm.displacement_gain(dt);
        // perturbations well above the roundoff of the absolute coordinates
        let reach = start.iter().map(|p| p.x_cur.amax()).fold(problem.spacing, f64::max);
        let mut typical: f64 = 0.1 * reach / gain;
        for p in start {
            typical = typical.max(p.a.amax()).max(p.v.amax() / dt);
        }
        for g in &problem.boundaries {
            if let Motion::Velocity(v) = g.motion {
                typical = typical.max(v.amax() / dt);
            }
        }
        DeformationSystem { problem, geom, start, aux, dt, t_next, nm, dofs, dof_of, prescribed, f_ext, typical, coloring: OnceLock::new() }
    }

    /// End-of-step motion for Δa on the free components.
    pub fn kinematics(&self, x: &[f64]) -> Vec<Kinematic> {
        let ndim = self.problem.dimension.dofs();
        (0..self.start.len())
            .map(|i| {
                let p = &self.start[i];
                let mut da = Vec3::zeros();
                for c in 0..ndim {
                    if let Some(d) = self.dof_of[i][c] {
                        da[c] = x[d];
                    }
                }
                let mut k = Kinematic {
                    u: self.nm.displacement(p.u, p.v, p.a, da, self.dt),
                    v: self.nm.velocity(p.v, p.a, da, self.dt),
                    a: p.a + da,
                };
                for c in 0..3 {
                    if let Some(pk) = self.prescribed[i][c] {
                        k.u[c] = pk.u;
                        k.v[c] = pk.v;
                        k.a[c] = pk.a;
                    } else if c >= ndim {
                        k.u[c] = p.u[c];
                        k.v[c] = 0.0;
                        k.a[c] = 0.0;
                    }
                }
                k
            })
            .collect()
    }

    /// The start state itself: no increment and the start pressures.
    pub fn frozen(&self) -> Result<Vec<TrialPoint>> {
        let kin: Vec<Kinematic> = self.start.iter().map(|p| Kinematic { u: p.u, v: p.v, a: p.a }).collect();
        self.trial(&kin, true)
    }

    pub fn trial(&self, kin: &[Kinematic], frozen: bool) -> Result<Vec<TrialPoint>> {
        let g = self.geom;
        let du: Vec<Vec3> = kin.iter().zip(self.start).map(|(k, p)| k.u - p.u).collect();
        let rigid = self.problem.config.rigid_skeleton;
        (0..self.start.len())
            .into_par_iter()
            .map(|i| {
                let p = &self.start[i];
                let mat = &self.problem.materials[p.material_id];
                let (gt, gp) = if g.active[i] && !rigid {
                    let m = vector_moment(g.table.family(i), &g.volumes, &du, i);
                    let ki = g.k_inv[i];
                    (m.total * ki, [m.part[0] * ki, m.part[1] * ki])
                } else {
                    (Mat3::zeros(), [Mat3::zeros(); 2])
                };
                let f_inc = Mat3::identity() + gt;
                let def_grad = f_inc * p.def_grad;
                let j = def_grad.determinant();
                if !(j > 0.0) {
                    return Err(Error::InvertedElement { point: i, det: j });
                }
                let (rot, _) = polar_rotation_at(&def_grad, i)?;
                let model = mat.skeleton();
                let l = gt / self.dt;
                let su = elastic_stress_update(&p.sigma_rot, &sym(&l), self.dt, &rot, &model);
                let sigma_part = if g.table.interface[i] {
                    [0, 1].map(|k| elastic_stress_update(&p.sigma_rot, &sym(&(gp[k] / self.dt)), self.dt, &rot, &model).sigma)
                } else {
                    [su.sigma; 2]
                };
                let trl = l.trace();
                let phi = if rigid { p.phi } else { porosity_update_at(j, p.phi_ref, i)? };
                let (pw, rate) = if frozen {
                    (p.p_w, p.p_w_rate)
                } else {
                    match self.problem.fluid_bc[i] {
                        crate::model::FluidBc::Prescribed { value, rate } => (value + rate * self.t_next, rate),
                        _ => {
                            let s = self.aux.ret[i].s_r;
                            let rate = -(s * trl + self.aux.flowdiv[i]) / self.aux.storage[i];
                            (self.nm.pressure(p.p_w, p.p_w_rate, rate, self.dt), rate)
                        }
                    }
                };
                let ret = saturation(j, p.phi_ref, pw, mat)?;
                let p_f = if p.is_fracture && !frozen { p.p_f + self.dt * p.p_f_rate } else { p.p_f };
                let volume = p.volume_ref * j;
                Ok(TrialPoint {
                    kin: kin[i],
                    du: du[i],
                    grad_inc: gt,
                    def_grad,
                    j,
                    rot,
                    sigma_hat: su.sigma_hat,
                    sigma: su.sigma,
                    sigma_part,
                    trl,
                    p: pw,
                    p_rate: rate,
                    p_f,
                    ret,
                    phi,
                    volume,
                    mass: density(phi, ret.s_r, mat) * volume,
                })
            })
            .collect()
    }

    /// Total force state T̄ − T_w of every bond.
    pub fn bond_states(&self, trial: &[TrialPoint]) -> Vec<Vec3> {
        let g = self.geom;
        let t = &g.table;
        (0..t.len())
            .into_par_iter()
            .flat_map_iter(|i| {
                let tp = &trial[i];
                let frac_i = self.start[i].is_fracture;
                t.family(i).iter().map(move |b| {
                    if !g.active[i] {
                        return Vec3::zeros();
                    }
                    let k = if t.interface[i] { b.alpha as usize } else { 0 };
                    let rs = residual_deformation_state(&b.zeta, &tp.du, &trial[b.neighbor].du, &tp.grad_inc);
                    let tbar = effective_force(b, &tp.sigma_part[k], &g.k_inv[i], g.beta[i][k], &rs);
                    let tw = if frac_i && self.start[b.neighbor].is_fracture && !b.intact {
                        // fluid in the crack keeps pushing on the faces
                        (g.k_inv[i] * b.zeta) * (b.omega * tp.p_f)
                    } else {
                        fluid_force(b, tp.ret.s_r * tp.p, &g.k_inv[i])
                    };
                    tbar - tw
                })
            })
            .collect()
    }

    /// Pair force T − T′ of every bond (per unit volume squared).
    pub fn pair_forces(&self, states: &[Vec3]) -> Vec<Vec3> {
        let rev = &self.geom.table.reverse;
        states.par_iter().enumerate().map(|(b, s)| s - states[rev[b]]).collect()
    }

    pub fn internal_forces(&self, pair: &[Vec3]) -> Vec<Vec3> {
        let g = self.geom;
        let t = &g.table;
        (0..t.len())
            .into_par_iter()
            .map(|i| {
                let mut f = Vec3::zeros();
                for b in t.range(i) {
                    f += pair[b] * g.volumes[t.bonds[b].neighbor];
                }
                f * g.volumes[i]
            })
            .collect()
    }

    /// M a − f_int − M g − f_ext at every point.
    pub fn point_residuals(&self, trial: &[TrialPoint]) -> Vec<Vec3> {
        let pair = self.pair_forces(&self.bond_states(trial));
        let f = self.internal_forces(&pair);
        let grav = self.problem.config.gravity;
        trial.iter().zip(&f).zip(&self.f_ext).map(|((tp, fi), fe)| tp.kin.a * tp.mass - fi - grav * tp.mass - fe).collect()
    }

    fn gather(&self, r: &[Vec3]) -> Vec<f64> {
        self.dofs.iter().map(|&(i, c)| r[i][c]).collect()
    }

    /// Sum of point residuals over a boundary group's constrained components.
    pub fn reaction(&self, r: &[Vec3], group: usize) -> Vec3 {
        let mut out = Vec3::zeros();
        for &i in &self.problem.boundaries[group].points {
            for c in 0..3 {
                if self.problem.constraint_of[i][c] == Some(group) {
                    out[c] += r[i][c];
                }
            }
        }
        out
    }
}

impl NonlinearProblem for DeformationSystem<'_> {
    fn dim(&self) -> usize {
        self.dofs.len()
    }

    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trial = self.trial(&self.kinematics(x), false)?;
        Ok(self.gather(&self.point_residuals(&trial)))
    }

    fn jacobi_diagonal(&self, _x: &[f64]) -> Vec<f64> {
        let g = self.geom;
        let t = &g.table;
        let gain = self.nm.displacement_gain(self.dt);
        let b3 = self.nm.beta3;
        let diag: Vec<Vec3> = (0..t.len())
            .into_par_iter()
            .map(|i| {
                let p = &self.start[i];
                let mat = &self.problem.materials[p.material_id];
                let (lam, mu) = (mat.lame(), mat.shear_modulus);
                let s = self.aux.ret[i].s_r;
                let und = b3 * s * s / self.aux.storage[i];
                let mass = density(p.phi, p.s_r, mat) * p.volume;
                let mut d = Vec3::zeros();
                if g.active[i] {
                    let vi = g.volumes[i];
                    for b in t.family(i) {
                        let vj = g.volumes[b.neighbor];
                        let w = b.weight();
                        let gv = g.k_inv[i] * b.zeta;
                        let k = if t.interface[i] { b.alpha as usize } else { 0 };
                        let stab = (g.beta[i][k] + g.beta[b.neighbor][k]) * w * vi * vj;
                        for c in 0..3 {
                            d[c] += w * w * vi * vi * vj * ((lam + mu + und) * gv[c] * gv[c] + mu * gv.norm_squared()) + stab;
                        }
                    }
                }
                d * gain + Vec3::repeat(mass)
            })
            .collect();
        self.gather(&diag)
    }

    fn coloring(&self) -> &Coloring {
        self.coloring.get_or_init(|| self.geom.coloring(self.problem, &self.dof_of, self.dofs.len()).unwrap_or_default())
    }

    fn typical_scale(&self) -> f64 {
        self.typical
    }

    fn stage(&self) -> Stage {
        Stage::Deformation
    }

    fn roundoff_scale(&self, x: &[f64]) -> f64 {
        let Ok(trial) = self.trial(&self.kinematics(x), false) else { return 0.0 };
        let states = self.bond_states(&trial);
        let g = self.geom;
        let t = &g.table;
        let mag: Vec<f64> = (0..t.len())
            .map(|i| {
                let s: f64 = t.range(i).map(|b| (states[b].norm() + states[t.reverse[b]].norm()) * g.volumes[t.bonds[b].neighbor]).sum();
                s * g.volumes[i] + trial[i].mass * (trial[i].kin.a.norm() + self.problem.config.gravity.norm()) + self.f_ext[i].norm()
            })
            .collect();
        mag.iter().map(|m| m * m).sum::<f64>().sqrt()
    }
}
