//! Force and flow states: correspondence terms plus energy-method
//! stabilization, with the micro-modulus and micro-conductivity that scale
//! the stabilizing springs.
//!
//! In plane strain the horizon is a disc of thickness `t`, and the
//! calibration integrals give `12K/(π t δ³)` and `6 k_r k/(μ π t δ³)`.

use serde::Serialize;

use crate::discretization::BondRecord;
use crate::error::{Error, Result};
use crate::model::{Dimension, Mat3, MaterialModel, Vec3};

/// C^(k) = φ^(k) · 18K/(πδ⁴) in 3D.
pub fn micro_modulus(mat: &MaterialModel, delta: f64, varphi: f64, dim: Dimension) -> f64 {
    let k = mat.bulk_modulus;
    let base = match dim {
        Dimension::Three => 18.0 * k / (std::f64::consts::PI * delta.powi(4)),
        Dimension::PlaneStrain { thickness } => 12.0 * k / (std::f64::consts::PI * thickness * delta.powi(3)),
    };
    varphi * base
}

/// K_p^(k) = φ^(k) · 6 k_r k_w/(μ π δ⁴) in 3D.
pub fn micro_conductivity(mat: &MaterialModel, delta: f64, k_r: f64, varphi: f64, dim: Dimension) -> f64 {
    let c = k_r * mat.permeability / mat.mu_w;
    let base = match dim {
        Dimension::Three => 6.0 * c / (std::f64::consts::PI * delta.powi(4)),
        Dimension::PlaneStrain { thickness } => 6.0 * c / (std::f64::consts::PI * thickness * delta.powi(3)),
    };
    varphi * base
}

/// Volume of a full horizon.
pub fn horizon_volume(delta: f64, dim: Dimension) -> f64 {
    match dim {
        Dimension::Three => 4.0 / 3.0 * std::f64::consts::PI * delta.powi(3),
        Dimension::PlaneStrain { thickness } => std::f64::consts::PI * delta * delta * thickness,
    }
}

/// Spring coefficient G C^(k)/(δ ω̄₀^(k)), with ω̄₀^(k) = ω₀^(k)/(φ^(k) V_H)
/// the mean influence over the sub-horizon. The 1/δ turns the per-stretch
/// modulus into a per-length spring; with uniform influence it is the
/// bond-based spring C/δ.
pub fn stabilization_coefficient(g: f64, c_k: f64, omega0_k: f64, varphi_k: f64, delta: f64, dim: Dimension) -> f64 {
    if omega0_k > 0.0 {
        g * c_k * varphi_k * horizon_volume(delta, dim) / (delta * omega0_k)
    } else {
        0.0
    }
}

/// T̄ = ϱω[σ K⁻¹ζ + β R^s] for one bond.
#[inline]
pub fn effective_force(b: &BondRecord, sigma: &Mat3, k_inv: &Mat3, beta: f64, rs: &Vec3) -> Vec3 {
    let w = b.weight();
    if w == 0.0 {
        return Vec3::zeros();
    }
    (sigma * (k_inv * b.zeta) + rs * beta) * w
}

/// T_w = ϱω (S_r p) K⁻¹ζ for one bond.
#[inline]
pub fn fluid_force(b: &BondRecord, s_p: f64, k_inv: &Mat3) -> Vec3 {
    (k_inv * b.zeta) * (b.weight() * s_p)
}

/// Q = ρ_w ϱω[q·K⁻¹ζ − λ R^w] for one bond. Q pairs as outflow (the pair
/// sum of Q reproduces div q), so the stabilizing spring enters with the
/// sign that makes it dissipative.
#[inline]
pub fn flow(b: &BondRecord, rho_w: f64, q: &Vec3, k_inv: &Mat3, lambda: f64, rw: f64) -> f64 {
    let w = b.weight();
    if w == 0.0 {
        return 0.0;
    }
    rho_w * w * (q.dot(&(k_inv * b.zeta)) - lambda * rw)
}

/// Per-bond effective force states of one point; bonds use the stress and
/// spring coefficient of their sub-family.
pub fn effective_force_state(
    family: &[BondRecord],
    sigma: &[Mat3; 2],
    k_inv: &Mat3,
    beta: &[f64; 2],
    residuals: &[Vec3],
) -> Vec<Vec3> {
    family
        .iter()
        .zip(residuals)
        .map(|(b, rs)| {
            let k = b.alpha as usize;
            effective_force(b, &sigma[k], k_inv, beta[k], rs)
        })
        .collect()
}

pub fn fluid_force_state(family: &[BondRecord], p_w: f64, s_r: f64, k_inv: &Mat3) -> Vec<Vec3> {
    family.iter().map(|b| fluid_force(b, s_r * p_w, k_inv)).collect()
}

pub fn fluid_flow_state(
    family: &[BondRecord],
    rho_w: f64,
    q: &[Vec3; 2],
    k_inv: &Mat3,
    lambda: &[f64; 2],
    residuals: &[f64],
) -> Vec<f64> {
    family
        .iter()
        .zip(residuals)
        .map(|(b, rw)| {
            let k = b.alpha as usize;
            flow(b, rho_w, &q[k], k_inv, lambda[k], *rw)
        })
        .collect()
}

/// Stabilization energy density ½ β R^s·R^s of one bond.
pub fn stabilization_energy(b: &BondRecord, beta: f64, rs: &Vec3) -> f64 {
    0.5 * b.weight() * beta * rs.norm_squared()
}

/// Weighted volume m_v = Σ ω|ζ|²V′ and nonlocal gradient of the fracture
/// pressure over the bonds accepted by `active`, normalized by the spatial
/// dimension `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FractureStencil {
    pub m_v: f64,
    pub grad: Vec3,
}

pub fn fracture_stencil(
    family: &[BondRecord],
    volumes: &[f64],
    p_f: &[f64],
    i: usize,
    dim: Dimension,
    active: impl Fn(&BondRecord) -> bool,
) -> Result<FractureStencil> {
    let d = dim.dofs() as f64;
    let mut m_v = 0.0;
    let mut s = Vec3::zeros();
    for b in family.iter().filter(|b| active(b)) {
        let wv = b.omega * volumes[b.neighbor];
        m_v += wv * b.zeta.norm_squared();
        s += b.zeta * (wv * (p_f[b.neighbor] - p_f[i]));
    }
    if !(m_v > 0.0) {
        return Err(Error::DegeneratePoint { point: i, reason: "empty fracture-flow stencil".into() });
    }
    Ok(FractureStencil { m_v, grad: s * (d / m_v) })
}

/// Q_f = (d/m_v) ω ρ_w q_f·ζ with q_f = −(k_f/μ) ∇̃p_f.
pub fn fracture_flow_state(
    family: &[BondRecord],
    stencil: &FractureStencil,
    mat: &MaterialModel,
    dim: Dimension,
    active: impl Fn(&BondRecord) -> bool,
) -> Vec<f64> {
    let d = dim.dofs() as f64;
    let q = -stencil.grad * (mat.fracture_permeability / mat.mu_w);
    family
        .iter()
        .map(|b| if active(b) { d / stencil.m_v * b.omega * mat.rho_w * q.dot(&b.zeta) } else { 0.0 })
        .collect()
}
