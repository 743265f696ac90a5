//! Local material laws: skeleton stress update in the rotated frame,
//! retention curve, relative permeability, porosity and Darcy flux.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kinematics::sym;
use crate::model::{Mat3, MaterialModel, Vec3};

/// Stress update contract for the solid skeleton. Works in the unrotated
/// frame: given the current unrotated stress and the unrotated strain
/// increment `D̂ dt`, returns the new unrotated stress.
pub trait EffectiveStressModel: Send + Sync {
    fn update(&self, sigma_hat: &Mat3, strain_increment: &Mat3) -> Mat3;

    /// Bulk and shear moduli of the current tangent, used for preconditioning.
    fn tangent_moduli(&self) -> (f64, f64);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearElastic {
    pub bulk: f64,
    pub shear: f64,
}

impl EffectiveStressModel for LinearElastic {
    fn update(&self, sigma_hat: &Mat3, de: &Mat3) -> Mat3 {
        let lambda = self.bulk - 2.0 * self.shear / 3.0;
        sigma_hat + Mat3::identity() * (lambda * de.trace()) + de * (2.0 * self.shear)
    }

    fn tangent_moduli(&self) -> (f64, f64) {
        (self.bulk, self.shear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StressUpdate {
    /// Unrotated stress after the step.
    pub sigma_hat: Mat3,
    /// Cauchy stress in the current frame.
    pub sigma: Mat3,
}

/// D̂ = Rᵀ D R, σ̂ ← σ̂ + C : D̂ dt, σ = R σ̂ Rᵀ.
pub fn elastic_stress_update(
    sigma_hat: &Mat3,
    d: &Mat3,
    dt: f64,
    r: &Mat3,
    model: &dyn EffectiveStressModel,
) -> StressUpdate {
    let d_hat = r.transpose() * sym(d) * r;
    let s = sym(&model.update(sigma_hat, &(d_hat * dt)));
    StressUpdate { sigma_hat: s, sigma: sym(&(r * s * r.transpose())) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetentionState {
    pub s_r: f64,
    pub ds_dp: f64,
    pub k_r: f64,
}

impl RetentionState {
    pub const SATURATED: RetentionState = RetentionState { s_r: 1.0, ds_dp: 0.0, k_r: 1.0 };
}

/// Retention curve `S_r = {1 + [−a1 e^{a2} J p_w]^n}^{−(n−1)/n}` with
/// `e = J/(1−φ_ref) − 1` the current void ratio, plus its pressure
/// derivative and relative permeability.
pub fn saturation(j: f64, phi_ref: f64, p_w: f64, mat: &MaterialModel) -> Result<RetentionState> {
    let n = mat.n_vg;
    if !(n > 1.0) {
        return Err(Error::InvalidRetention(format!("n must exceed 1, got {n}")));
    }
    if p_w >= 0.0 {
        return Ok(RetentionState::SATURATED);
    }
    let m = (n - 1.0) / n;
    let e = (j / (1.0 - phi_ref) - 1.0).max(0.0);
    let c = mat.a1 * e.powf(mat.a2) * j;
    let x = -c * p_w;
    if x <= 0.0 {
        return Ok(RetentionState::SATURATED);
    }
    let xn = x.powf(n);
    let base = 1.0 + xn;
    let s_r = base.powf(-m);
    // dS/dx = −m n xⁿ⁻¹ (1+xⁿ)^{−m−1}, dx/dp = −c
    let ds_dp = m * n * (xn / x) * base.powf(-m - 1.0) * c;
    Ok(RetentionState { s_r, ds_dp, k_r: relative_permeability(s_r, m) })
}

/// k_r = S^{1/2} [1 − (1 − S^{1/m})^m]².
pub fn relative_permeability(s_r: f64, m: f64) -> f64 {
    if s_r >= 1.0 {
        return 1.0;
    }
    if s_r <= 0.0 {
        return 0.0;
    }
    let inner = 1.0 - (1.0 - s_r.powf(1.0 / m)).powf(m);
    (s_r.sqrt() * inner * inner).clamp(0.0, 1.0)
}

/// φ = 1 − (1 − φ_ref)/J.
pub fn porosity_update(j: f64, phi_ref: f64) -> Result<f64> {
    porosity_update_at(j, phi_ref, 0)
}

pub fn porosity_update_at(j: f64, phi_ref: f64, point: usize) -> Result<f64> {
    let phi = 1.0 - (1.0 - phi_ref) / j;
    if !(phi > 0.0 && phi < 1.0) || !(j > 0.0) {
        return Err(Error::PorosityOutOfRange { point, phi });
    }
    Ok(phi)
}

/// Darcy velocity with the material-frame permeability rotated into the
/// current frame: q = −(k_r/μ) R k̂ Rᵀ grad p.
pub fn darcy_flux(grad: &Vec3, r: &Mat3, k_r: f64, mat: &MaterialModel) -> Vec3 {
    let k_hat = Mat3::identity() * mat.permeability;
    -(r * k_hat * r.transpose() * grad) * (k_r / mat.mu_w)
}

/// Storage coefficient φ(S_r/K_w + ∂S_r/∂p_w).
pub fn storage(phi: f64, ret: &RetentionState, mat: &MaterialModel) -> f64 {
    phi * (ret.s_r / mat.water_bulk_modulus + ret.ds_dp)
}
