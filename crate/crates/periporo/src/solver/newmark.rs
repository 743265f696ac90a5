//! Generalized Newmark updates with the acceleration increment as unknown.

use crate::model::{SolverConfig, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Newmark {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl Newmark {
    pub fn from_config(c: &SolverConfig) -> Self {
        Newmark { beta1: c.beta1, beta2: c.beta2, beta3: c.beta3 }
    }

    /// u = uₙ + Δt vₙ + ½Δt² aₙ + ½β₁Δt² Δa
    pub fn displacement(&self, u: Vec3, v: Vec3, a: Vec3, da: Vec3, dt: f64) -> Vec3 {
        u + v * dt + a * (0.5 * dt * dt) + da * (0.5 * self.beta1 * dt * dt)
    }

    /// v = vₙ + Δt aₙ + β₂Δt Δa
    pub fn velocity(&self, v: Vec3, a: Vec3, da: Vec3, dt: f64) -> Vec3 {
        v + a * dt + da * (self.beta2 * dt)
    }

    /// ∂u/∂Δa
    pub fn displacement_gain(&self, dt: f64) -> f64 {
        0.5 * self.beta1 * dt * dt
    }

    /// p = pₙ + Δt[(1 − β₃) ṗₙ + β₃ ṗ]
    pub fn pressure(&self, p: f64, rate_n: f64, rate: f64, dt: f64) -> f64 {
        p + dt * ((1.0 - self.beta3) * rate_n + self.beta3 * rate)
    }

    /// Inverse of [`Newmark::pressure`] for a prescribed end value.
    pub fn rate_for(&self, p_n: f64, rate_n: f64, p: f64, dt: f64) -> f64 {
        ((p - p_n) / dt - (1.0 - self.beta3) * rate_n) / self.beta3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_acceleration_is_exact() {
        let nm = Newmark { beta1: 0.6, beta2: 0.6, beta3: 0.6 };
        let a = Vec3::new(0.0, 0.0, -9.81);
        let (mut u, mut v) = (Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0));
        let dt = 0.01;
        for _ in 0..100 {
            u = nm.displacement(u, v, a, Vec3::zeros(), dt);
            v = nm.velocity(v, a, Vec3::zeros(), dt);
        }
        assert!((u - Vec3::new(1.0, 0.0, -0.5 * 9.81)).norm() < 1e-12);
        assert!((v - Vec3::new(1.0, 0.0, -9.81)).norm() < 1e-12);
    }

    #[test]
    fn pressure_rate_round_trip() {
        let nm = Newmark { beta1: 0.6, beta2: 0.6, beta3: 0.7 };
        let p = nm.pressure(-15e3, 3.0, -7.0, 0.5);
        assert!((nm.rate_for(-15e3, 3.0, p, 0.5) + 7.0).abs() < 1e-10);
    }
}
