//! Scalar diagnostics of a point set.

use crate::model::{MaterialModel, MaterialPoint};

/// Σ ρ_w V φ S_r (1 + p/K_w).
pub fn fluid_mass(points: &[MaterialPoint], materials: &[MaterialModel]) -> f64 {
    points
        .iter()
        .map(|p| {
            let m = &materials[p.material_id];
            m.rho_w * p.volume * p.phi * p.s_r * (1.0 + p.p_w / m.water_bulk_modulus)
        })
        .sum()
}

/// Layer averages of one velocity component. Layers are runs of reference
/// coordinates along `axis` separated by gaps wider than half the spacing.
/// Returns (coordinate, mean) pairs in ascending order, restricted to `keep`.
pub fn velocity_profile(points: &[MaterialPoint], axis: usize, component: usize, spacing: f64, keep: impl Fn(&MaterialPoint) -> bool) -> Vec<(f64, f64)> {
    let mut sel: Vec<(f64, f64)> = points.iter().filter(|p| keep(p)).map(|p| (p.x_ref[axis], p.v[component])).collect();
    sel.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64, usize, f64)> = Vec::new();
    for (x, v) in sel {
        match out.last_mut() {
            Some(l) if x - l.3 <= 0.5 * spacing => {
                l.0 += x;
                l.1 += v;
                l.2 += 1;
            }
            _ => out.push((x, v, 1, x)),
        }
        out.last_mut().unwrap().3 = x;
    }
    out.into_iter().map(|(x, v, c, _)| (x / c as f64, v / c as f64)).collect()
}

/// Σ |v_{k+1} − v_k| over consecutive layers.
pub fn total_variation(profile: &[(f64, f64)]) -> f64 {
    profile.windows(2).map(|w| (w[1].1 - w[0].1).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vec3;

    #[test]
    fn profile_and_variation() {
        let mut pts = Vec::new();
        for k in 0..10 {
            for c in 0..2 {
                let mut p = MaterialPoint::new(pts.len(), Vec3::new(c as f64, 0.0, k as f64 * 0.1), 1e-3, 0);
                p.v.z = if k % 2 == 0 { 1.0 } else { -1.0 };
                pts.push(p);
            }
        }
        let prof = velocity_profile(&pts, 2, 2, 0.1, |_| true);
        assert_eq!(prof.len(), 10);
        assert!((total_variation(&prof) - 18.0).abs() < 1e-12);
        for p in pts.iter_mut() {
            p.v.z = p.x_ref.z;
        }
        let prof = velocity_profile(&pts, 2, 2, 0.1, |_| true);
        assert!((total_variation(&prof) - 0.9).abs() < 1e-12);
    }
}
