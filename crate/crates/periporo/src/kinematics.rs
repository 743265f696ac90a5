//! Nonlocal gradients and residual states.
//!
//! All sums run over a point's family with weight ϱω and neighbour volume
//! V′. For interface points the same sums are split by the bond's `alpha`
//! flag; both halves are multiplied by the whole-family K⁻¹.

use serde::Serialize;

use crate::discretization::BondRecord;
use crate::error::{Error, Result};
use crate::model::{Dimension, Mat3, Vec3};

/// Largest accepted condition number of the shape tensor.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointKinematics {
    pub k_shape: Mat3,
    pub f: Mat3,
    pub l: Mat3,
    pub d: Mat3,
    pub r: Mat3,
    pub j: f64,
    pub l_split: [Mat3; 2],
}

/// A whole-family quantity together with its two sub-family parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split<T> {
    pub total: T,
    pub part: [T; 2],
}

pub fn sym(a: &Mat3) -> Mat3 {
    (a + a.transpose()) * 0.5
}

/// K = Σ ϱω ζ⊗ζ V′.
pub fn shape_tensor(family: &[BondRecord], volumes: &[f64]) -> Mat3 {
    let mut k = Mat3::zeros();
    for b in family {
        let w = b.weight() * volumes[b.neighbor];
        k += b.zeta * b.zeta.transpose() * w;
    }
    k
}

fn inv2(k: &Mat3, point: usize) -> Result<Mat3> {
    let (a, b, c, d) = (k[(0, 0)], k[(0, 1)], k[(1, 0)], k[(1, 1)]);
    let det = a * d - b * c;
    // symmetric 2×2: eigenvalues from trace and determinant
    let tr = a + d;
    let disc = ((a - d) * (a - d) + 4.0 * b * c).max(0.0).sqrt();
    let (lmax, lmin) = ((tr + disc) * 0.5, (tr - disc) * 0.5);
    if !(lmin > 0.0) || lmax / lmin > CONDITION_LIMIT || det == 0.0 {
        return Err(Error::DegeneratePoint { point, reason: format!("shape tensor singular (eigenvalues {lmin:e}, {lmax:e})") });
    }
    let mut out = Mat3::zeros();
    out[(0, 0)] = d / det;
    out[(0, 1)] = -b / det;
    out[(1, 0)] = -c / det;
    out[(1, 1)] = a / det;
    Ok(out)
}

/// K⁻¹ by the adjugate, with a condition-number guard. In plane strain only
/// the in-plane block is inverted and the out-of-plane entries stay zero.
pub fn invert_shape_tensor(k: &Mat3, dim: Dimension, point: usize) -> Result<Mat3> {
    if dim.is_plane() {
        return inv2(k, point);
    }
    let eig = k.symmetric_eigenvalues();
    let lmax = eig.max();
    let lmin = eig.min();
    if !(lmin > 0.0) || lmax / lmin > CONDITION_LIMIT {
        return Err(Error::DegeneratePoint { point, reason: format!("shape tensor singular (eigenvalues {lmin:e}, {lmax:e})") });
    }
    let m = k;
    let c00 = m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)];
    let c01 = m[(1, 2)] * m[(2, 0)] - m[(1, 0)] * m[(2, 2)];
    let c02 = m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)];
    let det = m[(0, 0)] * c00 + m[(0, 1)] * c01 + m[(0, 2)] * c02;
    let adj = Mat3::new(
        c00,
        m[(0, 2)] * m[(2, 1)] - m[(0, 1)] * m[(2, 2)],
        m[(0, 1)] * m[(1, 2)] - m[(0, 2)] * m[(1, 1)],
        c01,
        m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)],
        m[(0, 2)] * m[(1, 0)] - m[(0, 0)] * m[(1, 2)],
        c02,
        m[(0, 1)] * m[(2, 0)] - m[(0, 0)] * m[(2, 1)],
        m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
    );
    Ok(adj / det)
}

/// `(Σ ϱω (f_j − f_i)⊗ζ V′)` split by sub-family, for any per-point vector field.
pub fn vector_moment(family: &[BondRecord], volumes: &[f64], field: &[Vec3], i: usize) -> Split<Mat3> {
    let mut part = [Mat3::zeros(); 2];
    let fi = field[i];
    for b in family {
        let w = b.weight() * volumes[b.neighbor];
        part[b.alpha as usize] += (field[b.neighbor] - fi) * b.zeta.transpose() * w;
    }
    Split { total: part[0] + part[1], part }
}

/// `(Σ ϱω (s_j − s_i) ζ V′)` split by sub-family, for a scalar field.
pub fn scalar_moment(family: &[BondRecord], volumes: &[f64], field: &[f64], i: usize) -> Split<Vec3> {
    let mut part = [Vec3::zeros(); 2];
    let si = field[i];
    for b in family {
        let w = b.weight() * volumes[b.neighbor];
        part[b.alpha as usize] += b.zeta * ((field[b.neighbor] - si) * w);
    }
    Split { total: part[0] + part[1], part }
}

/// L = (Σ ϱω Ẏ⊗ζ V′) K⁻¹ with the split parts sharing the whole-family K⁻¹.
pub fn velocity_gradient(
    family: &[BondRecord],
    volumes: &[f64],
    velocities: &[Vec3],
    i: usize,
    k_inv: &Mat3,
) -> Split<Mat3> {
    let m = vector_moment(family, volumes, velocities, i);
    Split { total: m.total * k_inv, part: [m.part[0] * k_inv, m.part[1] * k_inv] }
}

/// Incremental deformation gradient from displacement increments over the step.
pub fn deformation_gradient(
    family: &[BondRecord],
    volumes: &[f64],
    increments: &[Vec3],
    i: usize,
    k_inv: &Mat3,
) -> Split<Mat3> {
    let g = velocity_gradient(family, volumes, increments, i, k_inv);
    let id = Mat3::identity();
    Split { total: id + g.total, part: [id + g.part[0], id + g.part[1]] }
}

/// grad p = (Σ ϱω Φ ζ V′) K⁻¹, Φ = p′ − p.
pub fn pressure_gradient(
    family: &[BondRecord],
    volumes: &[f64],
    pressures: &[f64],
    i: usize,
    k_inv: &Mat3,
) -> Split<Vec3> {
    let m = scalar_moment(family, volumes, pressures, i);
    Split { total: k_inv * m.total, part: [k_inv * m.part[0], k_inv * m.part[1]] }
}

/// Left polar decomposition F = V R.
pub fn polar_rotation(f: &Mat3) -> Result<(Mat3, Mat3)> {
    polar_rotation_at(f, 0)
}

pub fn polar_rotation_at(f: &Mat3, point: usize) -> Result<(Mat3, Mat3)> {
    let det = f.determinant();
    if !(det > 0.0) {
        return Err(Error::InvertedElement { point, det });
    }
    // B = F Fᵀ = V², V = sqrt(B) by eigen-decomposition; R = V⁻¹ F
    let b = f * f.transpose();
    let eig = nalgebra::SymmetricEigen::new(b);
    let q = eig.eigenvectors;
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v_inv = q * Mat3::from_diagonal(&s.map(|x| 1.0 / x)) * q.transpose();
    let mut r = v_inv * f;
    // one Newton step on the orthogonal factor cleans up rounding
    if let Some(rit) = r.try_inverse() {
        r = (r + rit.transpose()) * 0.5;
    }
    let v = sym(&(f * r.transpose()));
    Ok((r, v))
}

/// R^s = Y − F ζ for one bond, with Y = ζ + Δu′ − Δu and F = I + `grad`.
/// Written in increments so ζ never cancels against itself.
#[inline]
pub fn residual_deformation_state(zeta: &Vec3, du_i: &Vec3, du_j: &Vec3, grad: &Mat3) -> Vec3 {
    (du_j - du_i) - grad * zeta
}

/// R^w = Φ − grad·ζ for one bond.
#[inline]
pub fn residual_flow_state(zeta: &Vec3, p_i: f64, p_j: f64, grad: &Vec3) -> f64 {
    (p_j - p_i) - grad.dot(zeta)
}

/// Full kinematic record of a point from its step increments.
pub fn point_kinematics(
    family: &[BondRecord],
    volumes: &[f64],
    increments: &[Vec3],
    i: usize,
    k_inv: &Mat3,
    f_prev: &Mat3,
    dt: f64,
) -> Result<PointKinematics> {
    let k_shape = shape_tensor(family, volumes);
    let g = velocity_gradient(family, volumes, increments, i, k_inv);
    let f_inc = Mat3::identity() + g.total;
    let f = f_inc * f_prev;
    let (r, _) = polar_rotation_at(&f, i)?;
    let l = g.total / dt;
    Ok(PointKinematics {
        k_shape,
        f,
        l,
        d: sym(&l),
        r,
        j: f.determinant(),
        l_split: [g.part[0] / dt, g.part[1] / dt],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{build_lattice, neighbor_search, BoxGeometry, Periodicity};
    use crate::model::Influence;

    fn lattice(n: usize) -> (Vec<Vec3>, Vec<f64>, crate::discretization::FamilyTable) {
        let g = BoxGeometry { min: Vec3::zeros(), max: Vec3::repeat(n as f64 * 0.1), spacing: 0.1, dimension: Dimension::Three };
        let s = build_lattice(&g).unwrap();
        let x: Vec<Vec3> = s.iter().map(|s| s.position).collect();
        let v: Vec<f64> = s.iter().map(|s| s.volume).collect();
        let t = neighbor_search(&x, &v, 0.305, Influence::Uniform, &Periodicity::default()).unwrap();
        (x, v, t)
    }

    fn rot_z(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn six_neighbor_stencil() {
        let fam: Vec<BondRecord> = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()]
            .iter()
            .enumerate()
            .map(|(k, z)| BondRecord { neighbor: k, zeta: z * 0.2, omega: 1.0, intact: true, alpha: false, bond_energy: 0.0, image: [0; 3] })
            .collect();
        let k = shape_tensor(&fam, &[0.5; 6]);
        assert!((k - Mat3::identity() * (2.0 * 0.5 * 0.04)).abs().max() < 1e-15);
    }

    #[test]
    fn collinear_family_is_degenerate() {
        let fam: Vec<BondRecord> = (1..4)
            .map(|k| BondRecord { neighbor: 0, zeta: Vec3::x() * k as f64, omega: 1.0, intact: true, alpha: false, bond_energy: 0.0, image: [0; 3] })
            .collect();
        let k = shape_tensor(&fam, &[1.0]);
        assert!(matches!(invert_shape_tensor(&k, Dimension::Three, 7), Err(Error::DegeneratePoint { point: 7, .. })));
    }

    #[test]
    fn interior_shape_tensor_matches_lattice_sum() {
        let (_, v, t) = lattice(9);
        let center = 4 + 9 * (4 + 9 * 4);
        let k = shape_tensor(t.family(center), &v);
        // κ = V h² Σ i² over the integer stencil
        let mut s = 0.0;
        for i in -3i32..=3 {
            for j in -3i32..=3 {
                for l in -3i32..=3 {
                    let d2 = (i * i + j * j + l * l) as f64;
                    if d2 > 0.0 && d2 <= 3.05 * 3.05 {
                        s += (i * i) as f64;
                    }
                }
            }
        }
        let kappa = 1e-3 * 0.01 * s;
        assert!((k - Mat3::identity() * kappa).abs().max() < 1e-12 * kappa);
        let inv = invert_shape_tensor(&k, Dimension::Three, 0).unwrap();
        assert!((inv * k - Mat3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn affine_velocity_reproduced() {
        let (x, v, t) = lattice(9);
        let a = Mat3::new(0.3, -1.2, 0.5, 2.0, 0.1, -0.7, 0.9, 0.4, -0.2);
        let vel: Vec<Vec3> = x.iter().map(|p| a * p).collect();
        for i in 0..x.len() {
            let k = shape_tensor(t.family(i), &v);
            let kinv = invert_shape_tensor(&k, Dimension::Three, i).unwrap();
            let l = velocity_gradient(t.family(i), &v, &vel, i, &kinv);
            // affine reproduction holds for truncated stencils too
            assert!((l.total - a).abs().max() < 1e-12 * a.abs().max(), "point {i}");
        }
        let trans = vec![Vec3::new(1.0, 2.0, 3.0); x.len()];
        let k = shape_tensor(t.family(0), &v);
        let kinv = invert_shape_tensor(&k, Dimension::Three, 0).unwrap();
        assert_eq!(velocity_gradient(t.family(0), &v, &trans, 0, &kinv).total, Mat3::zeros());
    }

    #[test]
    fn split_gradients_sum_to_whole() {
        let (x, v, mut t) = lattice(6);
        let p: Vec<f64> = x.iter().map(|p| p.z - 0.3).collect();
        crate::discretization::classify_interface(&mut t, &p, &v, 0.0, crate::model::InterfaceMode::Classify);
        let a = Mat3::new(1.0, 2.0, 0.0, 0.0, 1.0, 3.0, -1.0, 0.0, 2.0);
        let vel: Vec<Vec3> = x.iter().map(|q| a * q).collect();
        let g = Vec3::new(3.0, -1.0, 2.0);
        let pl: Vec<f64> = x.iter().map(|q| g.dot(q)).collect();
        let mut seen = false;
        for i in 0..x.len() {
            if !t.interface[i] {
                continue;
            }
            seen = true;
            let k = shape_tensor(t.family(i), &v);
            let kinv = invert_shape_tensor(&k, Dimension::Three, i).unwrap();
            let l = velocity_gradient(t.family(i), &v, &vel, i, &kinv);
            assert!((l.part[0] + l.part[1] - a).abs().max() < 1e-12 * 3.0);
            let gp = pressure_gradient(t.family(i), &v, &pl, i, &kinv);
            assert!((gp.part[0] + gp.part[1] - g).abs().max() < 1e-12 * 3.0);
        }
        assert!(seen);
    }

    #[test]
    fn linear_pressure_reproduced() {
        let (x, v, t) = lattice(7);
        let g = Vec3::new(-2.0e4, 5.0e3, 9.81e3);
        let p: Vec<f64> = x.iter().map(|q| 1e5 + g.dot(q)).collect();
        for i in 0..x.len() {
            let k = shape_tensor(t.family(i), &v);
            let kinv = invert_shape_tensor(&k, Dimension::Three, i).unwrap();
            let gp = pressure_gradient(t.family(i), &v, &p, i, &kinv);
            assert!((gp.total - g).norm() < 1e-12 * g.norm() * 10.0);
            for b in t.family(i) {
                let rw = residual_flow_state(&b.zeta, p[i], p[b.neighbor], &gp.total);
                assert!(rw.abs() < 1e-9);
            }
        }
        let uniform = vec![7.0; x.len()];
        let k = shape_tensor(t.family(3), &v);
        let kinv = invert_shape_tensor(&k, Dimension::Three, 3).unwrap();
        assert_eq!(pressure_gradient(t.family(3), &v, &uniform, 3, &kinv).total, Vec3::zeros());
    }

    #[test]
    fn polar_examples() {
        let (r, v) = polar_rotation(&Mat3::identity()).unwrap();
        assert!((r - Mat3::identity()).abs().max() < 1e-15);
        assert!((v - Mat3::identity()).abs().max() < 1e-15);
        let q = rot_z(37.0);
        let (r, v) = polar_rotation(&q).unwrap();
        assert!((r - q).abs().max() < 1e-14);
        assert!((v - Mat3::identity()).abs().max() < 1e-14);
        let f = Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0)) * rot_z(30.0);
        let (r, v) = polar_rotation(&f).unwrap();
        assert!((v * r - f).abs().max() <= 1e-12 * f.abs().max());
        assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!(v.symmetric_eigenvalues().min() > 0.0);
        let mut bad = Mat3::identity();
        bad[(2, 2)] = -1.0;
        assert!(matches!(polar_rotation(&bad), Err(Error::InvertedElement { .. })));
    }

    #[test]
    fn sawtooth_is_invisible_to_gradient() {
        // 1D 7-point stencil: centre plus three on each side, alternating ±e
        let fam: Vec<BondRecord> = (-3i32..=3)
            .filter(|k| *k != 0)
            .map(|k| BondRecord {
                neighbor: (k + 3) as usize,
                zeta: Vec3::new(k as f64, 0.0, 0.0),
                omega: 1.0,
                intact: true,
                alpha: false,
                bond_energy: 0.0,
                image: [0; 3],
            })
            .collect();
        let e = Vec3::new(0.0, 0.0, 1e-3);
        let du: Vec<Vec3> = (0..7).map(|k| if k % 2 == 1 { e } else { -e }).collect();
        let vols = [1.0; 7];
        let moment = vector_moment(&fam, &vols, &du, 3);
        assert!(moment.total.norm() < 1e-18);
        let g = Mat3::zeros();
        for b in &fam {
            let rs = residual_deformation_state(&b.zeta, &du[3], &du[b.neighbor], &g);
            let k = b.neighbor as i32 - 3;
            let expect = if k % 2 == 0 { Vec3::zeros() } else { -2.0 * e };
            assert!((rs - expect).norm() < 1e-18);
        }
        // checkerboard pressure is likewise invisible
        let p: Vec<f64> = (0..7).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let m = scalar_moment(&fam, &vols, &p, 3);
        assert_eq!(m.total, Vec3::zeros());
    }

    #[test]
    fn single_perturbed_bond_residual() {
        let (x, v, t) = lattice(9);
        let center = 4 + 9 * (4 + 9 * 4);
        let a = Mat3::new(1e-3, 2e-4, 0.0, 0.0, -5e-4, 1e-4, 3e-4, 0.0, 2e-4);
        let mut du: Vec<Vec3> = x.iter().map(|p| a * p).collect();
        let target = t.family(center)[10].neighbor;
        let e = Vec3::new(1e-5, -2e-5, 3e-5);
        du[target] += e;
        let k = shape_tensor(t.family(center), &v);
        let kinv = invert_shape_tensor(&k, Dimension::Three, center).unwrap();
        let g = velocity_gradient(t.family(center), &v, &du, center, &kinv).total;
        for b in t.family(center) {
            let rs = residual_deformation_state(&b.zeta, &du[center], &du[b.neighbor], &g);
            // F feeds back e⊗ζ K⁻¹ V on every bond
            let feedback = e * (kinv * t.family(center)[10].zeta * v[target]).transpose() * b.zeta;
            let expect = if b.neighbor == target { e - feedback } else { -feedback };
            assert!((rs - expect).norm() < 1e-14, "{rs} vs {expect}");
        }
    }

    #[test]
    fn plane_inverse_leaves_out_of_plane_zero() {
        let mut k = Mat3::zeros();
        k[(0, 0)] = 2.0;
        k[(1, 1)] = 4.0;
        k[(0, 1)] = 1.0;
        k[(1, 0)] = 1.0;
        let inv = invert_shape_tensor(&k, Dimension::PlaneStrain { thickness: 1.0 }, 0).unwrap();
        let p = inv * k;
        assert!((p[(0, 0)] - 1.0).abs() < 1e-15 && (p[(1, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(inv[(2, 2)], 0.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn polar_round_trip(m in proptest::array::uniform9(-0.4f64..0.4)) {
            let f = Mat3::identity() + Mat3::from_row_slice(&m);
            proptest::prop_assume!(f.determinant() > 0.05);
            let (r, v) = polar_rotation(&f).unwrap();
            proptest::prop_assert!((v * r - f).abs().max() <= 1e-12 * f.abs().max());
            proptest::prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() <= 1e-10);
            proptest::prop_assert!((r.determinant() - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn unrotated_rate_is_objective(m in proptest::array::uniform9(-0.2f64..0.2), angle in -180.0f64..180.0, w in proptest::array::uniform9(-1.0f64..1.0)) {
            // F₁ = Q F, L₁ = Q L Qᵀ + Ω: D̂ = Rᵀ D R must agree
            let f = Mat3::identity() + Mat3::from_row_slice(&m);
            proptest::prop_assume!(f.determinant() > 0.1);
            let l = Mat3::from_row_slice(&w);
            let q = rot_z(angle);
            let (r, _) = polar_rotation(&f).unwrap();
            let (r1, _) = polar_rotation(&(q * f)).unwrap();
            let d_hat = r.transpose() * sym(&l) * r;
            let d1_hat = r1.transpose() * sym(&(q * l * q.transpose())) * r1;
            proptest::prop_assert!((d_hat - d1_hat).abs().max() <= 1e-10);
        }
    }
}
