//! End-to-end acceptance runs. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero when any of them fails.
//!
//! `ACCEPTANCE_ONLY=3,5` restricts the run to the listed criteria.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use periporo::constitutive::saturation;
use periporo::discretization::{build_lattice, neighbor_search, BoxGeometry, Periodicity};
use periporo::io::deck::load_problem;
use periporo::io::run::{run_problem, Overrides};
use periporo::kinematics::{invert_shape_tensor, polar_rotation, pressure_gradient, residual_deformation_state, velocity_gradient};
use periporo::model::{BodyLoad, InterfaceMode};
use periporo::solver::deformation::{DeformationSystem, Kinematic, TrialPoint};
use periporo::solver::flow::FlowSystem;
use periporo::solver::linear::{dense_jacobian, tangent_apply, NonlinearProblem};
use periporo::solver::metrics::fluid_mass;
use periporo::solver::{Prepared, Simulation};
use periporo::states::stabilization_energy;
use periporo::{Dimension, Influence, Mat3, MaterialModel, MaterialPoint, Problem, SolverConfig, Vec3};

type Outcome = Result<String, String>;

fn deck(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../decks").join(name)
}

fn soil() -> MaterialModel {
    MaterialModel {
        name: "soil".into(),
        rho_s: 2100.0,
        rho_w: 1000.0,
        mu_w: 1e-3,
        bulk_modulus: 3.3e7,
        shear_modulus: 1.62e7,
        water_bulk_modulus: 2e8,
        permeability: 1e-14,
        a1: 1e-4,
        a2: 0.0,
        n_vg: 1.25,
        s_a: 0.0,
        fracture_energy: 0.0,
        stabilization: 1.0,
        phi_cr: 1.0,
        fracture_permeability: 0.0,
    }
}

fn lattice(n: [usize; 3], h: f64, dim: Dimension) -> Vec<MaterialPoint> {
    let g = BoxGeometry {
        min: Vec3::zeros(),
        max: Vec3::new(n[0] as f64 * h, n[1] as f64 * h, n[2] as f64 * h),
        spacing: h,
        dimension: dim,
    };
    build_lattice(&g)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut p = MaterialPoint::new(i, s.position, s.volume, 0);
            p.set_porosity(0.3);
            p
        })
        .collect()
}

fn random_stress(rng: &mut StdRng, scale: f64) -> Mat3 {
    let mut s = Mat3::zeros();
    for a in 0..3 {
        for b in a..3 {
            let v = rng.random_range(-scale..scale);
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    s
}

fn max_norm<'a>(v: impl Iterator<Item = &'a Vec3>) -> f64 {
    v.map(|x| x.norm()).fold(0.0, f64::max)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    if elapsed.as_secs_f64() > limit_s as f64 {
        Err(format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
    } else {
        Ok(())
    }
}

// 1 ------------------------------------------------------------------------

fn patch_test() -> Outcome {
    let t0 = Instant::now();
    let h = 0.1;
    let sigma = Mat3::new(-2.0e4, 3.0e3, -1.0e3, 3.0e3, -1.5e4, 2.0e3, -1.0e3, 2.0e3, -3.0e4);
    let slope = Vec3::new(2.0e3, -1.0e3, 3.0e3);
    let mut lines = Vec::new();
    for g in [0.0, 1.0] {
        let mut pts = lattice([21, 21, 21], h, Dimension::Three);
        for p in pts.iter_mut() {
            p.set_stress(sigma);
            p.p_w = 5.0e4 + slope.dot(&p.x_ref);
        }
        let mut mat = soil();
        mat.stabilization = g;
        let n = pts.len();
        let mut pb = Problem::bare(Dimension::Three, h, pts, vec![mat.clone()], SolverConfig::default());
        // body force in equilibrium with the pore pressure gradient
        pb.loads.push(BodyLoad { name: "seepage".into(), points: (0..n).collect(), density: slope, ramp_time: 0.0 });
        // the pair sum reaches the neighbours' families, so interior points
        // sit two horizons inside the faces
        let reach = 2.0 * pb.horizon();
        let interior: Vec<usize> = (0..n).filter(|&i| pb.points[i].x_ref.iter().all(|&c| c >= reach && c <= 2.1 - reach)).collect();
        let sim = Simulation::new(pb).map_err(|e| e.to_string())?;
        let Prepared { geometry, start, .. } = sim.prepare().map_err(|e| e.to_string())?;
        let pts = sim.points();
        let d = DeformationSystem::new(&sim.problem, &geometry, pts, &start, 1e-3, 1e-3);
        // the imposed fields themselves, without the step's pressure predictor
        let trial = d.frozen().map_err(|e| e.to_string())?;
        let r = d.point_residuals(&trial);
        let f = FlowSystem::new(&sim.problem, &geometry, pts, &trial, 1e-3, 1e-3);
        let e = f.evaluate(&vec![0.0; f.dim()]).map_err(|e| e.to_string())?;
        let m = f.point_residuals(&e);
        let force_scale = sigma.abs().max() * h * h;
        let flow_scale = mat.rho_w * mat.permeability / mat.mu_w * slope.norm() * h * h;
        let rm = interior.iter().map(|&i| r[i].norm()).fold(0.0, f64::max) / force_scale;
        let mm = interior.iter().map(|&i| m[i][0].abs()).fold(0.0, f64::max) / flow_scale;
        if interior.len() < 729 {
            return Err(format!("only {} interior points", interior.len()));
        }
        if !(rm < 1e-10 && mm < 1e-10) {
            return Err(format!("G={g}: motion {rm:.2e}, mass {mm:.2e} of scale"));
        }
        lines.push(format!("G={g}: motion {rm:.1e}, mass {mm:.1e}"));
    }
    within(t0.elapsed(), 10)?;
    Ok(format!("{} ({:.1} s)", lines.join("; "), t0.elapsed().as_secs_f64()))
}

// 2 ------------------------------------------------------------------------

fn affine_reproduction() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let h = 0.1;
    let mut pts = lattice([12, 12, 12], h, Dimension::Three);
    for p in pts.iter_mut() {
        let j = Vec3::from_fn(|_, _| rng.random_range(-0.25..0.25) * h);
        p.x_cur += j;
    }
    let x: Vec<Vec3> = pts.iter().map(|p| p.x_cur).collect();
    let vol: Vec<f64> = pts.iter().map(|p| p.volume).collect();
    let delta = 3.05 * h;
    let table = neighbor_search(&x, &vol, delta, Influence::Gaussian, &Periodicity::default()).map_err(|e| e.to_string())?;
    let a = Mat3::new(0.3, -1.2, 0.7, 2.0, 0.1, -0.4, -0.9, 0.5, 1.1);
    let slope = Vec3::new(-3.0e3, 1.5e3, 4.0e2);
    let vel: Vec<Vec3> = x.iter().map(|xi| a * xi + Vec3::new(1.0, -2.0, 0.5)).collect();
    let pres: Vec<f64> = x.iter().map(|xi| 1.0e4 + slope.dot(xi)).collect();
    let (mut el, mut ep, mut count) = (0.0f64, 0.0f64, 0);
    for i in 0..x.len() {
        if !pts[i].x_ref.iter().all(|&c| c >= delta + 0.25 * h && c <= 1.2 - delta - 0.25 * h) {
            continue;
        }
        let fam = table.family(i);
        let k_inv = invert_shape_tensor(&periporo::kinematics::shape_tensor(fam, &vol), Dimension::Three, i).map_err(|e| e.to_string())?;
        let l = velocity_gradient(fam, &vol, &vel, i, &k_inv).total;
        let g = pressure_gradient(fam, &vol, &pres, i, &k_inv).total;
        el = el.max((l - a).norm() / a.norm());
        ep = ep.max((g - slope).norm() / slope.norm());
        count += 1;
    }
    check(el < 1e-12 && ep < 1e-12, format!("{count} interior points of a jittered lattice: velocity gradient {el:.1e}, pressure gradient {ep:.1e}"))
}

// 3 ------------------------------------------------------------------------

fn sawtooth(g: f64) -> Result<(f64, f64, f64), String> {
    let mut pb = load_problem(&deck("ex1_column.toml")).map_err(|e| e.to_string())?;
    Overrides { stabilization: Some(g), ..Default::default() }.apply(&mut pb);
    let h = pb.spacing;
    let delta = pb.horizon();
    let sim = Simulation::new(pb).map_err(|e| e.to_string())?;
    let Prepared { geometry, start, .. } = sim.prepare().map_err(|e| e.to_string())?;
    let pts = sim.points();
    let d = DeformationSystem::new(&sim.problem, &geometry, pts, &start, 1e-3, 1e-3);
    let eps = 1e-4 * h;
    let kin: Vec<Kinematic> = pts
        .iter()
        .map(|p| {
            let layer = ((p.x_ref.z / h).floor() as i64).rem_euclid(2);
            let s = if layer == 0 { eps } else { -eps };
            Kinematic { u: p.u + Vec3::new(0.0, 0.0, s), v: p.v, a: p.a }
        })
        .collect();
    let trial = d.trial(&kin, true).map_err(|e| e.to_string())?;
    let frozen = d.frozen().map_err(|e| e.to_string())?;
    let f = d.internal_forces(&d.pair_forces(&d.bond_states(&trial)));
    let f0 = d.internal_forces(&d.pair_forces(&d.bond_states(&frozen)));
    let (zmin, zmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x_ref.z), b.max(p.x_ref.z)));
    let interior: Vec<usize> = (0..pts.len()).filter(|&i| pts[i].x_ref.z > zmin + 2.0 * delta && pts[i].x_ref.z < zmax - 2.0 * delta).collect();
    let restoring = interior.iter().map(|&i| (f[i] - f0[i]).norm()).fold(0.0, f64::max);
    // restoring work of the alternating pattern
    let work: f64 = interior.iter().map(|&i| -(f[i] - f0[i]).dot(&trial[i].du)).sum();
    let t = &geometry.table;
    let mut energy = 0.0;
    for &i in &interior {
        for b in t.family(i) {
            let rs = residual_deformation_state(&b.zeta, &trial[i].du, &trial[b.neighbor].du, &trial[i].grad_inc);
            energy += stabilization_energy(b, geometry.beta[i][0], &rs) * geometry.volumes[b.neighbor] * geometry.volumes[i];
        }
    }
    let scale = sim.problem.materials[0].bulk_modulus * eps / h * h * h;
    Ok((restoring / scale, energy, work))
}

fn column_variation(g: f64) -> Result<(f64, f64), String> {
    let mut pb = load_problem(&deck("ex1_column.toml")).map_err(|e| e.to_string())?;
    Overrides { stabilization: Some(g), ..Default::default() }.apply(&mut pb);
    let out = run_problem(pb, None).map_err(|e| e.to_string())?;
    if let Some(e) = out.failure {
        return Err(format!("G={g} run stopped: {e}"));
    }
    let last = out.report.velocity_variation.last().ok_or("no samples")?;
    Ok((last.time, last.total_variation))
}

fn zero_energy_mode() -> Outcome {
    let t0 = Instant::now();
    let (r0, e0, _) = sawtooth(0.0)?;
    let (r1, e1, w1) = sawtooth(1.0)?;
    if !(r0 < 1e-10 && e0 == 0.0) {
        return Err(format!("G=0 sawtooth: restoring force {r0:.2e} of scale, energy {e0:.2e}"));
    }
    if !(e1 > 0.0 && w1 > 0.0) {
        return Err(format!("G=1 sawtooth: energy {e1:.2e} J, restoring work {w1:.2e}"));
    }
    let (t, tv0) = column_variation(0.0)?;
    let (_, tv1) = column_variation(1.0)?;
    let ratio = tv0 / tv1;
    within(t0.elapsed(), 300)?;
    check(
        ratio >= 5.0,
        format!(
            "sawtooth force {r0:.1e} at G=0, energy {e1:.3e} J at G=1 ({r1:.2} of scale); TV at t={t:.3} s: {tv0:.3e} vs {tv1:.3e}, ratio {ratio:.1} ({:.0} s)",
            t0.elapsed().as_secs_f64()
        ),
    )
}

// 4 ------------------------------------------------------------------------

/// Terzaghi series for a layer of drainage length `h` drained at ξ = 0.
fn terzaghi(p0: f64, xi: f64, h: f64, tv: f64, terms: usize) -> f64 {
    use std::f64::consts::PI;
    (0..terms)
        .map(|m| {
            let mm = (2 * m + 1) as f64 * PI / 2.0;
            2.0 * p0 / mm * (mm * xi / h).sin() * (-mm * mm * tv).exp()
        })
        .sum()
}

fn consolidation() -> Outcome {
    let t0 = Instant::now();
    let pb = load_problem(&deck("terzaghi.toml")).map_err(|e| e.to_string())?;
    let mat = pb.materials[0].clone();
    let p0 = pb.points.iter().map(|p| p.p_w).fold(0.0, f64::max);
    let phi = pb.points[0].phi;
    let cv = mat.permeability / mat.mu_w / (phi / mat.water_bulk_modulus + 1.0 / mat.oedometric());
    let top = 6.0;
    let dt = pb.config.dt;
    let steps = pb.steps;
    let checks = [steps / 5, steps / 2, steps];
    let mut sim = Simulation::new(pb).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for k in 1..=steps {
        sim.step(dt).map_err(|e| e.to_string())?;
        if checks.contains(&k) {
            let t = sim.state.time;
            let tv = cv * t / (top * top);
            let (mut num, mut den) = (0.0, 0.0);
            for p in sim.points().iter().filter(|p| p.x_ref.z > 0.0 && p.x_ref.z < top) {
                let exact = terzaghi(p0, top - p.x_ref.z, top, tv, 200);
                num += (p.p_w - exact).powi(2);
                den += exact * exact;
            }
            let err = (num / den).sqrt();
            worst = worst.max(err);
            lines.push(format!("T={tv:.3}: {:.2}%", 100.0 * err));
        }
    }
    within(t0.elapsed(), 120)?;
    check(worst < 0.05, format!("L2 error vs 200-term series {} ({:.0} s)", lines.join(", "), t0.elapsed().as_secs_f64()))
}

// 5 ------------------------------------------------------------------------

fn phreatic_interface() -> Outcome {
    let t0 = Instant::now();
    let pb = load_problem(&deck("ex2_phreatic.toml")).map_err(|e| e.to_string())?;
    let dt = pb.config.dt;
    let steps = pb.steps;
    let delta = pb.horizon();
    let mut sim = Simulation::new(pb).map_err(|e| e.to_string())?;
    let m0 = fluid_mass(sim.points(), &sim.problem.materials);
    let normal = Vec3::new(1.0, -1.0, 0.0).normalize();
    let origin = Vec3::new(3.5, 0.0, 0.0);
    let mut front = Vec::new();
    let mut saturated = Vec::new();
    for k in 0..steps {
        let before: Vec<(Vec3, f64)> = sim.points().iter().map(|p| (p.x_cur, p.p_w)).collect();
        sim.step(dt).map_err(|e| e.to_string())?;
        // the step classified its families with the start-of-step pressures
        let flags = &sim.table().ok_or("no families")?.interface;
        let mut ids = Vec::new();
        for (i, (xi, pi)) in before.iter().enumerate() {
            let crosses = before.iter().enumerate().any(|(j, (xj, pj))| j != i && (xj - xi).norm() <= delta && (*pj >= 0.0) != (*pi >= 0.0));
            if crosses != flags[i] {
                return Err(format!("step {k}: point {i} interface flag {} but brute force says {crosses}", flags[i]));
            }
            if crosses {
                ids.push(i);
            }
        }
        if ids.is_empty() {
            return Err(format!("step {k}: interface vanished"));
        }
        let d = ids.iter().map(|&i| (before[i].0 - origin).dot(&normal)).sum::<f64>() / ids.len() as f64;
        front.push(d);
        saturated.push(sim.points().iter().filter(|p| p.p_w >= 0.0).count());
    }
    let m1 = fluid_mass(sim.points(), &sim.problem.materials);
    let drift = (m1 - m0).abs() / m0;
    let monotone = front.windows(2).all(|w| w[1] >= w[0]) && saturated.windows(2).all(|w| w[1] >= w[0]);
    let moved = front.last().unwrap() - front[0];
    within(t0.elapsed(), 300)?;
    check(
        monotone && moved > 0.0 && drift < 0.005,
        format!(
            "interface re-identified over {steps} steps, front moved {moved:.3} m into the unsaturated zone (monotone: {monotone}), saturated points {} -> {}, mass drift {drift:.2e} ({:.0} s)",
            saturated[0],
            saturated.last().unwrap(),
            t0.elapsed().as_secs_f64()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn mode_one_cracking() -> Outcome {
    let t0 = Instant::now();
    let pb = load_problem(&deck("ex3_mode1.toml")).map_err(|e| e.to_string())?;
    let dt = pb.config.dt;
    let steps = pb.steps;
    let delta = pb.horizon();
    let plane = 0.075;
    let near = |p: &MaterialPoint| p.x_ref.x > 0.05 && p.x_ref.x < 0.07 && (p.x_ref.y - plane).abs() < 0.01;
    let mean_near = |pts: &[MaterialPoint]| {
        let v: Vec<f64> = pts.iter().filter(|p| near(p)).map(|p| p.p_w).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut sim = Simulation::new(pb).map_err(|e| e.to_string())?;
    let p_start = mean_near(sim.points());
    let mut load = Vec::new();
    let mut pressure = Vec::new();
    for _ in 0..steps {
        let recs = sim.step(dt).map_err(|e| e.to_string())?;
        load.push(recs.last().unwrap().reactions[0].1[1].abs());
        pressure.push(mean_near(sim.points()));
    }
    let (kp, peak) = load.iter().enumerate().fold((0, 0.0), |acc, (k, &r)| if r > acc.1 { (k, r) } else { acc });
    let tol = 0.01 * peak;
    let rising = load[..=kp].windows(2).all(|w| w[1] >= w[0] - tol);
    let falling = load[kp..].windows(2).all(|w| w[1] <= w[0] + tol);
    let last = *load.last().unwrap();
    let softened = kp + 1 < load.len() && last < 0.75 * peak;
    let off = sim.points().iter().filter(|p| p.damage > 0.1).map(|p| (p.x_ref.y - plane).abs()).fold(0.0, f64::max);
    let p_min = pressure[..=kp].iter().copied().fold(f64::INFINITY, f64::min);
    let p_drop = p_start - p_min;
    within(t0.elapsed(), 600)?;
    let detail = format!(
        "peak {:.3} kN at step {}, final {:.3} kN (single peak: {}), damage > 0.1 up to {:.4} m off-plane (2δ = {:.4}), near-crack pressure {:.0} -> {:.0} Pa ({:.0} s)",
        peak / 1e3,
        kp + 1,
        last / 1e3,
        rising && falling,
        off,
        2.0 * delta,
        p_start,
        p_min,
        t0.elapsed().as_secs_f64()
    );
    check(rising && falling && softened && off <= 2.0 * delta && p_drop > 0.0, detail)
}

// 7 ------------------------------------------------------------------------

/// A ten-point plane problem with a loaded, moving state.
fn ten_points(rng: &mut StdRng) -> Problem {
    let h = 0.1;
    let dim = Dimension::PlaneStrain { thickness: h };
    let mut pts = lattice([5, 2, 1], h, dim);
    for p in pts.iter_mut() {
        p.set_stress(random_stress(rng, 1e4));
        p.p_w = rng.random_range(-2.0e4..-5.0e3);
        p.v = Vec3::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), 0.0);
    }
    let mut mat = soil();
    mat.a1 = 1e-4;
    Problem::bare(dim, h, pts, vec![mat], SolverConfig { dt: 1e-3, ..Default::default() })
}

fn derivative_checks() -> Outcome {
    let mat = soil();
    let mut worst_s = 0.0f64;
    for k in 0..60 {
        let p = -10f64.powf(0.5 + 0.1 * k as f64);
        let s = saturation(1.0, 0.3, p, &mat).map_err(|e| e.to_string())?;
        let h = 1e-5 * p.abs();
        let up = saturation(1.0, 0.3, p + h, &mat).map_err(|e| e.to_string())?.s_r;
        let dn = saturation(1.0, 0.3, p - h, &mat).map_err(|e| e.to_string())?.s_r;
        let fd = (up - dn) / (2.0 * h);
        if s.ds_dp.abs() > 1e-300 {
            worst_s = worst_s.max((s.ds_dp - fd).abs() / s.ds_dp.abs());
        }
    }
    let mut rng = StdRng::seed_from_u64(7);
    let mut worst_polar = 0.0f64;
    for _ in 0..200 {
        let f = Mat3::identity() + Mat3::from_fn(|_, _| rng.random_range(-0.4..0.4));
        if f.determinant() <= 0.1 {
            continue;
        }
        let (r, v) = polar_rotation(&f).map_err(|e| e.to_string())?;
        let e = ((v * r - f).norm() / f.norm()).max((r.transpose() * r - Mat3::identity()).norm());
        worst_polar = worst_polar.max(e);
    }
    let pb = ten_points(&mut rng);
    let sim = Simulation::new(pb).map_err(|e| e.to_string())?;
    let Prepared { geometry, start, .. } = sim.prepare().map_err(|e| e.to_string())?;
    let pts = sim.points();
    let d = DeformationSystem::new(&sim.problem, &geometry, pts, &start, 1e-3, 1e-3);
    let x: Vec<f64> = (0..d.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut worst_j = jacobian_mismatch(&d, &x, &mut rng)?;
    let trial = d.trial(&d.kinematics(&x), false).map_err(|e| e.to_string())?;
    let f = FlowSystem::new(&sim.problem, &geometry, pts, &trial, 1e-3, 1e-3);
    let xf: Vec<f64> = f.predictor().iter().map(|r| r + rng.random_range(-1e3..1e3)).collect();
    worst_j = worst_j.max(jacobian_mismatch(&f, &xf, &mut rng)?);
    check(
        worst_s < 1e-6 && worst_polar < 1e-12 && worst_j < 1e-6,
        format!("dS/dp vs central differences {worst_s:.1e}; polar round trip {worst_polar:.1e}; dense Jacobian vs tangent {worst_j:.1e} on 10 points"),
    )
}

fn jacobian_mismatch<P: NonlinearProblem>(p: &P, x: &[f64], rng: &mut StdRng) -> Result<f64, String> {
    let r = p.residual(x).map_err(|e| e.to_string())?;
    let jac = dense_jacobian(p, x, &r).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let v: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let jv = &jac * DVector::from_column_slice(&v);
        let t = tangent_apply(p, x, &r, &v).map_err(|e| e.to_string())?;
        let diff: f64 = jv.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / jv.norm());
    }
    Ok(worst)
}

// 8 ------------------------------------------------------------------------

/// Residuals of the 27-point cube written as plain double loops.
struct Naive {
    motion: Vec<Vec3>,
    mass: Vec<f64>,
}

fn naive_residuals(pb: &Problem, pts: &[MaterialPoint], trial: &[TrialPoint], p: &[f64], rate: &[f64], storage: &[f64], k_r: &[f64]) -> Naive {
    use std::f64::consts::PI;
    let n = pts.len();
    let delta = pb.horizon();
    let mat = &pb.materials[0];
    let x: Vec<Vec3> = pts.iter().map(|q| q.x_cur).collect();
    let vol: Vec<f64> = pts.iter().map(|q| q.volume).collect();
    let near = |i: usize, j: usize| j != i && (x[j] - x[i]).norm() <= delta;
    let v_h = 4.0 / 3.0 * PI * delta.powi(3);
    let mut k_inv = vec![Mat3::zeros(); n];
    let mut grad_u = vec![Mat3::zeros(); n];
    let mut grad_p = vec![Vec3::zeros(); n];
    let mut omega0 = vec![0.0; n];
    for i in 0..n {
        let mut k = Mat3::zeros();
        for j in 0..n {
            if near(i, j) {
                let z = x[j] - x[i];
                k += z * z.transpose() * vol[j];
                omega0[i] += vol[j];
            }
        }
        k_inv[i] = k.try_inverse().unwrap();
        let mut mu = Mat3::zeros();
        let mut mp = Vec3::zeros();
        for j in 0..n {
            if near(i, j) {
                let z = x[j] - x[i];
                mu += (trial[j].du - trial[i].du) * z.transpose() * vol[j];
                mp += z * ((p[j] - p[i]) * vol[j]);
            }
        }
        grad_u[i] = mu * k_inv[i];
        grad_p[i] = k_inv[i] * mp;
    }
    let c = 18.0 * mat.bulk_modulus / (PI * delta.powi(4));
    let force = |i: usize, j: usize| -> Vec3 {
        let z = x[j] - x[i];
        let beta = mat.stabilization * c * v_h / (delta * omega0[i]);
        let rs = (trial[j].du - trial[i].du) - grad_u[i] * z;
        trial[i].sigma * (k_inv[i] * z) + rs * beta - (k_inv[i] * z) * (trial[i].ret.s_r * trial[i].p)
    };
    let flux = |i: usize, j: usize| -> f64 {
        let z = x[j] - x[i];
        let kr = k_r[i];
        let kp = 6.0 * kr * mat.permeability / (mat.mu_w * PI * delta.powi(4));
        let lambda = mat.stabilization * kp * v_h / (delta * omega0[i]);
        let q = -grad_p[i] * (kr * mat.permeability / mat.mu_w);
        let rw = (p[j] - p[i]) - grad_p[i].dot(&z);
        mat.rho_w * (q.dot(&(k_inv[i] * z)) - lambda * rw)
    };
    let mut motion = vec![Vec3::zeros(); n];
    let mut mass = vec![0.0; n];
    for i in 0..n {
        let mut f = Vec3::zeros();
        let mut div = 0.0;
        for j in 0..n {
            if near(i, j) {
                f += (force(i, j) - force(j, i)) * vol[j];
                div += (flux(i, j) - flux(j, i)) * vol[j];
            }
        }
        f *= vol[i];
        motion[i] = trial[i].kin.a * trial[i].mass - f;
        let t = &trial[i];
        mass[i] = (mat.rho_w * (storage[i] * rate[i] + saturation(t.j, pts[i].phi_ref, p[i], mat).unwrap().s_r * t.trl) + div) * t.volume;
    }
    Naive { motion, mass }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = StdRng::seed_from_u64(8);
    let h = 0.1;
    let mut pts = lattice([3, 3, 3], h, Dimension::Three);
    for p in pts.iter_mut() {
        p.set_stress(random_stress(&mut rng, 2e4));
        p.p_w = rng.random_range(-2.0e4..-1.0e4);
        p.v = Vec3::from_fn(|_, _| rng.random_range(-1e-3..1e-3));
    }
    let pb = Problem::bare(Dimension::Three, h, pts, vec![soil()], SolverConfig { dt: 1e-3, ..Default::default() });
    let sim = Simulation::new(pb).map_err(|e| e.to_string())?;
    let Prepared { geometry, start, .. } = sim.prepare().map_err(|e| e.to_string())?;
    let pts = sim.points();
    let d = DeformationSystem::new(&sim.problem, &geometry, pts, &start, 1e-3, 1e-3);
    let x: Vec<f64> = (0..d.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let trial = d.trial(&d.kinematics(&x), false).map_err(|e| e.to_string())?;
    let motion = d.point_residuals(&trial);
    let f = FlowSystem::new(&sim.problem, &geometry, pts, &trial, 1e-3, 1e-3);
    let xf: Vec<f64> = f.predictor().iter().map(|r| r + rng.random_range(-1e3..1e3)).collect();
    let e = f.evaluate(&xf).map_err(|e| e.to_string())?;
    let mass = f.point_residuals(&e);
    let k_r: Vec<f64> = e.ret.iter().map(|r| r.k_r).collect();
    let naive = naive_residuals(&sim.problem, pts, &trial, &e.p, &e.rate, &e.storage, &k_r);
    let dm = motion.iter().zip(&naive.motion).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / max_norm(naive.motion.iter());
    let mscale = naive.mass.iter().map(|m| m.abs()).fold(0.0, f64::max);
    let dq = mass.iter().zip(&naive.mass).map(|(a, b)| (a[0] - b).abs()).fold(0.0, f64::max) / mscale;
    check(
        dm < 1e-14 && dq < 1e-14,
        format!("27-point cube vs double loop: motion {dm:.1e} of {:.2e} N, mass {dq:.1e} of {mscale:.2e} kg/s", max_norm(naive.motion.iter())),
    )
}

// 9 ------------------------------------------------------------------------

fn residuals_with(pb: &Problem, x_seed: u64) -> Result<(Vec<Vec3>, Vec<f64>), String> {
    let sim = Simulation::new(pb.clone()).map_err(|e| e.to_string())?;
    let Prepared { geometry, start, .. } = sim.prepare().map_err(|e| e.to_string())?;
    let pts = sim.points();
    let mut rng = StdRng::seed_from_u64(x_seed);
    let dt = pb.config.dt;
    let d = DeformationSystem::new(&sim.problem, &geometry, pts, &start, dt, dt);
    let x: Vec<f64> = (0..d.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let trial = d.trial(&d.kinematics(&x), false).map_err(|e| e.to_string())?;
    let motion = d.point_residuals(&trial);
    let f = FlowSystem::new(&sim.problem, &geometry, pts, &trial, dt, dt);
    let xf: Vec<f64> = f.predictor().iter().map(|r| r * rng.random_range(0.5..1.5)).collect();
    let e = f.evaluate(&xf).map_err(|e| e.to_string())?;
    Ok((motion, f.point_residuals(&e).iter().map(|m| m[0]).collect()))
}

fn interface_identity() -> Outcome {
    let mut rng = StdRng::seed_from_u64(9);
    let mut cases: Vec<(String, Problem)> = Vec::new();
    let mut pb = ten_points(&mut rng);
    pb.title = "ten-point plane".into();
    cases.push(("ten-point plane".into(), pb));
    let h = 0.1;
    let mut pts = lattice([6, 6, 6], h, Dimension::Three);
    for p in pts.iter_mut() {
        p.set_stress(random_stress(&mut rng, 2e4));
        p.p_w = rng.random_range(1.0e3..3.0e4);
    }
    cases.push(("saturated cube".into(), Problem::bare(Dimension::Three, h, pts, vec![soil()], SolverConfig { dt: 1e-3, ..Default::default() })));
    cases.push(("ex1 column deck".into(), load_problem(&deck("ex1_column.toml")).map_err(|e| e.to_string())?));
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for (name, pb) in cases {
        let (m0, q0) = residuals_with(&pb, 90)?;
        let mut split = pb.clone();
        split.config.interface_mode = InterfaceMode::ForceSplit;
        let (m1, q1) = residuals_with(&split, 90)?;
        let dm = m0.iter().zip(&m1).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / max_norm(m0.iter()).max(f64::MIN_POSITIVE);
        let qs = q0.iter().map(|q| q.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let dq = q0.iter().zip(&q1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / qs;
        worst = worst.max(dm).max(dq);
        lines.push(format!("{name}: {dm:.1e}/{dq:.1e}"));
    }
    check(worst < 1e-14, format!("forced split vs bulk path (motion/mass) {}", lines.join(", ")))
}

// --------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|c| c.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "consistency patch test", patch_test),
        (2, "affine and linear reproduction", affine_reproduction),
        (3, "zero-energy mode and its cure", zero_energy_mode),
        (4, "saturated consolidation", consolidation),
        (5, "phreatic interface evolution", phreatic_interface),
        (6, "mode-I cracking", mode_one_cracking),
        (7, "derivative and decomposition checks", derivative_checks),
        (8, "oracle equivalence", oracle_equivalence),
        (9, "interface specialization identity", interface_identity),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        match run() {
            Ok(d) => println!("PASS criterion {id} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
