//! Newton iteration with finite-difference tangents.
//!
//! Small systems get a dense difference Jacobian and an LU solve. Larger
//! ones use restarted GMRES on the Jacobian-free directional derivative,
//! preconditioned either by a diagonal or by a sparse LU of a colored
//! difference Jacobian that is reused across iterations and steps.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, Stage};
use crate::model::{LinearSolverConfig, LinearSolverKind, Preconditioner};

/// Relative perturbation for difference quotients.
pub const FD_EPS: f64 = 1e-7;

/// Structure of the Jacobian: `rows[c]` are the residual entries that can
/// depend on unknown `c`, and every color holds columns with disjoint rows.
#[derive(Debug, Clone, Default)]
pub struct Coloring {
    pub colors: Vec<Vec<usize>>,
    pub rows: Vec<Vec<usize>>,
}

/// A square nonlinear system r(x) = 0.
pub trait NonlinearProblem: Sync {
    fn dim(&self) -> usize;
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Cheap approximation of the Jacobian diagonal.
    fn jacobi_diagonal(&self, x: &[f64]) -> Vec<f64>;
    fn coloring(&self) -> &Coloring;
    /// Typical magnitude of an unknown; sets the difference step near zero.
    fn typical_scale(&self) -> f64;
    fn stage(&self) -> Stage;
    /// Magnitude of the terms summed into the residual; its roundoff bounds
    /// how far the residual can be driven down.
    fn roundoff_scale(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

/// Relative roundoff level of an assembled residual.
pub const ROUNDOFF: f64 = 1e-13;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// J(x)·v by a forward difference along v.
pub fn tangent_apply<P: NonlinearProblem + ?Sized>(p: &P, x: &[f64], r: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let nv = norm(v);
    if nv == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let scale = norm(x).max(p.typical_scale() * (x.len() as f64).sqrt());
    let h = FD_EPS * scale / nv;
    if !(h.is_finite()) || h * nv < f64::MIN_POSITIVE * 1e10 {
        return Err(Error::PerturbationUnderflow);
    }
    let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let rp = p.residual(&xp)?;
    Ok(rp.iter().zip(r).map(|(a, b)| (a - b) / h).collect())
}

fn column_step<P: NonlinearProblem + ?Sized>(p: &P, x: &[f64], c: usize) -> f64 {
    FD_EPS * x[c].abs().max(p.typical_scale())
}

/// Full Jacobian by forward differences, one residual per column.
pub fn dense_jacobian<P: NonlinearProblem + ?Sized>(p: &P, x: &[f64], r: &[f64]) -> Result<DMatrix<f64>> {
    let n = p.dim();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for c in 0..n {
        let h = column_step(p, x, c);
        xp[c] = x[c] + h;
        let rp = p.residual(&xp)?;
        xp[c] = x[c];
        for row in 0..n {
            jac[(row, c)] = (rp[row] - r[row]) / h;
        }
    }
    Ok(jac)
}

/// Sparse Jacobian triplets from one residual per color.
pub fn colored_jacobian<P: NonlinearProblem + ?Sized>(p: &P, x: &[f64], r: &[f64]) -> Result<Vec<Triplet<usize, usize, f64>>> {
    let col = p.coloring();
    let mut out = Vec::new();
    let mut xp = x.to_vec();
    for group in &col.colors {
        let steps: Vec<f64> = group.iter().map(|&c| column_step(p, x, c)).collect();
        for (&c, &h) in group.iter().zip(&steps) {
            xp[c] = x[c] + h;
        }
        let rp = p.residual(&xp)?;
        for (&c, &h) in group.iter().zip(&steps) {
            xp[c] = x[c];
            for &row in &col.rows[c] {
                let v = (rp[row] - r[row]) / h;
                if v != 0.0 {
                    out.push(Triplet::new(row, c, v));
                }
            }
        }
    }
    Ok(out)
}

/// Dense Jacobian, assembled from the colored columns when a coloring is
/// available.
fn assembled_jacobian<P: NonlinearProblem + ?Sized>(p: &P, x: &[f64], r: &[f64]) -> Result<DMatrix<f64>> {
    let n = p.dim();
    let col = p.coloring();
    if col.colors.iter().map(Vec::len).sum::<usize>() != n || col.rows.len() != n {
        return dense_jacobian(p, x, r);
    }
    let mut jac = DMatrix::zeros(n, n);
    for t in colored_jacobian(p, x, r)? {
        jac[(t.row, t.col)] = t.val;
    }
    Ok(jac)
}

/// Greedy coloring given, for every column, the columns it conflicts with.
pub fn greedy_coloring(conflicts: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = conflicts.len();
    let mut color = vec![usize::MAX; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut taken = Vec::new();
    for c in 0..n {
        taken.clear();
        for &o in &conflicts[c] {
            if color[o] != usize::MAX {
                taken.push(color[o]);
            }
        }
        taken.sort_unstable();
        taken.dedup();
        let mut k = 0;
        for &t in &taken {
            if t == k {
                k += 1;
            } else if t > k {
                break;
            }
        }
        color[c] = k;
        if k == groups.len() {
            groups.push(Vec::new());
        }
        groups[k].push(c);
    }
    groups
}

/// Outcome of one GMRES solve.
#[derive(Debug, Clone)]
pub struct GmresOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Restarted, right-preconditioned GMRES with modified Gram-Schmidt and
/// Givens rotations. Stops when ‖b − A x‖ ≤ `tol`.
pub fn gmres(
    apply: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    precond: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    restart: usize,
    max_iterations: usize,
    tol: f64,
) -> Result<GmresOutcome> {
    let n = b.len();
    let m = restart.max(1).min(n.max(1));
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut beta = norm(&r);
    let mut total = 0;
    if beta <= tol {
        return Ok(GmresOutcome { x, iterations: 0, residual: beta, converged: true });
    }
    while total < max_iterations {
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|a| a / beta).collect()];
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_done = 0;
        let mut res = beta;
        for k in 0..m {
            let zk = precond(&v[k]);
            let mut w = apply(&zk)?;
            z.push(zk);
            total += 1;
            for i in 0..=k {
                let hik = dot(&w, &v[i]);
                h[i][k] = hik;
                for (wj, vj) in w.iter_mut().zip(&v[i]) {
                    *wj -= hik * vj;
                }
            }
            let hn = norm(&w);
            h[k + 1][k] = hn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let d = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if d == 0.0 {
                k_done = k;
                break;
            }
            cs[k] = h[k][k] / d;
            sn[k] = h[k + 1][k] / d;
            h[k][k] = d;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            res = g[k + 1].abs();
            k_done = k + 1;
            if res <= tol || total >= max_iterations || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|a| a / hn).collect());
        }
        // back substitution on the triangular Hessenberg block
        let mut y = vec![0.0; k_done];
        for i in (0..k_done).rev() {
            let mut s = g[i];
            for j in i + 1..k_done {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for (xi, zi) in x.iter_mut().zip(&z[j]) {
                *xi += yj * zi;
            }
        }
        if res <= tol || total >= max_iterations || k_done == 0 {
            return Ok(GmresOutcome { x, iterations: total, residual: res, converged: res <= tol });
        }
        let ax = apply(&x)?;
        r = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
        beta = norm(&r);
        if beta <= tol {
            return Ok(GmresOutcome { x, iterations: total, residual: beta, converged: true });
        }
    }
    Ok(GmresOutcome { x, iterations: total, residual: beta, converged: false })
}

enum Factor {
    None,
    Jacobi(Vec<f64>),
    Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
}

/// Preconditioner kept across Newton iterations and steps of one stage.
pub struct PreconditionerCache {
    factor: Factor,
    dim: usize,
    age: usize,
    pub refreshes: usize,
}

impl Default for PreconditionerCache {
    fn default() -> Self {
        PreconditionerCache { factor: Factor::None, dim: 0, age: 0, refreshes: 0 }
    }
}

impl PreconditionerCache {
    pub fn invalidate(&mut self) {
        self.factor = Factor::None;
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        match &self.factor {
            Factor::None => v.to_vec(),
            Factor::Jacobi(d) => v.iter().zip(d).map(|(a, b)| a / b).collect(),
            Factor::Lu(lu) => {
                let mut rhs = faer::Mat::<f64>::from_fn(v.len(), 1, |i, _| v[i]);
                lu.solve_in_place(rhs.as_mut());
                (0..v.len()).map(|i| rhs[(i, 0)]).collect()
            }
        }
    }

    fn refresh<P: NonlinearProblem + ?Sized>(&mut self, p: &P, x: &[f64], r: &[f64], kind: Preconditioner) -> Result<()> {
        self.refreshes += 1;
        self.age = 0;
        self.dim = p.dim();
        self.factor = match kind {
            Preconditioner::None => Factor::None,
            Preconditioner::Jacobi => {
                let d = p.jacobi_diagonal(x);
                Factor::Jacobi(d.into_iter().map(|v| if v.abs() > 0.0 && v.is_finite() { v } else { 1.0 }).collect())
            }
            Preconditioner::SparseLu => {
                let trip = colored_jacobian(p, x, r)?;
                let n = p.dim();
                let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
                    .map_err(|e| Error::SingularTangent(format!("{e:?}")))?;
                let lu = mat.sp_lu().map_err(|e| Error::SingularTangent(format!("{e:?}")))?;
                Factor::Lu(lu)
            }
        };
        Ok(())
    }
}

/// Newton settings for one stage.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    pub tol: f64,
    pub abs_floor: f64,
    pub max_iterations: usize,
}

/// Converged Newton solve.
#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    /// Residual checks performed, the initial one included.
    pub iterations: usize,
    pub history: Vec<f64>,
    pub linear_iterations: usize,
}

fn lu_solve(jac: DMatrix<f64>, r: &[f64]) -> Result<Vec<f64>> {
    let lu = jac.lu();
    let rhs = DVector::from_column_slice(r);
    lu.solve(&rhs).map(|d| d.iter().copied().collect()).ok_or_else(|| Error::SingularTangent("dense LU failed".into()))
}

/// Solves r(x) = 0 from `x0`, converged when ‖r‖ ≤ tol · max(‖r⁰‖, floor).
pub fn newton<P: NonlinearProblem + ?Sized>(
    p: &P,
    x0: Vec<f64>,
    settings: NewtonSettings,
    lin: &LinearSolverConfig,
    cache: &mut PreconditionerCache,
) -> Result<NewtonOutcome> {
    let n = p.dim();
    let mut x = x0;
    let mut r = p.residual(&x)?;
    let r0 = norm(&r);
    let target = (settings.tol * r0.max(settings.abs_floor)).max(ROUNDOFF * p.roundoff_scale(&x));
    let mut history = vec![r0];
    let mut linear_iterations = 0;
    if n == 0 || r0 <= target {
        return Ok(NewtonOutcome { x, iterations: 1, history, linear_iterations });
    }
    let dense = match lin.kind {
        LinearSolverKind::Dense => true,
        LinearSolverKind::Krylov => false,
        LinearSolverKind::Auto => n <= lin.dense_threshold,
    };
    if cache.dim != n {
        cache.invalidate();
    }
    for k in 0..settings.max_iterations {
        let neg: Vec<f64> = r.iter().map(|a| -a).collect();
        let dx = if dense {
            lu_solve(assembled_jacobian(p, &x, &r)?, &neg)?
        } else {
            if matches!(cache.factor, Factor::None) && lin.preconditioner != Preconditioner::None || cache.age >= lin.refresh_iterations {
                cache.refresh(p, &x, &r, lin.preconditioner)?;
            }
            let mut apply = |v: &[f64]| tangent_apply(p, &x, &r, v);
            let tol = (1e-3 * settings.tol).max(1e-14) * norm(&r);
            let mut out = gmres(&mut apply, &|v| cache.apply(v), &neg, lin.restart, lin.max_iterations, tol)?;
            // a stale factor that no longer helps is rebuilt once
            if !out.converged && cache.age > 0 {
                cache.refresh(p, &x, &r, lin.preconditioner)?;
                let mut apply = |v: &[f64]| tangent_apply(p, &x, &r, v);
                let again = gmres(&mut apply, &|v| cache.apply(v), &neg, lin.restart, lin.max_iterations, tol)?;
                linear_iterations += out.iterations;
                out = again;
            }
            linear_iterations += out.iterations;
            cache.age += 1;
            out.x
        };
        // backtrack while the residual grows
        let mut lambda = 1.0;
        let rn = norm(&r);
        let mut accepted = None;
        for _ in 0..6 {
            let xt: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + lambda * d).collect();
            match p.residual(&xt) {
                Ok(rt) => {
                    let nt = norm(&rt);
                    if nt.is_finite() && (nt < rn || lambda < 0.05) {
                        accepted = Some((xt, rt));
                        break;
                    }
                }
                Err(e) if e.is_step_rejection() && lambda > 0.05 => {}
                Err(e) => return Err(e),
            }
            lambda *= 0.5;
        }
        let Some((xt, rt)) = accepted else {
            return Err(Error::NonConvergence { stage: p.stage(), iterations: k + 1, history });
        };
        x = xt;
        r = rt;
        let nr = norm(&r);
        history.push(nr);
        if nr <= target {
            return Ok(NewtonOutcome { x, iterations: k + 2, history, linear_iterations });
        }
    }
    Err(Error::NonConvergence { stage: p.stage(), iterations: settings.max_iterations, history })
}
