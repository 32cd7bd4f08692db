//! Dense strictly convex QP with linear inequality constraints.
//!
//! [`ActiveSetSolver`] implements the Goldfarb–Idnani dual active-set method:
//! it starts from the unconstrained minimizer and adds the most violated
//! constraint at each outer iteration, dropping constraints whose multipliers
//! would turn negative. Infeasibility falls out of the dual step directly
//! (the added constraint is linearly dependent on the active ones and no
//! multiplier can be released). [`oracle_qp`] enumerates active sets and is
//! meant for testing only.

use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Lu, Matrix};

/// minimize `½ zᵀHz + gᵀz` subject to `A z ≤ b`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: Matrix,
    pub g: Vec<f64>,
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl QpProblem {
    pub fn new(h: Matrix, g: Vec<f64>, a: Matrix, b: Vec<f64>) -> Result<Self> {
        let p = Self { h, g, a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.g.len();
        if self.h.rows() != n || self.h.cols() != n {
            return Err(Error::DimensionMismatch {
                context: "QpProblem hessian",
                expected: n,
                found: self.h.rows(),
            });
        }
        if self.a.rows() != self.b.len() {
            return Err(Error::DimensionMismatch {
                context: "QpProblem rows",
                expected: self.a.rows(),
                found: self.b.len(),
            });
        }
        if self.a.rows() > 0 && self.a.cols() != n {
            return Err(Error::DimensionMismatch {
                context: "QpProblem columns",
                expected: n,
                found: self.a.cols(),
            });
        }
        if !self.h.is_finite()
            || !self.a.is_finite()
            || self.g.iter().chain(&self.b).any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("QpProblem"));
        }
        if self.h.sub(&self.h.transpose()).max_abs() > 1e-10 * (1.0 + self.h.max_abs()) {
            return Err(Error::InvalidArgument("QP hessian is not symmetric".into()));
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        0.5 * dot(z, &self.h.mul_vec(z)) + dot(&self.g, z)
    }

    /// `max_i (a_iᵀz − b_i)`, or `-∞` without constraints.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        (0..self.m())
            .map(|i| dot(self.a.row(i), z) - self.b[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `‖Hz + g + Aᵀλ‖∞` over the rows in `active`.
    pub fn stationarity(&self, z: &[f64], active: &[usize], lambda: &[f64]) -> f64 {
        let mut r = self.h.mul_vec(z);
        for (ri, gi) in r.iter_mut().zip(&self.g) {
            *ri += gi;
        }
        for (&i, &l) in active.iter().zip(lambda) {
            for (rj, aij) in r.iter_mut().zip(self.a.row(i)) {
                *rj += l * aij;
            }
        }
        r.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub z: Vec<f64>,
    /// Active rows in ascending order.
    pub active_set: Vec<usize>,
    /// Multipliers aligned with `active_set`.
    pub multipliers: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QpOutcome {
    Optimal(QpSolution),
    Infeasible { iterations: usize },
}

impl QpOutcome {
    pub fn is_optimal(&self) -> bool {
        matches!(self, QpOutcome::Optimal(_))
    }

    pub fn solution(&self) -> Option<&QpSolution> {
        match self {
            QpOutcome::Optimal(s) => Some(s),
            QpOutcome::Infeasible { .. } => None,
        }
    }
}

/// Reusable solver. The Cholesky factor of the last Hessian is kept, so
/// repeated solves with the same cost skip the factorization.
#[derive(Clone, Debug, Default)]
pub struct ActiveSetSolver {
    max_iterations: Option<usize>,
    cached: Option<(Matrix, Cholesky)>,
}

impl ActiveSetSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Overrides the default limit of `50·(m + 1)` iterations.
    pub fn with_max_iterations(mut self, limit: usize) -> Self {
        self.max_iterations = Some(limit);
        self
    }

    fn factor(&mut self, h: &Matrix) -> Result<&Cholesky> {
        let stale = !matches!(&self.cached, Some((cached, _)) if cached == h);
        if stale {
            let chol = Cholesky::new(h).map_err(|e| match e {
                Error::SingularMatrix => {
                    Error::InvalidArgument("QP hessian is not positive definite".into())
                }
                other => other,
            })?;
            self.cached = Some((h.clone(), chol));
        }
        Ok(&self.cached.as_ref().expect("factor cached above").1)
    }

    pub fn solve(&mut self, p: &QpProblem) -> Result<QpOutcome> {
        p.validate()?;
        let limit = self.max_iterations.unwrap_or(50 * (p.m() + 1));
        let chol = self.factor(&p.h)?.clone();
        dual_active_set(p, &chol, limit)
    }
}

pub fn solve_qp(p: &QpProblem) -> Result<QpOutcome> {
    ActiveSetSolver::new().solve(p)
}

fn violation_tol(b: f64) -> f64 {
    1e-10 * (1.0 + b.abs())
}

fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Thin QR of the columns by Gram–Schmidt with one re-orthogonalization pass.
/// Returns the orthonormal columns and the upper-triangular factor by rows.
fn thin_qr(cols: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let q_len = cols.len();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(q_len);
    let mut r = vec![vec![0.0; q_len]; q_len];
    for (j, col) in cols.iter().enumerate() {
        let mut v = col.clone();
        for _ in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let c = dot(qi, &v);
                r[i][j] += c;
                for (vk, qk) in v.iter_mut().zip(qi) {
                    *vk -= c * qk;
                }
            }
        }
        let nv = norm2(&v);
        r[j][j] = nv;
        q.push(v.into_iter().map(|x| x / nv).collect());
    }
    (q, r)
}

/// Projects `z` onto the active rows with the smallest H-norm correction.
/// Large unconstrained minimizers leave the active rows off by rounding;
/// two passes bring them back to machine precision.
fn polish(p: &QpProblem, chol: &Cholesky, active: &[usize], z: &mut [f64]) {
    if active.is_empty() {
        return;
    }
    let cols: Vec<Vec<f64>> = active
        .iter()
        .map(|&i| chol.solve_lower(&p.a.row(i).iter().map(|v| -v).collect::<Vec<_>>()))
        .collect();
    let (q, r) = thin_qr(&cols);
    if r.iter().enumerate().any(|(j, row)| !(row[j].abs() > 0.0)) {
        return;
    }
    for _ in 0..2 {
        let resid: Vec<f64> = active.iter().map(|&i| dot(p.a.row(i), z) - p.b[i]).collect();
        let k = q.len();
        let mut y = vec![0.0; k];
        for j in 0..k {
            let s: f64 = (0..j).map(|i| r[i][j] * y[i]).sum();
            y[j] = (resid[j] - s) / r[j][j];
        }
        let mut w = vec![0.0; z.len()];
        for (qj, yj) in q.iter().zip(&y) {
            for (wk, qk) in w.iter_mut().zip(qj) {
                *wk += yj * qk;
            }
        }
        for (zk, dk) in z.iter_mut().zip(chol.solve_upper(&w)) {
            *zk += dk;
        }
    }
}

fn dual_active_set(p: &QpProblem, chol: &Cholesky, limit: usize) -> Result<QpOutcome> {
    let n = p.n();
    let m = p.m();
    let neg_g: Vec<f64> = p.g.iter().map(|v| -v).collect();
    let mut z = chol.solve(&neg_g);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut iterations = 0usize;
    // Internally each row reads n_iᵀz ≥ −b_i with n_i = −a_i.
    let normal = |i: usize| -> Vec<f64> { p.a.row(i).iter().map(|v| -v).collect() };
    let slack = |i: usize, z: &[f64]| p.b[i] - dot(p.a.row(i), z);

    loop {
        polish(p, chol, &active, &mut z);
        let mut entering: Option<(usize, f64)> = None;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let s = slack(i, &z);
            if s < -violation_tol(p.b[i]) && entering.is_none_or(|(_, w)| s < w) {
                entering = Some((i, s));
            }
        }
        let Some((pc, _)) = entering else {
            let mut pairs: Vec<(usize, f64)> = active.iter().copied().zip(u.iter().copied()).collect();
            pairs.sort_by_key(|&(i, _)| i);
            let objective = p.objective(&z);
            return Ok(QpOutcome::Optimal(QpSolution {
                z,
                active_set: pairs.iter().map(|&(i, _)| i).collect(),
                multipliers: pairs.iter().map(|&(_, l)| l).collect(),
                objective,
                iterations,
            }));
        };
        let np = normal(pc);
        let d = chol.solve_lower(&np);
        let d_norm = norm2(&d);
        let mut u_plus = 0.0;

        loop {
            iterations += 1;
            if iterations > limit {
                return Err(Error::MaxIterations(limit));
            }
            let cols: Vec<Vec<f64>> = active.iter().map(|&i| chol.solve_lower(&normal(i))).collect();
            let (q, r) = thin_qr(&cols);
            let coeffs: Vec<f64> = q.iter().map(|qi| dot(qi, &d)).collect();
            let mut resid = d.clone();
            for (qi, c) in q.iter().zip(&coeffs) {
                for (rk, qk) in resid.iter_mut().zip(qi) {
                    *rk -= c * qk;
                }
            }
            let qn = q.len();
            let mut dual_dir = vec![0.0; qn];
            for i in (0..qn).rev() {
                let s: f64 = (i + 1..qn).map(|k| r[i][k] * dual_dir[k]).sum();
                dual_dir[i] = (coeffs[i] - s) / r[i][i];
            }
            let resid_norm = norm2(&resid);
            let primal_zero = resid_norm <= 1e-12 * d_norm.max(f64::MIN_POSITIVE);
            let dz = if primal_zero { vec![0.0; n] } else { chol.solve_upper(&resid) };

            let mut t1 = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (j, (&rj, &uj)) in dual_dir.iter().zip(&u).enumerate() {
                if rj > 0.0 {
                    let ratio = uj / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(j);
                    }
                }
            }
            let t2 = if primal_zero {
                f64::INFINITY
            } else {
                (-slack(pc, &z)).max(0.0) / (resid_norm * resid_norm)
            };

            if primal_zero && drop.is_none() {
                return Ok(QpOutcome::Infeasible { iterations });
            }
            let t = t1.min(t2);
            if !primal_zero {
                for (zk, dk) in z.iter_mut().zip(&dz) {
                    *zk += t * dk;
                }
            }
            for (uj, rj) in u.iter_mut().zip(&dual_dir) {
                *uj -= t * rj;
            }
            u_plus += t;
            if t2 <= t1 {
                active.push(pc);
                u.push(u_plus);
                break;
            }
            let k = drop.expect("partial step implies a blocking multiplier");
            active.remove(k);
            u.remove(k);
        }
    }
}

/// Largest constraint count accepted by [`oracle_qp`].
pub const ORACLE_LIMIT: usize = 12;

/// Brute-force solve by enumerating every candidate active set and solving
/// its KKT system.
pub fn oracle_qp(p: &QpProblem) -> Result<QpOutcome> {
    p.validate()?;
    let n = p.n();
    let m = p.m();
    if m > ORACLE_LIMIT {
        return Err(Error::TooLarge {
            limit: ORACLE_LIMIT,
            found: m,
        });
    }
    let mut best: Option<QpSolution> = None;
    for mask in 0u32..(1u32 << m) {
        let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        // More rows than unknowns are always linearly dependent.
        if set.len() > n {
            continue;
        }
        let q = set.len();
        let mut kkt = Matrix::zeros(n + q, n + q);
        kkt.set_block(0, 0, &p.h);
        let mut rhs: Vec<f64> = p.g.iter().map(|v| -v).collect();
        for (k, &i) in set.iter().enumerate() {
            for (j, &aij) in p.a.row(i).iter().enumerate() {
                kkt[(j, n + k)] = aij;
                kkt[(n + k, j)] = aij;
            }
            rhs.push(p.b[i]);
        }
        let Ok(lu) = Lu::new(&kkt) else { continue };
        let sol = lu.solve(&rhs);
        let (z, lambda) = sol.split_at(n);
        if lambda.iter().any(|&l| l < -1e-10) {
            continue;
        }
        if (0..m).any(|i| dot(p.a.row(i), z) - p.b[i] > 1e-9 * (1.0 + p.b[i].abs())) {
            continue;
        }
        let objective = p.objective(z);
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(QpSolution {
                z: z.to_vec(),
                active_set: set.clone(),
                multipliers: lambda.to_vec(),
                objective,
                iterations: 0,
            });
        }
    }
    Ok(match best {
        Some(s) => QpOutcome::Optimal(s),
        None => QpOutcome::Infeasible { iterations: 0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_clamp() -> QpProblem {
        // (z − 1)² = z² − 2z + 1
        QpProblem::new(
            Matrix::from_diag(&[2.0]),
            vec![-2.0],
            Matrix::from_rows(&[[1.0]]),
            vec![0.5],
        )
        .unwrap()
    }

    fn two_d() -> QpProblem {
        QpProblem::new(
            Matrix::from_diag(&[2.0, 2.0]),
            vec![-4.0, 0.0],
            Matrix::from_rows(&[[1.0, 1.0], [0.0, -1.0]]),
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    fn contradictory() -> QpProblem {
        QpProblem::new(
            Matrix::from_diag(&[1.0]),
            vec![0.0],
            Matrix::from_rows(&[[1.0], [-1.0]]),
            vec![0.0, -1.0],
        )
        .unwrap()
    }

    #[test]
    fn scalar_clamp_example() {
        for out in [solve_qp(&scalar_clamp()).unwrap(), oracle_qp(&scalar_clamp()).unwrap()] {
            let s = out.solution().unwrap();
            assert_abs_diff_eq!(s.z[0], 0.5, epsilon = 1e-12);
            assert_eq!(s.active_set, vec![0]);
        }
    }

    #[test]
    fn two_dimensional_example() {
        let p = two_d();
        let s = solve_qp(&p).unwrap().solution().unwrap().clone();
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.z[1], 0.0, epsilon = 1e-12);
        assert!(p.stationarity(&s.z, &s.active_set, &s.multipliers) <= 1e-8);
        assert!(s.multipliers.iter().all(|&l| l >= -1e-10));
        let o = oracle_qp(&p).unwrap().solution().unwrap().clone();
        assert!((o.z[0] - s.z[0]).abs() + (o.z[1] - s.z[1]).abs() <= 1e-7);
    }

    #[test]
    fn contradictory_bounds_infeasible() {
        assert!(!solve_qp(&contradictory()).unwrap().is_optimal());
        assert!(!oracle_qp(&contradictory()).unwrap().is_optimal());
    }

    #[test]
    fn unconstrained_and_inactive() {
        let p = QpProblem::new(Matrix::identity(2), vec![1.0, -1.0], Matrix::zeros(0, 2), vec![])
            .unwrap();
        let s = solve_qp(&p).unwrap().solution().unwrap().clone();
        assert_eq!(s.z, vec![-1.0, 1.0]);
        assert!(s.active_set.is_empty());
    }

    #[test]
    fn redundant_row_does_not_move_minimizer() {
        let mut p = two_d();
        let base = solve_qp(&p).unwrap().solution().unwrap().z.clone();
        p.a = Matrix::from_rows(&[[1.0, 1.0], [0.0, -1.0], [2.0, 2.0]]);
        p.b = vec![1.0, 0.0, 3.0];
        let z = solve_qp(&p).unwrap().solution().unwrap().z.clone();
        assert!((z[0] - base[0]).abs() <= 1e-8 && (z[1] - base[1]).abs() <= 1e-8);
    }

    #[test]
    fn iteration_limit_is_an_error() {
        let mut solver = ActiveSetSolver::new().with_max_iterations(0);
        assert!(matches!(solver.solve(&two_d()), Err(Error::MaxIterations(0))));
    }

    #[test]
    fn oracle_rejects_large_problems() {
        let p = QpProblem::new(Matrix::identity(1), vec![0.0], Matrix::zeros(13, 1), vec![1.0; 13])
            .unwrap();
        assert!(matches!(oracle_qp(&p), Err(Error::TooLarge { limit: 12, found: 13 })));
    }

    #[test]
    fn indefinite_hessian_rejected() {
        let p = QpProblem::new(Matrix::from_diag(&[1.0, -1.0]), vec![0.0, 0.0], Matrix::zeros(0, 2), vec![])
            .unwrap();
        assert!(matches!(solve_qp(&p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cached_factor_reused_across_problems() {
        let mut solver = ActiveSetSolver::new();
        let a = solver.solve(&two_d()).unwrap();
        let mut p = two_d();
        p.g = vec![0.0, -4.0];
        let b = solver.solve(&p).unwrap();
        assert_ne!(a, b);
        let s = b.solution().unwrap();
        assert!(p.max_violation(&s.z) <= 1e-8);
    }
}
