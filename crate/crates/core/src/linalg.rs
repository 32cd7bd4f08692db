//! Dense real linear algebra.
//!
//! Everything here works on small row-major matrices (the plants handled by
//! the governor have a handful of states). The kernel covers LU solves,
//! symmetric eigenvalues by cyclic Jacobi, the matrix exponential by
//! scaling-and-squaring, the convolution integral of a matrix exponential,
//! and a continuous-time algebraic Riccati solver based on the matrix sign
//! function of the Hamiltonian.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real matrix stored in row-major order. Serialized as a list of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("matrix dimensions must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Matrix::from_row_major",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_row_major"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from literal rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map(|row| row.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, o) in dst.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "mul_vec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// (A + Aᵀ)/2.
    pub fn symmetric_part(&self) -> Matrix {
        let t = self.transpose();
        self.add(&t).scale(0.5)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Max absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Matrix) {
        for i in 0..src.rows {
            for j in 0..src.cols {
                self[(r0 + i, c0 + j)] = src[(i, j)];
            }
        }
    }

    fn require_square(&self, context: &'static str) -> Result<()> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.rows,
                found: self.cols,
            });
        }
        Ok(())
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        (0..m.rows).map(|i| m.row(i).to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = String;

    fn try_from(rows: Vec<Vec<f64>>) -> std::result::Result<Self, String> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err("matrix rows have unequal lengths".into());
        }
        let n = rows.len();
        Matrix::from_row_major(n, cols, rows.into_iter().flatten().collect())
            .map_err(|e| e.to_string())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf_vec(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn check_finite_vec(x: &[f64], context: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

/// LU factorization with partial pivoting, `PA = LU`.
#[derive(Clone, Debug)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &Matrix) -> Result<Self> {
        a.require_square("Lu::new")?;
        if !a.is_finite() {
            return Err(Error::NonFinite("Lu::new"));
        }
        let n = a.rows;
        let threshold = 1e-12 * a.norm_inf();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax <= threshold || pmax == 0.0 {
                return Err(Error::SingularMatrix);
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        lu[(i, j)] -= factor * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Self { lu, perm, sign })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s = dot(&self.lu.row(i)[..i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s = dot(&self.lu.row(i)[i + 1..], &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[(i, i)];
        }
        x
    }

    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.rows, b.cols);
        for j in 0..b.cols {
            let x = self.solve(&b.col(j));
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn inverse(&self) -> Matrix {
        self.solve_matrix(&Matrix::identity(self.lu.rows))
    }

    pub fn determinant(&self) -> f64 {
        (0..self.lu.rows).map(|i| self.lu[(i, i)]).product::<f64>() * self.sign
    }
}

/// Solves `Ax = b` by LU with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    a.require_square("solve_linear")?;
    if b.len() != a.rows {
        return Err(Error::DimensionMismatch {
            context: "solve_linear",
            expected: a.rows,
            found: b.len(),
        });
    }
    check_finite_vec(b, "solve_linear")?;
    Ok(Lu::new(a)?.solve(b))
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    Ok(Lu::new(a)?.inverse())
}

/// Least-squares solution of `CX ≈ D` by Householder QR. `C` must have full
/// column rank.
pub fn least_squares(c: &Matrix, d: &Matrix) -> Result<Matrix> {
    let (m, n) = (c.rows, c.cols);
    if m < n || d.rows != m {
        return Err(Error::DimensionMismatch {
            context: "least_squares",
            expected: m,
            found: d.rows,
        });
    }
    let mut r = c.clone();
    let mut q_t_d = d.clone();
    let scale = c.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let norm = (k..m).map(|i| r[(i, k)] * r[(i, k)]).sum::<f64>().sqrt();
        if norm <= 1e-14 * scale {
            return Err(Error::SingularMatrix);
        }
        let alpha = if r[(k, k)] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..n {
            let s = (k..m).map(|i| v[i - k] * r[(i, j)]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..m {
                r[(i, j)] -= s * v[i - k];
            }
        }
        for j in 0..q_t_d.cols {
            let s = (k..m).map(|i| v[i - k] * q_t_d[(i, j)]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..m {
                q_t_d[(i, j)] -= s * v[i - k];
            }
        }
    }
    let mut x = Matrix::zeros(n, d.cols);
    for j in 0..d.cols {
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| r[(i, k)] * x[(k, j)]).sum();
            x[(i, j)] = (q_t_d[(i, j)] - s) / r[(i, i)];
        }
    }
    Ok(x)
}

/// Eigen-decomposition of a real symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigen-decomposition of `(S + Sᵀ)/2`.
pub fn sym_eigen(s: &Matrix) -> Result<SymEigen> {
    s.require_square("sym_eigen")?;
    if !s.is_finite() {
        return Err(Error::NonFinite("sym_eigen"));
    }
    let n = s.rows;
    let mut a = s.symmetric_part();
    let mut v = Matrix::identity(n);
    let target = 1e-12 * a.norm_fro();
    let off = |a: &Matrix| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a[(i, j)] * a[(i, j)];
                }
            }
        }
        acc.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) > target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                what: "Jacobi eigenvalue sweep",
                iterations: sweeps,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Largest eigenvalue of the symmetric part of `s`.
pub fn sym_eig_max(s: &Matrix) -> Result<f64> {
    s.require_square("sym_eig_max")?;
    if s.rows == 1 {
        return Ok(s[(0, 0)]);
    }
    if s.rows == 2 {
        // closed form avoids the sweep in the hot certification loop
        let a = s[(0, 0)];
        let d = s[(1, 1)];
        let b = 0.5 * (s[(0, 1)] + s[(1, 0)]);
        if !(a.is_finite() && b.is_finite() && d.is_finite()) {
            return Err(Error::NonFinite("sym_eig_max"));
        }
        let mean = 0.5 * (a + d);
        let half = 0.5 * (a - d);
        return Ok(mean + half.hypot(b));
    }
    let e = sym_eigen(s)?;
    Ok(*e.values.last().expect("non-empty"))
}

/// Applies `g` to the eigenvalues of a symmetric matrix: `V g(Λ) Vᵀ`.
pub fn sym_function(s: &Matrix, g: impl Fn(f64) -> f64) -> Result<Matrix> {
    let e = sym_eigen(s)?;
    let n = s.rows;
    let mut out = Matrix::zeros(n, n);
    for (k, &lambda) in e.values.iter().enumerate() {
        let gl = g(lambda);
        for i in 0..n {
            let vik = e.vectors[(i, k)] * gl;
            for j in 0..n {
                out[(i, j)] += vik * e.vectors[(j, k)];
            }
        }
    }
    Ok(out)
}

const PADE_ORDER: usize = 8;

/// `e^{At}` by scaling-and-squaring with a diagonal Padé core.
///
/// The argument is scaled so that `‖At/2ˢ‖∞ ≤ 0.5`.
pub fn mat_exp(a: &Matrix, t: f64) -> Result<Matrix> {
    a.require_square("mat_exp")?;
    if !t.is_finite() || !a.is_finite() {
        return Err(Error::NonFinite("mat_exp"));
    }
    let n = a.rows;
    if t == 0.0 {
        return Ok(Matrix::identity(n));
    }
    let at = a.scale(t);
    let norm = at.norm_inf();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = at.scale(0.5f64.powi(squarings));

    let mut coeffs = [0.0; PADE_ORDER + 1];
    coeffs[0] = 1.0;
    let q = PADE_ORDER as f64;
    for k in 1..=PADE_ORDER {
        let kf = k as f64;
        coeffs[k] = coeffs[k - 1] * (q - kf + 1.0) / (kf * (2.0 * q - kf + 1.0));
    }
    let mut num = Matrix::identity(n);
    let mut den = Matrix::identity(n);
    let mut power = Matrix::identity(n);
    for (k, c) in coeffs.iter().enumerate().skip(1) {
        power = power.matmul(&scaled);
        let term = power.scale(*c);
        num = num.add(&term);
        den = if k % 2 == 0 { den.add(&term) } else { den.sub(&term) };
    }
    let mut result = Lu::new(&den)?.solve_matrix(&num);
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    Ok(result)
}

/// `∫₀ᵗ e^{A(t−τ)} B dτ`.
///
/// Uses `A⁻¹(e^{At} − I)B` when `A` is invertible and composite Simpson
/// quadrature otherwise.
pub fn convolution_gain(a: &Matrix, b: &Matrix, t: f64) -> Result<Matrix> {
    a.require_square("convolution_gain")?;
    if b.rows != a.rows {
        return Err(Error::DimensionMismatch {
            context: "convolution_gain",
            expected: a.rows,
            found: b.rows,
        });
    }
    if t == 0.0 {
        return Ok(Matrix::zeros(b.rows, b.cols));
    }
    match Lu::new(a) {
        Ok(lu) => {
            let phi = mat_exp(a, t)?;
            let rhs = phi.sub(&Matrix::identity(a.rows)).matmul(b);
            Ok(lu.solve_matrix(&rhs))
        }
        Err(Error::SingularMatrix) => convolution_gain_simpson(a, b, t, 256),
        Err(e) => Err(e),
    }
}

/// Composite Simpson quadrature of `∫₀ᵗ e^{A s} B ds` with an even number of
/// panels (rounded up).
pub fn convolution_gain_simpson(a: &Matrix, b: &Matrix, t: f64, panels: usize) -> Result<Matrix> {
    let panels = panels.max(2).next_multiple_of(2);
    let h = t / panels as f64;
    let step = mat_exp(a, h)?;
    let mut node = b.clone();
    let mut acc = Matrix::zeros(b.rows, b.cols);
    for i in 0..=panels {
        let w = if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc = acc.add(&node.scale(w));
        node = step.matmul(&node);
    }
    Ok(acc.scale(h / 3.0))
}

const SIGN_MAX_ITERATIONS: usize = 100;
const NEWTON_REFINEMENTS: usize = 8;

/// Stabilizing solution of `AᵀP + PA − PBR⁻¹BᵀP + Q = 0`.
///
/// The stable invariant subspace of the Hamiltonian is extracted from its
/// matrix sign function (Newton iteration with determinant scaling). A few
/// Newton–Kleinman refinements polish the result when the residual is not
/// yet at working precision.
pub fn solve_care(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    a.require_square("solve_care")?;
    q.require_square("solve_care")?;
    r.require_square("solve_care")?;
    let n = a.rows;
    if b.rows != n || q.rows != n || r.rows != b.cols {
        return Err(Error::DimensionMismatch {
            context: "solve_care",
            expected: n,
            found: b.rows,
        });
    }
    let r_inv = inverse(r)?;
    let g = b.matmul(&r_inv).matmul(&b.transpose());

    let mut ham = Matrix::zeros(2 * n, 2 * n);
    ham.set_block(0, 0, a);
    ham.set_block(0, n, &g.scale(-1.0));
    ham.set_block(n, 0, &q.scale(-1.0));
    ham.set_block(n, n, &a.transpose().scale(-1.0));

    let mut z = ham;
    let mut converged = false;
    for _ in 0..SIGN_MAX_ITERATIONS {
        let lu = Lu::new(&z)?;
        let det = lu.determinant().abs();
        let c = if det.is_finite() && det > 0.0 {
            det.powf(-1.0 / (2 * n) as f64)
        } else {
            1.0
        };
        let next = z.scale(c).add(&lu.inverse().scale(1.0 / c)).scale(0.5);
        let change = next.sub(&z).norm_1();
        z = next;
        if change <= 1e-13 * z.norm_1() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "Hamiltonian sign iteration",
            iterations: SIGN_MAX_ITERATIONS,
        });
    }

    // (W + I)[I; P] = 0
    let w11 = z.block(0, 0, n, n);
    let w12 = z.block(0, n, n, n);
    let w21 = z.block(n, 0, n, n);
    let w22 = z.block(n, n, n, n);
    let eye = Matrix::identity(n);
    let mut lhs = Matrix::zeros(2 * n, n);
    lhs.set_block(0, 0, &w12);
    lhs.set_block(n, 0, &w22.add(&eye));
    let mut rhs = Matrix::zeros(2 * n, n);
    rhs.set_block(0, 0, &w11.add(&eye).scale(-1.0));
    rhs.set_block(n, 0, &w21.scale(-1.0));
    let mut p = least_squares(&lhs, &rhs)?.symmetric_part();

    // Backward-error target relative to the size of the equation's terms.
    let target = |p: &Matrix| {
        let np = p.norm_fro();
        1e-9 * (q.norm_fro() + 2.0 * a.norm_fro() * np + g.norm_fro() * np * np).max(f64::MIN_POSITIVE)
    };
    let mut residual = care_residual(a, &g, q, &p);
    for _ in 0..NEWTON_REFINEMENTS {
        if residual <= 1e-3 * target(&p) {
            break;
        }
        let closed = a.sub(&g.matmul(&p));
        let rhs = q.add(&p.matmul(&g).matmul(&p)).scale(-1.0);
        let Ok(candidate) = solve_lyapunov(&closed, &rhs) else {
            break;
        };
        let candidate = candidate.symmetric_part();
        let cand_res = care_residual(a, &g, q, &candidate);
        if cand_res < residual {
            p = candidate;
            residual = cand_res;
        } else {
            break;
        }
    }
    if !(residual <= target(&p)) {
        return Err(Error::NotStabilizable { residual });
    }
    Ok(p)
}

/// Frobenius norm of `AᵀP + PA − PGP + Q`.
pub fn care_residual(a: &Matrix, g: &Matrix, q: &Matrix, p: &Matrix) -> f64 {
    a.transpose()
        .matmul(p)
        .add(&p.matmul(a))
        .sub(&p.matmul(g).matmul(p))
        .add(q)
        .norm_fro()
}

/// Solves `AᵀX + XA = C` through the Kronecker-product linear system.
pub fn solve_lyapunov(a: &Matrix, c: &Matrix) -> Result<Matrix> {
    a.require_square("solve_lyapunov")?;
    let n = a.rows;
    let mut big = Matrix::zeros(n * n, n * n);
    // vec index of X[(i, j)] is i*n + j
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                // (AᵀX)_{ij} = Σ_k A_{ki} X_{kj}
                big[(row, k * n + j)] += a[(k, i)];
                // (XA)_{ij} = Σ_k X_{ik} A_{kj}
                big[(row, i * n + k)] += a[(k, j)];
            }
        }
    }
    let x = solve_linear(&big, c.as_slice())?;
    Matrix::from_row_major(n, n, x)
}

/// Cholesky factor `A = LLᵀ` of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self> {
        a.require_square("Cholesky::new")?;
        if !a.is_finite() {
            return Err(Error::NonFinite("Cholesky::new"));
        }
        let n = a.rows;
        let floor = 1e-14 * a.max_abs().max(f64::MIN_POSITIVE);
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let d = a[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
            if d <= floor {
                return Err(Error::SingularMatrix);
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        let mut x = b.to_vec();
        for i in 0..n {
            let s = dot(&self.l.row(i)[..i], &x[..i]);
            x[i] = (x[i] - s) / self.l[(i, i)];
        }
        x
    }

    /// `L⁻ᵀ b`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.l[(k, i)] * x[k]).sum();
            x[i] = (x[i] - s) / self.l[(i, i)];
        }
        x
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }
}
