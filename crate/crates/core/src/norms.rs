//! Vector norms, induced operator norms, logarithmic norms and the support
//! function of the unit ball, for the four norm families the governor
//! supports: ℓ1, ℓ2, ℓ∞ and the weighted Euclidean norm `√(xᵀPx)`.
//!
//! Commands (the reference inputs `v`) are measured with the "command norm":
//! ℓ1 and ℓ∞ keep their own family, while ℓ2 and weighted specs measure
//! commands in plain ℓ2. [`NormSpec::gain_norm`] is the norm induced from the
//! command norm to the state norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L1,
    L2,
    Linf,
    WeightedP,
}

#[derive(Clone, Debug)]
struct Weight {
    p: Matrix,
    p_inv: Matrix,
    sqrt: Matrix,
    inv_sqrt: Matrix,
}

/// A vector norm choice together with everything needed to evaluate its
/// induced quantities. Immutable once built.
#[derive(Clone, Debug)]
pub struct NormSpec {
    kind: NormKind,
    weight: Option<Weight>,
}

impl NormSpec {
    pub fn l1() -> Self {
        Self {
            kind: NormKind::L1,
            weight: None,
        }
    }

    pub fn l2() -> Self {
        Self {
            kind: NormKind::L2,
            weight: None,
        }
    }

    pub fn linf() -> Self {
        Self {
            kind: NormKind::Linf,
            weight: None,
        }
    }

    /// Weighted norm `‖x‖_P = √(xᵀPx)`. `P` must be symmetric positive definite.
    pub fn weighted(p: &Matrix) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::DimensionMismatch {
                context: "NormSpec::weighted",
                expected: p.rows(),
                found: p.cols(),
            });
        }
        let asym = p.sub(&p.transpose()).max_abs();
        if asym > 1e-10 * p.max_abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "weight matrix is not symmetric (asymmetry {asym:e})"
            )));
        }
        let eig = linalg::sym_eigen(p)?;
        if eig.values[0] <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight matrix is not positive definite (min eigenvalue {:e})",
                eig.values[0]
            )));
        }
        let p = p.symmetric_part();
        let sqrt = linalg::sym_function(&p, f64::sqrt)?;
        let inv_sqrt = linalg::sym_function(&p, |l| 1.0 / l.sqrt())?;
        let p_inv = linalg::sym_function(&p, |l| 1.0 / l)?;
        Ok(Self {
            kind: NormKind::WeightedP,
            weight: Some(Weight {
                p,
                p_inv,
                sqrt,
                inv_sqrt,
            }),
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn weight(&self) -> Option<&Matrix> {
        self.weight.as_ref().map(|w| &w.p)
    }

    pub fn weight_sqrt(&self) -> Option<&Matrix> {
        self.weight.as_ref().map(|w| &w.sqrt)
    }

    fn check_dim(&self, n: usize, context: &'static str) -> Result<()> {
        match &self.weight {
            Some(w) if w.p.rows() != n => Err(Error::DimensionMismatch {
                context,
                expected: w.p.rows(),
                found: n,
            }),
            _ => Ok(()),
        }
    }

    pub fn vec_norm(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len(), "vec_norm")?;
        Ok(match self.kind {
            NormKind::L1 => x.iter().map(|v| v.abs()).sum(),
            NormKind::L2 => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            NormKind::Linf => linalg::norm_inf_vec(x),
            NormKind::WeightedP => {
                let w = self.weight.as_ref().expect("weighted spec");
                linalg::dot(x, &w.p.mul_vec(x)).max(0.0).sqrt()
            }
        })
    }

    /// Norm of a command-space vector.
    pub fn command_norm(&self, v: &[f64]) -> f64 {
        match self.kind {
            NormKind::L1 => v.iter().map(|x| x.abs()).sum(),
            NormKind::Linf => linalg::norm_inf_vec(v),
            NormKind::L2 | NormKind::WeightedP => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// Operator norm induced on state-to-state maps.
    pub fn op_norm(&self, f: &Matrix) -> Result<f64> {
        match self.kind {
            NormKind::L1 => Ok(f.norm_1()),
            NormKind::Linf => Ok(f.norm_inf()),
            NormKind::L2 => spectral_norm(f),
            NormKind::WeightedP => {
                self.check_dim(f.rows(), "op_norm")?;
                self.check_dim(f.cols(), "op_norm")?;
                let w = self.weight.as_ref().expect("weighted spec");
                spectral_norm(&w.sqrt.matmul(f).matmul(&w.inv_sqrt))
            }
        }
    }

    /// Norm of a command-to-state map, from the command norm to this norm.
    pub fn gain_norm(&self, f: &Matrix) -> Result<f64> {
        match self.kind {
            NormKind::L1 => Ok(f.norm_1()),
            NormKind::Linf => Ok(f.norm_inf()),
            NormKind::L2 => spectral_norm(f),
            NormKind::WeightedP => {
                self.check_dim(f.rows(), "gain_norm")?;
                let w = self.weight.as_ref().expect("weighted spec");
                spectral_norm(&w.sqrt.matmul(f))
            }
        }
    }

    /// Logarithmic norm of a square matrix.
    pub fn log_norm(&self, f: &Matrix) -> Result<f64> {
        if !f.is_square() {
            return Err(Error::DimensionMismatch {
                context: "log_norm",
                expected: f.rows(),
                found: f.cols(),
            });
        }
        let n = f.rows();
        match self.kind {
            NormKind::L1 => Ok((0..n)
                .map(|j| {
                    f[(j, j)] + (0..n).filter(|&i| i != j).map(|i| f[(i, j)].abs()).sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max)),
            NormKind::Linf => Ok((0..n)
                .map(|i| {
                    f[(i, i)] + (0..n).filter(|&j| j != i).map(|j| f[(i, j)].abs()).sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max)),
            NormKind::L2 => linalg::sym_eig_max(f),
            NormKind::WeightedP => {
                self.check_dim(n, "log_norm")?;
                let w = self.weight.as_ref().expect("weighted spec");
                linalg::sym_eig_max(&w.sqrt.matmul(f).matmul(&w.inv_sqrt))
            }
        }
    }

    /// Support function of the closed unit ball, `sup_{‖x‖≤1} aᵀx`.
    pub fn dual_support(&self, a: &[f64]) -> Result<f64> {
        self.check_dim(a.len(), "dual_support")?;
        Ok(match self.kind {
            NormKind::L1 => linalg::norm_inf_vec(a),
            NormKind::Linf => a.iter().map(|v| v.abs()).sum(),
            NormKind::L2 => a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            NormKind::WeightedP => {
                let w = self.weight.as_ref().expect("weighted spec");
                linalg::dot(a, &w.p_inv.mul_vec(a)).max(0.0).sqrt()
            }
        })
    }

    /// Row-wise support values `H_B̄(M)`.
    pub fn support_rows(&self, m: &Matrix) -> Result<Vec<f64>> {
        (0..m.rows()).map(|i| self.dual_support(m.row(i))).collect()
    }

    /// A unit-norm maximizer of `aᵀx` (used by tests and worst-case
    /// disturbance generation).
    pub fn support_point(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(a.len(), "support_point")?;
        let n = a.len();
        let mut x = vec![0.0; n];
        if a.iter().all(|v| *v == 0.0) {
            return Ok(x);
        }
        match self.kind {
            NormKind::L1 => {
                let (i, _) = a
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b });
                x[i] = a[i].signum();
            }
            NormKind::Linf => {
                for (xi, ai) in x.iter_mut().zip(a) {
                    *xi = if *ai >= 0.0 { 1.0 } else { -1.0 };
                }
            }
            NormKind::L2 => {
                let s = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (xi, ai) in x.iter_mut().zip(a) {
                    *xi = ai / s;
                }
            }
            NormKind::WeightedP => {
                let w = self.weight.as_ref().expect("weighted spec");
                let pa = w.p_inv.mul_vec(a);
                let s = linalg::dot(a, &pa).sqrt();
                for (xi, v) in x.iter_mut().zip(pa) {
                    *xi = v / s;
                }
            }
        }
        Ok(x)
    }
}

/// Largest singular value.
pub fn spectral_norm(f: &Matrix) -> Result<f64> {
    let gram = if f.rows() >= f.cols() {
        f.transpose().matmul(f)
    } else {
        f.matmul(&f.transpose())
    };
    Ok(linalg::sym_eig_max(&gram)?.max(0.0).sqrt())
}
