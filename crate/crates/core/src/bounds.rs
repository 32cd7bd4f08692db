//! Offline certification of the contraction bounds and the error-bound
//! constants used to tighten constraints online.
//!
//! A [`Certificate`] holds, for one cell of the command partition, an upper
//! bound `μₑ < 0` on the logarithmic norm of `f_x` over the state set together
//! with the Jacobian deviations `ηₓ` and `η_v`. Bounds are estimated by grid
//! sampling and then inflated by a safety factor, since sampling only
//! under-approximates a supremum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::linalg::{self, Matrix};
use crate::model::{Plant, Polytope};
use crate::norms::{NormKind, NormSpec};

pub const CERTIFICATE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub region: Polytope,
    /// Inflated bound on the logarithmic norm, `μ_raw / inflation`.
    pub mu_e: f64,
    pub eta_x: f64,
    pub eta_v: f64,
    /// Grid maxima before inflation.
    pub mu_e_raw: f64,
    pub eta_x_raw: f64,
    pub eta_v_raw: f64,
    pub grid_density: usize,
    pub safety_inflation: f64,
}

impl Certificate {
    fn from_raw(region: Polytope, raw: RawBounds, density: usize, inflation: f64) -> Self {
        Self {
            region,
            mu_e: raw.mu / inflation,
            eta_x: raw.eta_x * inflation,
            eta_v: raw.eta_v * inflation,
            mu_e_raw: raw.mu,
            eta_x_raw: raw.eta_x,
            eta_v_raw: raw.eta_v,
            grid_density: density,
            safety_inflation: inflation,
        }
    }
}

/// Certificates for every cell of a command partition, as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateTable {
    pub schema_version: u32,
    pub model: String,
    pub norm: NormKind,
    pub cells: Vec<Certificate>,
}

impl CertificateTable {
    pub fn new(model: &str, norm: NormKind, cells: Vec<Certificate>) -> Self {
        Self {
            schema_version: CERTIFICATE_SCHEMA_VERSION,
            model: model.to_string(),
            norm,
            cells,
        }
    }

    /// The cell whose region contains `v` (first match), falling back to the
    /// cell with the smallest violation.
    pub fn cell_for(&self, v: &[f64]) -> Option<&Certificate> {
        self.cells
            .iter()
            .find(|c| c.region.contains(v, 1e-9))
            .or_else(|| {
                self.cells.iter().min_by(|a, b| {
                    let va = a.region.slack(v).into_iter().fold(f64::NEG_INFINITY, f64::max);
                    let vb = b.region.slack(v).into_iter().fold(f64::NEG_INFINITY, f64::max);
                    va.total_cmp(&vb)
                })
            })
    }

    /// Worst-case (largest) `μₑ` and `ηₓ`, `η_v` across cells.
    pub fn envelope(&self) -> (f64, f64, f64) {
        self.cells.iter().fold(
            (f64::NEG_INFINITY, 0.0f64, 0.0f64),
            |(m, x, v), c| (m.max(c.mu_e), x.max(c.eta_x), v.max(c.eta_v)),
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CertifyOptions {
    /// Grid points per dimension (≥ 2, endpoints included).
    pub density: usize,
    /// Multiplier on η's; `|μₑ|` is divided by the same factor.
    pub inflation: f64,
    pub execution: Execution,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            density: 21,
            inflation: 1.05,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct RawBounds {
    mu: f64,
    eta_x: f64,
    eta_v: f64,
}

impl RawBounds {
    const EMPTY: RawBounds = RawBounds {
        mu: f64::NEG_INFINITY,
        eta_x: 0.0,
        eta_v: 0.0,
    };

    fn merge(self, other: RawBounds) -> RawBounds {
        RawBounds {
            mu: self.mu.max(other.mu),
            eta_x: self.eta_x.max(other.eta_x),
            eta_v: self.eta_v.max(other.eta_v),
        }
    }
}

/// Uniform grid over a box, `density` points per axis.
pub fn box_grid(lo: &[f64], hi: &[f64], density: usize) -> Vec<Vec<f64>> {
    let n = lo.len();
    let total = density.pow(n as u32);
    let mut points = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        points.push(
            (0..n)
                .map(|j| {
                    if density == 1 || hi[j] == lo[j] {
                        0.5 * (lo[j] + hi[j])
                    } else {
                        lo[j] + (hi[j] - lo[j]) * idx[j] as f64 / (density - 1) as f64
                    }
                })
                .collect(),
        );
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < density {
                break;
            }
            *slot = 0;
        }
    }
    points
}

/// Splits a box-shaped command set into `cells_per_dim` uniform boxes per axis.
pub fn uniform_partition(commands: &Polytope, cells_per_dim: usize) -> Result<Vec<Polytope>> {
    let (lo, hi) = commands.as_box().ok_or(Error::UnsupportedRegion)?;
    if cells_per_dim == 0 {
        return Err(Error::InvalidArgument("cells_per_dim must be positive".into()));
    }
    let n = lo.len();
    let total = cells_per_dim.pow(n as u32);
    let mut cells = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let clo: Vec<f64> = (0..n)
            .map(|j| lo[j] + (hi[j] - lo[j]) * idx[j] as f64 / cells_per_dim as f64)
            .collect();
        let chi: Vec<f64> = (0..n)
            .map(|j| lo[j] + (hi[j] - lo[j]) * (idx[j] + 1) as f64 / cells_per_dim as f64)
            .collect();
        cells.push(Polytope::from_box(&clo, &chi)?);
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < cells_per_dim {
                break;
            }
            *slot = 0;
        }
    }
    Ok(cells)
}

/// Grid-certifies every cell of `partition`.
///
/// Per cell: `μₑ = max μ(f_x(x, v̄))`, `ηₓ = max ‖f_x(x, v̄) − f_x(x_v(v̄), v̄)‖`
/// over `x ∈ grid(X)`, `v̄ ∈ grid(cell)`, and
/// `η_v = max ‖f_v(x, v̂) − f_v(x_v(v̄), v̄)‖` additionally over `v̂ ∈ grid(V)`.
pub fn certify(
    plant: &dyn Plant,
    spec: &NormSpec,
    partition: &[Polytope],
    opts: &CertifyOptions,
) -> Result<Vec<Certificate>> {
    if opts.density < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid density must be at least 2 points per dimension, got {}",
            opts.density
        )));
    }
    if !(opts.inflation >= 1.0) {
        return Err(Error::InvalidArgument("safety inflation must be ≥ 1".into()));
    }
    if partition.is_empty() {
        return Err(Error::InvalidArgument("empty partition".into()));
    }
    let (xlo, xhi) = plant.state_set().as_box().ok_or(Error::UnsupportedRegion)?;
    let (vlo, vhi) = plant.command_set().as_box().ok_or(Error::UnsupportedRegion)?;
    let x_grid = box_grid(&xlo, &xhi, opts.density);
    let v_hat_grid = box_grid(&vlo, &vhi, opts.density);

    let mut certs = Vec::with_capacity(partition.len());
    for (cell_idx, cell) in partition.iter().enumerate() {
        let (clo, chi) = cell.as_box().ok_or(Error::UnsupportedRegion)?;
        let v_bar_grid = box_grid(&clo, &chi, opts.density);
        let references: Vec<(Matrix, Matrix)> = v_bar_grid
            .iter()
            .map(|vb| {
                let xs = plant.steady_state(vb);
                (plant.state_jacobian(&xs, vb), plant.command_jacobian(&xs, vb))
            })
            .collect();

        let partials: Vec<Result<RawBounds>> =
            exec::map_slice(opts.execution, &x_grid, |x| -> Result<RawBounds> {
                let mut acc = RawBounds::EMPTY;
                for (vb, (a_ref, _)) in v_bar_grid.iter().zip(&references) {
                    let fx = plant.state_jacobian(x, vb);
                    acc.mu = acc.mu.max(spec.log_norm(&fx)?);
                    acc.eta_x = acc.eta_x.max(spec.op_norm(&fx.sub(a_ref))?);
                }
                for vh in &v_hat_grid {
                    let fv = plant.command_jacobian(x, vh);
                    for (_, b_ref) in &references {
                        acc.eta_v = acc.eta_v.max(spec.gain_norm(&fv.sub(b_ref))?);
                    }
                }
                Ok(acc)
            });
        let mut raw = RawBounds::EMPTY;
        for p in partials {
            raw = raw.merge(p?);
        }
        let cert = Certificate::from_raw(cell.clone(), raw, opts.density, opts.inflation);
        if !(cert.mu_e < 0.0) {
            return Err(Error::CertificationFailed {
                cell: cell_idx,
                mu_e: cert.mu_e,
            });
        }
        certs.push(cert);
    }
    Ok(certs)
}

/// Constants of the prediction-error bound at a command `v_k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorGains {
    pub lambda_v: f64,
    pub lambda_w: f64,
    pub gamma_v: f64,
    pub gamma_w: f64,
    /// `μ(f_x(x_v(v_k), v_k))`.
    pub mu_at_v: f64,
    /// `‖f_v(x_v(v_k), v_k)‖` in the gain norm.
    pub fv_norm: f64,
}

impl ErrorGains {
    /// Evaluates the gain formulas from their ingredients.
    pub fn from_parts(mu_at_v: f64, fv_norm: f64, cert: &Certificate) -> Result<Self> {
        if !(mu_at_v < 0.0) {
            return Err(Error::NotContractive { mu: mu_at_v });
        }
        let me = cert.mu_e;
        Ok(Self {
            lambda_v: -fv_norm / mu_at_v,
            lambda_w: -1.0 / mu_at_v,
            gamma_v: (cert.eta_x * fv_norm - cert.eta_v * mu_at_v) / (me * mu_at_v),
            gamma_w: cert.eta_x / (me * mu_at_v),
            mu_at_v,
            fv_norm,
        })
    }

    /// Radius of the predicted-deviation ball `ΔX(v_k, δv)`.
    pub fn deviation_radius(&self, dv_norm: f64, w_max: f64) -> f64 {
        self.lambda_v * dv_norm + self.lambda_w * w_max
    }

    /// Radius of the prediction-error ball `E(v_k, δv)`.
    pub fn error_radius(&self, dv_norm: f64, w_max: f64) -> f64 {
        self.gamma_v * dv_norm + self.gamma_w * w_max
    }
}

pub fn error_gains(
    plant: &dyn Plant,
    cert: &Certificate,
    v_k: &[f64],
    spec: &NormSpec,
) -> Result<ErrorGains> {
    if !cert.region.contains(v_k, 1e-9) {
        return Err(Error::OutsideAdmissibleSet);
    }
    let xs = plant.steady_state(v_k);
    let mu = spec.log_norm(&plant.state_jacobian(&xs, v_k))?;
    let fv = spec.gain_norm(&plant.command_jacobian(&xs, v_k))?;
    ErrorGains::from_parts(mu, fv, cert)
}

/// Inter-sample inflation terms at one prediction instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntersampleTerms {
    pub gamma_tilde_v: f64,
    pub gamma_tilde_x: f64,
    pub xi: f64,
}

/// `ξ = (e^{μΔt} − 1)/μ`.
pub fn xi(mu: f64, dt: f64) -> f64 {
    (mu * dt).exp_m1() / mu
}

/// Inter-sample terms from a precomputed transition matrix `φ(t, 0)`.
pub fn intersample_from_transition(
    a: &Matrix,
    fv: &Matrix,
    phi_t: &Matrix,
    x_jump: &[f64],
    xi: f64,
    spec: &NormSpec,
) -> Result<IntersampleTerms> {
    let gv = spec.gain_norm(&phi_t.matmul(fv))? * xi;
    let drift = a.mul_vec(&phi_t.mul_vec(x_jump));
    let gx = spec.vec_norm(&drift)? * xi;
    Ok(IntersampleTerms {
        gamma_tilde_v: gv,
        gamma_tilde_x: gx,
        xi,
    })
}

pub fn intersample_terms(
    plant: &dyn Plant,
    v_k: &[f64],
    x_jump: &[f64],
    t: f64,
    dt: f64,
    spec: &NormSpec,
) -> Result<IntersampleTerms> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("Δt must be positive".into()));
    }
    let xs = plant.steady_state(v_k);
    let a = plant.state_jacobian(&xs, v_k);
    let fv = plant.command_jacobian(&xs, v_k);
    let mu = spec.log_norm(&a)?;
    if !(mu < 0.0) {
        return Err(Error::NotContractive { mu });
    }
    let phi = linalg::mat_exp(&a, t)?;
    intersample_from_transition(&a, &fv, &phi, x_jump, xi(mu, dt), spec)
}

/// Constraint-check horizon: `T` and the number of check intervals `N`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Horizon {
    pub t_final: f64,
    pub steps: usize,
}

/// `T = ln(tol_T)/μ` rounded up to a multiple of `dt_check`, so that
/// `e^{μT} ≤ tol_T`.
pub fn horizon(mu_at_v: f64, dt_check: f64, tol_t: f64) -> Result<Horizon> {
    if !(mu_at_v < 0.0) {
        return Err(Error::NotContractive { mu: mu_at_v });
    }
    if !(tol_t > 0.0 && tol_t < 1.0) {
        return Err(Error::InvalidArgument(format!("tol_T must lie in (0, 1), got {tol_t}")));
    }
    if !(dt_check > 0.0) {
        return Err(Error::InvalidArgument("Δt_check must be positive".into()));
    }
    let t = tol_t.ln() / mu_at_v;
    let steps = ((t / dt_check) - 1e-9).ceil().max(1.0) as usize;
    Ok(Horizon {
        t_final: steps as f64 * dt_check,
        steps,
    })
}
