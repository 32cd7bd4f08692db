//! The sampled reference governor.
//!
//! At each sample the governor linearizes the closed loop at the steady state
//! of the current command `v_k`, predicts the response to a command increment
//! `δv` on a finite grid of check instants, tightens the state constraints by
//! the error and disturbance bounds, and solves a small QP in `(δv, ζ)`. A
//! solution is applied only if the current state lies inside the deviation
//! ball the error bounds rely on; otherwise the command is held.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bounds::{self, Certificate, CertificateTable, ErrorGains, Horizon};
use crate::error::{Error, Result};
use crate::linalg::{self, dot, Cholesky, Matrix};
use crate::model::{affine_steady_state, Plant, Polytope};
use crate::norms::NormSpec;
use crate::qp::{ActiveSetSolver, QpOutcome, QpProblem};

fn default_dt() -> f64 {
    0.05
}
fn default_tol_t() -> f64 {
    1e-3
}
fn default_delta() -> f64 {
    1e-4
}
fn default_kappa() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernorConfig {
    /// Cost weight on `v − r`.
    pub s: Matrix,
    #[serde(default = "default_dt")]
    pub dt_sample: f64,
    #[serde(default = "default_dt")]
    pub dt_check: f64,
    #[serde(default = "default_tol_t")]
    pub tol_t: f64,
    /// Absolute margin subtracted from every state-constraint offset.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Quadratic weight on `ζ`; `1e-8·trace(S)·(trace(S)/n_v)²` when absent,
    /// so that scaling `S` scales the whole cost and leaves the move unchanged.
    #[serde(default)]
    pub zeta_reg: Option<f64>,
    /// Steady-state margin for the convergence rows; derived from the
    /// disturbance bound when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub convergence_augmentation: bool,
    #[serde(default)]
    pub scalar_mode: bool,
}

impl GovernorConfig {
    pub fn new(s: Matrix) -> Self {
        Self {
            s,
            dt_sample: default_dt(),
            dt_check: default_dt(),
            tol_t: default_tol_t(),
            delta: default_delta(),
            zeta_reg: None,
            epsilon: None,
            kappa: default_kappa(),
            convergence_augmentation: false,
            scalar_mode: false,
        }
    }

    pub fn zeta_weight(&self) -> f64 {
        self.zeta_reg.unwrap_or_else(|| {
            let tr = self.s.trace();
            let mean = tr / self.s.rows().max(1) as f64;
            1e-8 * tr * mean * mean
        })
    }

    pub fn validate(&self, n_v: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.s.rows() != n_v || self.s.cols() != n_v {
            return bad(format!("S must be {n_v}×{n_v}"));
        }
        if self.s.sub(&self.s.transpose()).max_abs() > 1e-10 * (1.0 + self.s.max_abs())
            || Cholesky::new(&self.s).is_err()
        {
            return bad("S must be symmetric positive definite".into());
        }
        if !(self.dt_sample > 0.0) {
            return bad("dt_sample must be positive".into());
        }
        if !(self.dt_check >= self.dt_sample) {
            return bad("dt_check must be at least dt_sample".into());
        }
        if !(self.tol_t > 0.0 && self.tol_t < 1.0) {
            return bad("tol_t must lie in (0, 1)".into());
        }
        if !(self.delta >= 0.0) || !(self.kappa >= 0.0) || !(self.zeta_weight() > 0.0) {
            return bad("delta and kappa must be non-negative and zeta_reg positive".into());
        }
        if self.scalar_mode && n_v != 1 {
            return bad("scalar_mode requires a scalar command".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GovernorKind {
    /// Full error bounds from the certificate.
    Nonlinear,
    /// Linear-model prediction only: error and inter-sample terms dropped,
    /// disturbance term kept, no deviation check.
    Linear,
}

/// Box of admissible increments `U δv ≤ ζ u`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoveSet {
    pub u_mat: Matrix,
    pub u: Vec<f64>,
    /// Largest command norm over the box at `ζ = 1`.
    pub v_bar: f64,
}

/// Steepest-descent box `U = [I; −I]`, `u = |[S(v_k − r); S(v_k − r)]|`.
pub fn move_set(v_k: &[f64], r: &[f64], s: &Matrix, spec: &NormSpec) -> Result<MoveSet> {
    let n = v_k.len();
    if r.len() != n || s.rows() != n {
        return Err(Error::DimensionMismatch {
            context: "move_set",
            expected: n,
            found: r.len(),
        });
    }
    let diff: Vec<f64> = v_k.iter().zip(r).map(|(a, b)| a - b).collect();
    let grad = s.mul_vec(&diff);
    let mut u: Vec<f64> = grad.iter().chain(&grad).map(|g| g.abs()).collect();
    let top = u.iter().fold(0.0f64, |m, v| m.max(*v));
    let floor = if top > 0.0 { 1e-12 * top } else { 1e-12 };
    for ui in u.iter_mut() {
        if *ui < floor {
            *ui = floor;
        }
    }
    let mut u_mat = Matrix::zeros(2 * n, n);
    for i in 0..n {
        u_mat[(i, i)] = 1.0;
        u_mat[(n + i, i)] = -1.0;
    }
    let mut v_bar = 0.0f64;
    for mask in 0..(1usize << n) {
        let vertex: Vec<f64> = (0..n)
            .map(|i| if mask & (1 << i) != 0 { u[i] } else { -u[n + i] })
            .collect();
        v_bar = v_bar.max(spec.command_norm(&vertex));
    }
    Ok(MoveSet { u_mat, u, v_bar })
}

/// Convergence rows `M x_v(v) + ε H(M) ≤ m` as a polytope in `v`. Rows that
/// do not depend on `v` are dropped when satisfied.
pub fn v1_prime(plant: &dyn Plant, epsilon: f64, spec: &NormSpec) -> Result<Polytope> {
    let (x0, l) = affine_steady_state(plant)?;
    let x_set = plant.state_set();
    let m = x_set.normals();
    let support = spec.support_rows(m)?;
    let ml = m.matmul(&l);
    let mx0 = m.mul_vec(&x0);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offsets = Vec::new();
    for i in 0..m.rows() {
        let off = x_set.offsets()[i] - epsilon * support[i] - mx0[i];
        let row = ml.row(i);
        if row.iter().all(|v| v.abs() <= 1e-14) {
            if off < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "steady-state margin {epsilon} leaves no admissible command"
                )));
            }
            continue;
        }
        rows.push(row.to_vec());
        offsets.push(off);
    }
    Polytope::new(Matrix::from_rows(&rows), offsets)
}

/// Linearization of the closed loop at `(x_v(v), v)` with everything the
/// constraint rows need, cached until the command changes.
#[derive(Clone, Debug)]
pub struct GovernorState {
    pub v_k: Vec<f64>,
    pub x_k: Vec<f64>,
    pub a_k: Matrix,
    pub b_k: Matrix,
    pub gains: ErrorGains,
    pub horizon: Horizon,
    pub cell: usize,
    xi: f64,
    phi: Vec<Matrix>,
    m_conv: Vec<Matrix>,
    phi_fv: Vec<f64>,
    m_x: Vec<f64>,
}

impl GovernorState {
    /// `φ(jΔt_check, 0)` for `j = 0..=N`.
    pub fn transition(&self, j: usize) -> &Matrix {
        &self.phi[j]
    }

    /// `M·∫₀ᵗ φ(t, τ) B dτ` at `t = jΔt_check`.
    pub fn constrained_gain(&self, j: usize) -> &Matrix {
        &self.m_conv[j]
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    /// The increment was applied.
    Accepted,
    /// Optimal increment is zero.
    Zero,
    Infeasible,
    /// The measured state lies outside the deviation ball.
    RejectedDeviation,
    /// The cost decrease requirement failed.
    RejectedCost,
    /// No governor; the reference is passed through.
    Passthrough,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Accepted => "accepted",
            QpStatus::Zero => "zero",
            QpStatus::Infeasible => "infeasible",
            QpStatus::RejectedDeviation => "rejected_deviation",
            QpStatus::RejectedCost => "rejected_cost",
            QpStatus::Passthrough => "passthrough",
        }
    }

    pub fn moved(self) -> bool {
        matches!(self, QpStatus::Accepted | QpStatus::Passthrough)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub status: QpStatus,
    pub v_next: Vec<f64>,
    pub dv: Vec<f64>,
    pub zeta: f64,
    pub active_set_size: usize,
    pub rows: usize,
    pub iterations: usize,
    /// `‖v_k − r‖²_S` before and `‖v_{k+1} − r‖²_S` after the step.
    pub cost_before: f64,
    pub cost_after: f64,
    pub elapsed_s: f64,
}

/// Assembled QP with bookkeeping on where each row block starts.
#[derive(Clone, Debug)]
pub struct Assembled {
    pub qp: QpProblem,
    pub move_set: MoveSet,
    /// Number of tightened state rows, `(N + 1)·n_rows(X)`.
    pub state_rows: usize,
}

pub struct Governor {
    plant: Arc<dyn Plant>,
    spec: NormSpec,
    certs: Arc<CertificateTable>,
    cfg: GovernorConfig,
    kind: GovernorKind,
    w_max: f64,
    epsilon: Option<f64>,
    v1: Option<Polytope>,
    support: Vec<f64>,
    solver: ActiveSetSolver,
    state: GovernorState,
    last: Option<(QpProblem, Vec<f64>)>,
}

impl std::fmt::Debug for Governor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Governor")
            .field("plant", &self.plant.name())
            .field("kind", &self.kind)
            .field("w_max", &self.w_max)
            .field("v_k", &self.state.v_k)
            .finish_non_exhaustive()
    }
}

impl Governor {
    /// `w_max` is the disturbance bound in the governor norm.
    pub fn new(
        plant: Arc<dyn Plant>,
        spec: NormSpec,
        certs: Arc<CertificateTable>,
        cfg: GovernorConfig,
        kind: GovernorKind,
        w_max: f64,
        v0: &[f64],
    ) -> Result<Self> {
        let n_v = plant.command_dim();
        cfg.validate(n_v)?;
        if v0.len() != n_v {
            return Err(Error::DimensionMismatch {
                context: "Governor::new",
                expected: n_v,
                found: v0.len(),
            });
        }
        if !(w_max >= 0.0) || !w_max.is_finite() {
            return Err(Error::InvalidArgument("w_max must be finite and non-negative".into()));
        }
        if certs.cells.is_empty() {
            return Err(Error::InvalidArgument("empty certificate table".into()));
        }
        if !plant.command_set().contains(v0, 1e-9) {
            return Err(Error::OutsideAdmissibleSet);
        }
        let support = spec.support_rows(plant.state_set().normals())?;
        let state = linearize_state(plant.as_ref(), &spec, &certs, &cfg, kind, v0)?;
        let mut gov = Self {
            plant,
            spec,
            certs,
            cfg,
            kind,
            w_max,
            epsilon: None,
            v1: None,
            support,
            solver: ActiveSetSolver::new(),
            state,
            last: None,
        };
        if gov.cfg.convergence_augmentation {
            let need = 2.0 * gov.disturbance_margin_sup()?;
            let eps = match gov.cfg.epsilon {
                Some(e) if e > need => e,
                Some(e) => {
                    return Err(Error::InvalidArgument(format!(
                        "epsilon {e} must exceed {need}"
                    )))
                }
                None => (1.1 * need).max(1e-4),
            };
            gov.v1 = Some(v1_prime(gov.plant.as_ref(), eps, &gov.spec)?);
            gov.epsilon = Some(eps);
        }
        Ok(gov)
    }

    /// `sup (Γ_w + Λ_w)·w_max` over a grid of the command set.
    fn disturbance_margin_sup(&self) -> Result<f64> {
        if self.w_max == 0.0 {
            return Ok(0.0);
        }
        let (lo, hi) = self
            .plant
            .command_set()
            .as_box()
            .ok_or(Error::UnsupportedRegion)?;
        let mut sup = 0.0f64;
        for v in bounds::box_grid(&lo, &hi, 5) {
            let (_, cert) = self.cert_for(&v)?;
            let g = gains_at(self.plant.as_ref(), &self.spec, cert, self.kind, &v)?;
            sup = sup.max((g.gamma_w + g.lambda_w) * self.w_max);
        }
        Ok(sup)
    }

    fn cert_for(&self, v: &[f64]) -> Result<(usize, &Certificate)> {
        cell_index(&self.certs, v).map(|i| (i, &self.certs.cells[i]))
    }

    pub fn state(&self) -> &GovernorState {
        &self.state
    }

    pub fn command(&self) -> &[f64] {
        &self.state.v_k
    }

    pub fn kind(&self) -> GovernorKind {
        self.kind
    }

    pub fn config(&self) -> &GovernorConfig {
        &self.cfg
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn convergence_rows(&self) -> Option<&Polytope> {
        self.v1.as_ref()
    }

    /// The last solved QP and its minimizer, if any.
    pub fn last_solution(&self) -> Option<&(QpProblem, Vec<f64>)> {
        self.last.as_ref()
    }

    /// Whether the error ball collapses to zero, so the deviation condition
    /// carries no information.
    fn exact_prediction(&self) -> bool {
        self.state.gains.gamma_v == 0.0 && self.state.gains.gamma_w == 0.0
    }

    fn checks_deviation(&self) -> bool {
        self.kind == GovernorKind::Nonlinear && !self.exact_prediction()
    }

    pub fn cost(&self, v: &[f64], r: &[f64]) -> f64 {
        let d: Vec<f64> = v.iter().zip(r).map(|(a, b)| a - b).collect();
        dot(&d, &self.cfg.s.mul_vec(&d))
    }

    pub fn assemble(&self, x_meas: &[f64], r: &[f64]) -> Result<Assembled> {
        let n = self.plant.state_dim();
        let n_v = self.plant.command_dim();
        if x_meas.len() != n || r.len() != n_v {
            return Err(Error::DimensionMismatch {
                context: "Governor::assemble",
                expected: n,
                found: x_meas.len(),
            });
        }
        let st = &self.state;
        let x_set = self.plant.state_set();
        let m = x_set.normals();
        let n_m = m.rows();
        let ms = move_set(&st.v_k, r, &self.cfg.s, &self.spec)?;
        let jump: Vec<f64> = x_meas.iter().zip(&st.x_k).map(|(a, b)| a - b).collect();
        let g = &st.gains;
        let (gamma_v, gamma_w) = match self.kind {
            GovernorKind::Nonlinear => (g.gamma_v, g.gamma_w),
            GovernorKind::Linear => (0.0, 0.0),
        };

        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for j in 0..=st.horizon.steps {
            let free = st.phi[j].mul_vec(&jump);
            let m_free = m.mul_vec(&free);
            let (gt_v, gt_x) = if self.kind == GovernorKind::Nonlinear {
                let drift = st.a_k.mul_vec(&free);
                (st.phi_fv[j] * st.xi, self.spec.vec_norm(&drift)? * st.xi)
            } else {
                (0.0, 0.0)
            };
            let zeta_coeff = (gamma_v + gt_v) * ms.v_bar;
            let h2 = (gamma_w + g.lambda_w) * self.w_max + gt_x;
            for i in 0..n_m {
                let mut row = st.m_conv[j].row(i).to_vec();
                row.push(zeta_coeff * self.support[i]);
                rows.push(row);
                rhs.push(
                    x_set.offsets()[i] - self.cfg.delta - st.m_x[i] - m_free[i] - h2 * self.support[i],
                );
            }
        }
        let state_rows = rows.len();

        let v_set = self.plant.command_set();
        for i in 0..v_set.n_rows() {
            let mut row = v_set.normals().row(i).to_vec();
            row.push(0.0);
            rows.push(row);
            rhs.push(v_set.offsets()[i] - dot(v_set.normals().row(i), &st.v_k));
        }
        for i in 0..ms.u_mat.rows() {
            let mut row = ms.u_mat.row(i).to_vec();
            row.push(-ms.u[i]);
            rows.push(row);
            rhs.push(0.0);
        }
        let mut zrow = vec![0.0; n_v];
        zrow.push(-1.0);
        rows.push(zrow);
        rhs.push(0.0);

        if let Some(v1) = &self.v1 {
            for i in 0..v1.n_rows() {
                let mut row = v1.normals().row(i).to_vec();
                row.push(0.0);
                rows.push(row);
                // A command outside V₁′ may not move further out, which keeps
                // δv = 0 feasible.
                rhs.push((v1.offsets()[i] - dot(v1.normals().row(i), &st.v_k)).max(0.0));
            }
        }

        if self.cfg.scalar_mode && self.checks_deviation() {
            let s = (r[0] - st.v_k[0]).signum();
            let s = if r[0] == st.v_k[0] { 0.0 } else { s };
            rows.push(vec![-s, 0.0]);
            rhs.push(0.0);
            rows.push(vec![-g.lambda_v * s, 0.0]);
            rhs.push(g.lambda_w * self.w_max - self.spec.vec_norm(&jump)?);
        }

        let mut h = Matrix::zeros(n_v + 1, n_v + 1);
        h.set_block(0, 0, &self.cfg.s);
        h[(n_v, n_v)] = self.cfg.zeta_weight();
        let diff: Vec<f64> = st.v_k.iter().zip(r).map(|(a, b)| a - b).collect();
        let mut grad = self.cfg.s.mul_vec(&diff);
        grad.push(0.0);
        let a = if rows.is_empty() {
            Matrix::zeros(0, n_v + 1)
        } else {
            Matrix::from_rows(&rows)
        };
        Ok(Assembled {
            qp: QpProblem::new(h, grad, a, rhs)?,
            move_set: ms,
            state_rows,
        })
    }

    /// One governor update at time `t` from the measured state.
    pub fn step(&mut self, t: f64, x_meas: &[f64], r: &[f64]) -> Result<StepRecord> {
        let started = Instant::now();
        let n_v = self.plant.command_dim();
        let v_k = self.state.v_k.clone();
        let cost_before = self.cost(&v_k, r);
        let assembled = self.assemble(x_meas, r)?;
        let rows = assembled.qp.m();
        let outcome = self.solver.solve(&assembled.qp)?;
        let mut record = StepRecord {
            t,
            status: QpStatus::Infeasible,
            v_next: v_k.clone(),
            dv: vec![0.0; n_v],
            zeta: 0.0,
            active_set_size: 0,
            rows,
            iterations: 0,
            cost_before,
            cost_after: cost_before,
            elapsed_s: 0.0,
        };
        match outcome {
            QpOutcome::Infeasible { iterations } => {
                record.iterations = iterations;
                self.last = None;
            }
            QpOutcome::Optimal(sol) => {
                record.iterations = sol.iterations;
                record.active_set_size = sol.active_set.len();
                record.zeta = sol.z[n_v];
                let dv = sol.z[..n_v].to_vec();
                self.last = Some((assembled.qp, sol.z.clone()));
                let dv_norm = self.spec.command_norm(&dv);
                let v_scale = 1.0 + v_k.iter().map(|v| v * v).sum::<f64>().sqrt();
                let v_new: Vec<f64> = v_k.iter().zip(&dv).map(|(a, b)| a + b).collect();
                let cost_new = self.cost(&v_new, r);
                record.status = if dv.iter().map(|d| d * d).sum::<f64>().sqrt() <= 1e-12 * v_scale {
                    QpStatus::Zero
                } else if self.checks_deviation() && !self.cfg.scalar_mode && {
                    let jump: Vec<f64> =
                        x_meas.iter().zip(&self.state.x_k).map(|(a, b)| a - b).collect();
                    self.spec.vec_norm(&jump)?
                        > self.state.gains.deviation_radius(dv_norm, self.w_max) + 1e-12
                } {
                    QpStatus::RejectedDeviation
                } else if self.cfg.convergence_augmentation
                    && cost_new > (cost_before - self.cfg.kappa).max(0.0) + 1e-12
                {
                    QpStatus::RejectedCost
                } else {
                    QpStatus::Accepted
                };
                if record.status == QpStatus::Accepted {
                    self.state = linearize_state(
                        self.plant.as_ref(),
                        &self.spec,
                        &self.certs,
                        &self.cfg,
                        self.kind,
                        &v_new,
                    )?;
                    record.dv = dv;
                    record.v_next = v_new;
                    record.cost_after = cost_new;
                }
            }
        }
        record.elapsed_s = started.elapsed().as_secs_f64();
        Ok(record)
    }
}

fn cell_index(certs: &CertificateTable, v: &[f64]) -> Result<usize> {
    let cell = certs.cell_for(v).ok_or(Error::OutsideAdmissibleSet)?;
    Ok(certs
        .cells
        .iter()
        .position(|c| std::ptr::eq(c, cell))
        .expect("cell borrowed from the table"))
}

fn gains_at(
    plant: &dyn Plant,
    spec: &NormSpec,
    cert: &Certificate,
    kind: GovernorKind,
    v: &[f64],
) -> Result<ErrorGains> {
    let xs = plant.steady_state(v);
    let mu = spec.log_norm(&plant.state_jacobian(&xs, v))?;
    let fv = spec.gain_norm(&plant.command_jacobian(&xs, v))?;
    let mut g = ErrorGains::from_parts(mu, fv, cert)?;
    if kind == GovernorKind::Linear {
        g.gamma_v = 0.0;
        g.gamma_w = 0.0;
    }
    Ok(g)
}

fn linearize_state(
    plant: &dyn Plant,
    spec: &NormSpec,
    certs: &CertificateTable,
    cfg: &GovernorConfig,
    kind: GovernorKind,
    v: &[f64],
) -> Result<GovernorState> {
    let cell = cell_index(certs, v)?;
    let cert = &certs.cells[cell];
    let x_k = plant.steady_state(v);
    let a_k = plant.state_jacobian(&x_k, v);
    let b_k = plant.command_jacobian(&x_k, v);
    let gains = gains_at(plant, spec, cert, kind, v)?;
    let horizon = bounds::horizon(gains.mu_at_v, cfg.dt_check, cfg.tol_t)?;
    let m = plant.state_set().normals();

    let phi1 = linalg::mat_exp(&a_k, cfg.dt_check)?;
    let g1 = linalg::convolution_gain(&a_k, &b_k, cfg.dt_check)?;
    let mut phi = Vec::with_capacity(horizon.steps + 1);
    let mut m_conv = Vec::with_capacity(horizon.steps + 1);
    let mut phi_fv = Vec::with_capacity(horizon.steps + 1);
    let mut p = Matrix::identity(a_k.rows());
    let mut g = Matrix::zeros(b_k.rows(), b_k.cols());
    for j in 0..=horizon.steps {
        if j > 0 {
            // G((j+1)Δ) = φ(Δ)·G(jΔ) + G(Δ)
            g = phi1.matmul(&g).add(&g1);
            p = phi1.matmul(&p);
        }
        phi_fv.push(spec.gain_norm(&p.matmul(&b_k))?);
        m_conv.push(m.matmul(&g));
        phi.push(p.clone());
    }
    Ok(GovernorState {
        v_k: v.to_vec(),
        m_x: m.mul_vec(&x_k),
        x_k,
        a_k,
        b_k,
        gains,
        horizon,
        cell,
        xi: bounds::xi(gains.mu_at_v, cfg.dt_check),
        phi,
        m_conv,
        phi_fv,
    })
}
