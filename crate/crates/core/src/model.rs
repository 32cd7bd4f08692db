//! Plant models: closed-loop dynamics, Jacobians, steady-state map and the
//! admissible state/command polytopes.

use std::f64::consts::FRAC_PI_4;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::norms::NormSpec;

/// `{z | Mz ≤ m}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    normals: Matrix,
    offsets: Vec<f64>,
}

impl Polytope {
    pub fn new(normals: Matrix, offsets: Vec<f64>) -> Result<Self> {
        if normals.rows() != offsets.len() {
            return Err(Error::DimensionMismatch {
                context: "Polytope::new",
                expected: normals.rows(),
                found: offsets.len(),
            });
        }
        if (0..normals.rows()).any(|i| normals.row(i).iter().all(|v| *v == 0.0)) {
            return Err(Error::InvalidArgument("polytope has a zero row".into()));
        }
        if offsets.iter().any(|v| !v.is_finite()) || !normals.is_finite() {
            return Err(Error::NonFinite("Polytope::new"));
        }
        Ok(Self { normals, offsets })
    }

    /// Axis-aligned box `lo ≤ z ≤ hi`, rows ordered `+e₀, −e₀, +e₁, −e₁, …`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::DimensionMismatch {
                context: "Polytope::from_box",
                expected: lo.len(),
                found: hi.len(),
            });
        }
        if lo.iter().zip(hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument("box lower bound exceeds upper bound".into()));
        }
        let n = lo.len();
        let mut normals = Matrix::zeros(2 * n, n);
        let mut offsets = Vec::with_capacity(2 * n);
        for i in 0..n {
            normals[(2 * i, i)] = 1.0;
            normals[(2 * i + 1, i)] = -1.0;
            offsets.push(hi[i]);
            offsets.push(-lo[i]);
        }
        Self::new(normals, offsets)
    }

    pub fn symmetric_box(half_widths: &[f64]) -> Result<Self> {
        let lo: Vec<f64> = half_widths.iter().map(|h| -h).collect();
        Self::from_box(&lo, half_widths)
    }

    pub fn normals(&self) -> &Matrix {
        &self.normals
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn dim(&self) -> usize {
        self.normals.cols()
    }

    pub fn n_rows(&self) -> usize {
        self.normals.rows()
    }

    /// `Mz − m`, positive entries are violations.
    pub fn slack(&self, z: &[f64]) -> Vec<f64> {
        self.normals
            .mul_vec(z)
            .into_iter()
            .zip(&self.offsets)
            .map(|(mz, m)| mz - m)
            .collect()
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        self.slack(z).iter().all(|s| *s <= tol)
    }

    /// Bounds of an axis-aligned box, or `None` if some row is not `±eᵢ`.
    pub fn as_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for r in 0..self.n_rows() {
            let row = self.normals.row(r);
            let nz: Vec<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
            if nz.len() != 1 {
                return None;
            }
            let j = nz[0];
            let bound = self.offsets[r] / row[j];
            if row[j] > 0.0 {
                hi[j] = hi[j].min(bound);
            } else {
                lo[j] = lo[j].max(bound);
            }
        }
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return None;
        }
        Some((lo, hi))
    }
}

/// A pre-stabilized closed-loop plant `ẋ = f(x, v) + w`.
pub trait Plant: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn command_dim(&self) -> usize;
    fn dynamics(&self, x: &[f64], v: &[f64]) -> Vec<f64>;
    fn state_jacobian(&self, x: &[f64], v: &[f64]) -> Matrix;
    fn command_jacobian(&self, x: &[f64], v: &[f64]) -> Matrix;
    /// Equilibrium `x_v(v̄)` for a constant command.
    fn steady_state(&self, v: &[f64]) -> Vec<f64>;
    fn state_set(&self) -> &Polytope;
    fn command_set(&self) -> &Polytope;

    /// State components the additive disturbance acts on.
    fn disturbance_channels(&self) -> Vec<usize> {
        (0..self.state_dim()).collect()
    }

    /// A natural weighted norm for this plant, if it has one.
    fn lyapunov_weight(&self) -> Option<&Matrix> {
        None
    }

    /// Rejects states where the model equations are not valid.
    fn check_state(&self, _x: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// Jacobians at the steady state of `v̄`.
pub fn linearize(plant: &dyn Plant, v_bar: &[f64]) -> Result<(Matrix, Matrix)> {
    if v_bar.len() != plant.command_dim() {
        return Err(Error::DimensionMismatch {
            context: "linearize",
            expected: plant.command_dim(),
            found: v_bar.len(),
        });
    }
    if !plant.command_set().contains(v_bar, 1e-12) {
        return Err(Error::OutsideAdmissibleSet);
    }
    let xs = plant.steady_state(v_bar);
    Ok((plant.state_jacobian(&xs, v_bar), plant.command_jacobian(&xs, v_bar)))
}

/// If `x_v` is affine on the command set, returns `(x₀, L)` with
/// `x_v(v) = x₀ + Lv`.
pub fn affine_steady_state(plant: &dyn Plant) -> Result<(Vec<f64>, Matrix)> {
    let (lo, hi) = plant.command_set().as_box().ok_or(Error::UnsupportedRegion)?;
    let nv = plant.command_dim();
    let n = plant.state_dim();
    let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let xc = plant.steady_state(&center);
    let mut lin = Matrix::zeros(n, nv);
    for j in 0..nv {
        let h = 0.5 * (hi[j] - lo[j]).max(1e-6);
        let mut vp = center.clone();
        vp[j] += h;
        let xp = plant.steady_state(&vp);
        for i in 0..n {
            lin[(i, j)] = (xp[i] - xc[i]) / h;
        }
    }
    let x0: Vec<f64> = (0..n)
        .map(|i| xc[i] - linalg::dot(lin.row(i), &center))
        .collect();
    // probe a few interior points, including ones off the coordinate axes
    let probes = [0.25, -0.5, 0.8, -0.9];
    for (k, s) in probes.iter().enumerate() {
        let v: Vec<f64> = (0..nv)
            .map(|j| {
                let sj = if (j + k) % 2 == 0 { *s } else { -s * 0.7 };
                center[j] + sj * 0.5 * (hi[j] - lo[j])
            })
            .collect();
        let exact = plant.steady_state(&v);
        let pred = lin.mul_vec(&v);
        let scale = 1.0 + linalg::norm_inf_vec(&exact);
        let err = (0..n)
            .map(|i| (exact[i] - x0[i] - pred[i]).abs())
            .fold(0.0, f64::max);
        if !(err <= 1e-9 * scale) {
            return Err(Error::NotAffine);
        }
    }
    Ok((x0, lin))
}

/// Second-order plant with a scalar reference:
/// `ẋ₁ = −0.5 sin x₁ + x₂ + 0.5v + w`, `ẋ₂ = −sin x₁ − 1.5x₂ + v`.
#[derive(Clone, Debug)]
pub struct Example1 {
    states: Polytope,
    commands: Polytope,
}

impl Example1 {
    pub fn new() -> Self {
        let v_max = FRAC_PI_4.sin();
        Self {
            states: Polytope::symmetric_box(&[FRAC_PI_4, 0.2]).expect("valid box"),
            commands: Polytope::symmetric_box(&[v_max]).expect("valid box"),
        }
    }
}

impl Default for Example1 {
    fn default() -> Self {
        Self::new()
    }
}

impl Plant for Example1 {
    fn name(&self) -> &str {
        "example1"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn command_dim(&self) -> usize {
        1
    }

    fn dynamics(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let s = x[0].sin();
        vec![-0.5 * s + x[1] + 0.5 * v[0], -s - 1.5 * x[1] + v[0]]
    }

    fn state_jacobian(&self, x: &[f64], _v: &[f64]) -> Matrix {
        let c = x[0].cos();
        Matrix::from_rows(&[[-0.5 * c, 1.0], [-c, -1.5]])
    }

    fn command_jacobian(&self, _x: &[f64], _v: &[f64]) -> Matrix {
        Matrix::column(&[0.5, 1.0])
    }

    fn steady_state(&self, v: &[f64]) -> Vec<f64> {
        vec![v[0].clamp(-1.0, 1.0).asin(), 0.0]
    }

    fn state_set(&self) -> &Polytope {
        &self.states
    }

    fn command_set(&self) -> &Polytope {
        &self.commands
    }

    fn disturbance_channels(&self) -> Vec<usize> {
        vec![0]
    }
}

/// Parameters of the spacecraft attitude loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacecraftParams {
    /// Principal inertias, kg·m².
    pub inertia: [f64; 3],
    /// Diagonal of the LQR state weight.
    pub q_diag: [f64; 6],
    /// Diagonal of the LQR input weight.
    pub r_diag: [f64; 3],
    /// Bound on |φ|, |θ|, |ψ|, rad.
    pub angle_limit: f64,
    /// Bound on |ωᵢ|, rad/s.
    pub rate_limit: f64,
    /// Commands are limited to `angle_limit − command_margin`.
    pub command_margin: f64,
}

impl Default for SpacecraftParams {
    fn default() -> Self {
        Self {
            inertia: [120.0, 100.0, 80.0],
            q_diag: [1.0; 6],
            r_diag: [1e-3; 3],
            angle_limit: 0.2,
            rate_limit: 0.05,
            command_margin: 0.01,
        }
    }
}

/// Rigid spacecraft with Euler-angle kinematics under LQR attitude control.
///
/// State `x = [φ, θ, ψ, ω₁, ω₂, ω₃]`, command `v = [φ_des, θ_des, ψ_des]`,
/// torque `M = −K(x − [v; 0])` with `K = R⁻¹BᵀP` from the Riccati equation of
/// the double-integrator model linearized at the origin.
#[derive(Clone, Debug)]
pub struct Spacecraft {
    params: SpacecraftParams,
    gain: Matrix,
    riccati: Matrix,
    design_a: Matrix,
    design_b: Matrix,
    states: Polytope,
    commands: Polytope,
}

impl Spacecraft {
    pub fn new(params: SpacecraftParams) -> Result<Self> {
        if params.inertia.iter().any(|j| !(*j > 0.0)) {
            return Err(Error::InvalidArgument("inertias must be positive".into()));
        }
        if params.command_margin >= params.angle_limit {
            return Err(Error::InvalidArgument("command margin swallows the angle limit".into()));
        }
        let mut a = Matrix::zeros(6, 6);
        for i in 0..3 {
            a[(i, i + 3)] = 1.0;
        }
        let mut b = Matrix::zeros(6, 3);
        for i in 0..3 {
            b[(i + 3, i)] = 1.0 / params.inertia[i];
        }
        let q = Matrix::from_diag(&params.q_diag);
        let r = Matrix::from_diag(&params.r_diag);
        let p = linalg::solve_care(&a, &b, &q, &r)?;
        let gain = linalg::inverse(&r)?.matmul(&b.transpose()).matmul(&p);
        let al = params.angle_limit;
        let wl = params.rate_limit;
        let states = Polytope::symmetric_box(&[al, al, al, wl, wl, wl])?;
        let vl = al - params.command_margin;
        let commands = Polytope::symmetric_box(&[vl, vl, vl])?;
        Ok(Self {
            params,
            gain,
            riccati: p,
            design_a: a,
            design_b: b,
            states,
            commands,
        })
    }

    pub fn params(&self) -> &SpacecraftParams {
        &self.params
    }

    /// LQR gain `K`.
    pub fn gain(&self) -> &Matrix {
        &self.gain
    }

    /// Riccati solution `P`.
    pub fn riccati(&self) -> &Matrix {
        &self.riccati
    }

    /// Design model `(A, B)` linearized at the origin.
    pub fn design_model(&self) -> (&Matrix, &Matrix) {
        (&self.design_a, &self.design_b)
    }

    fn torque(&self, x: &[f64], v: &[f64]) -> [f64; 3] {
        let err = [x[0] - v[0], x[1] - v[1], x[2] - v[2], x[3], x[4], x[5]];
        let mut m = [0.0; 3];
        for (i, mi) in m.iter_mut().enumerate() {
            *mi = -linalg::dot(self.gain.row(i), &err);
        }
        m
    }
}

impl Plant for Spacecraft {
    fn name(&self) -> &str {
        "spacecraft"
    }

    fn state_dim(&self) -> usize {
        6
    }

    fn command_dim(&self) -> usize {
        3
    }

    fn dynamics(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let (sphi, cphi) = x[0].sin_cos();
        let (sth, cth) = x[1].sin_cos();
        let (w1, w2, w3) = (x[3], x[4], x[5]);
        let [j1, j2, j3] = self.params.inertia;
        let m = self.torque(x, v);
        let a = sphi * w2 + cphi * w3;
        vec![
            w1 + sth / cth * a,
            cphi * w2 - sphi * w3,
            a / cth,
            (j2 - j3) / j1 * w2 * w3 + m[0] / j1,
            (j3 - j1) / j2 * w3 * w1 + m[1] / j2,
            (j1 - j2) / j3 * w1 * w2 + m[2] / j3,
        ]
    }

    fn state_jacobian(&self, x: &[f64], _v: &[f64]) -> Matrix {
        let (sphi, cphi) = x[0].sin_cos();
        let (sth, cth) = x[1].sin_cos();
        let tth = sth / cth;
        let (w1, w2, w3) = (x[3], x[4], x[5]);
        let [j1, j2, j3] = self.params.inertia;
        let a = sphi * w2 + cphi * w3;
        let da = cphi * w2 - sphi * w3;
        let mut f = Matrix::zeros(6, 6);
        // kinematics
        f[(0, 0)] = tth * da;
        f[(0, 1)] = a / (cth * cth);
        f[(0, 3)] = 1.0;
        f[(0, 4)] = tth * sphi;
        f[(0, 5)] = tth * cphi;
        f[(1, 0)] = -a;
        f[(1, 4)] = cphi;
        f[(1, 5)] = -sphi;
        f[(2, 0)] = da / cth;
        f[(2, 1)] = a * sth / (cth * cth);
        f[(2, 4)] = sphi / cth;
        f[(2, 5)] = cphi / cth;
        // gyroscopic coupling
        f[(3, 4)] = (j2 - j3) / j1 * w3;
        f[(3, 5)] = (j2 - j3) / j1 * w2;
        f[(4, 3)] = (j3 - j1) / j2 * w3;
        f[(4, 5)] = (j3 - j1) / j2 * w1;
        f[(5, 3)] = (j1 - j2) / j3 * w2;
        f[(5, 4)] = (j1 - j2) / j3 * w1;
        // feedback
        let inertia = [j1, j2, j3];
        for i in 0..3 {
            for j in 0..6 {
                f[(3 + i, j)] -= self.gain[(i, j)] / inertia[i];
            }
        }
        f
    }

    fn command_jacobian(&self, _x: &[f64], _v: &[f64]) -> Matrix {
        let mut fv = Matrix::zeros(6, 3);
        for i in 0..3 {
            for j in 0..3 {
                fv[(3 + i, j)] = self.gain[(i, j)] / self.params.inertia[i];
            }
        }
        fv
    }

    fn steady_state(&self, v: &[f64]) -> Vec<f64> {
        vec![v[0], v[1], v[2], 0.0, 0.0, 0.0]
    }

    fn state_set(&self) -> &Polytope {
        &self.states
    }

    fn command_set(&self) -> &Polytope {
        &self.commands
    }

    fn disturbance_channels(&self) -> Vec<usize> {
        vec![3, 4, 5]
    }

    fn lyapunov_weight(&self) -> Option<&Matrix> {
        Some(&self.riccati)
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x[1].abs() >= 1.0 {
            return Err(Error::StateOutOfDomain(format!(
                "pitch {:.4} rad approaches the Euler-angle singularity",
                x[1]
            )));
        }
        Ok(())
    }
}

/// Linear plant `ẋ = Ax + Bv` with Hurwitz `A`. Useful as a reference case:
/// linearization is exact, so every prediction-error constant vanishes.
#[derive(Clone, Debug)]
pub struct LinearPlant {
    a: Matrix,
    b: Matrix,
    dc_gain: Matrix,
    states: Polytope,
    commands: Polytope,
    channels: Vec<usize>,
}

impl LinearPlant {
    pub fn new(a: Matrix, b: Matrix, states: Polytope, commands: Polytope) -> Result<Self> {
        if !a.is_square() || b.rows() != a.rows() {
            return Err(Error::DimensionMismatch {
                context: "LinearPlant::new",
                expected: a.rows(),
                found: b.rows(),
            });
        }
        if states.dim() != a.rows() || commands.dim() != b.cols() {
            return Err(Error::DimensionMismatch {
                context: "LinearPlant::new",
                expected: a.rows(),
                found: states.dim(),
            });
        }
        let dc_gain = linalg::inverse(&a)?.matmul(&b).scale(-1.0);
        let channels = (0..a.rows()).collect();
        Ok(Self {
            a,
            b,
            dc_gain,
            states,
            commands,
            channels,
        })
    }

    pub fn with_disturbance_channels(mut self, channels: Vec<usize>) -> Self {
        self.channels = channels;
        self
    }
}

impl Plant for LinearPlant {
    fn name(&self) -> &str {
        "linear"
    }

    fn state_dim(&self) -> usize {
        self.a.rows()
    }

    fn command_dim(&self) -> usize {
        self.b.cols()
    }

    fn dynamics(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let ax = self.a.mul_vec(x);
        let bv = self.b.mul_vec(v);
        ax.iter().zip(&bv).map(|(p, q)| p + q).collect()
    }

    fn state_jacobian(&self, _x: &[f64], _v: &[f64]) -> Matrix {
        self.a.clone()
    }

    fn command_jacobian(&self, _x: &[f64], _v: &[f64]) -> Matrix {
        self.b.clone()
    }

    fn steady_state(&self, v: &[f64]) -> Vec<f64> {
        self.dc_gain.mul_vec(v)
    }

    fn state_set(&self) -> &Polytope {
        &self.states
    }

    fn command_set(&self) -> &Polytope {
        &self.commands
    }

    fn disturbance_channels(&self) -> Vec<usize> {
        self.channels.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceShape {
    Ball,
    Box,
}

/// How disturbance samples are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    /// Fresh truncated-Gaussian sample on every integration step.
    TruncatedGaussian,
    /// Constant extreme point of the set in the given channel direction.
    Constant { direction: Vec<f64> },
}

/// What `DisturbanceSpec::bound` measures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundFrame {
    /// Euclidean radius of the channel-space ball, or box half width.
    #[default]
    Physical,
    /// Largest governor-norm value over the set; the set is the physical
    /// ball or box scaled to meet it.
    Governor,
}

/// Set-bounded additive disturbance acting on selected state channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub bound: f64,
    #[serde(default)]
    pub frame: BoundFrame,
    pub shape: DisturbanceShape,
    /// σ as a fraction of `bound`.
    #[serde(default = "default_sigma_ratio")]
    pub sigma_ratio: f64,
    pub channels: Vec<usize>,
    #[serde(default = "default_mode")]
    pub mode: DisturbanceMode,
}

fn default_sigma_ratio() -> f64 {
    0.5
}

fn default_mode() -> DisturbanceMode {
    DisturbanceMode::TruncatedGaussian
}

impl DisturbanceSpec {
    pub fn none(channels: Vec<usize>) -> Self {
        Self {
            bound: 0.0,
            frame: BoundFrame::Physical,
            shape: DisturbanceShape::Ball,
            sigma_ratio: default_sigma_ratio(),
            channels,
            mode: default_mode(),
        }
    }

    pub fn ball(bound: f64, channels: Vec<usize>) -> Self {
        Self {
            bound,
            frame: BoundFrame::Physical,
            shape: DisturbanceShape::Ball,
            sigma_ratio: default_sigma_ratio(),
            channels,
            mode: default_mode(),
        }
    }

    /// The same set with its bound expressed in the physical frame.
    pub fn resolved(&self, n: usize, spec: &NormSpec) -> Result<DisturbanceSpec> {
        let mut out = self.clone();
        out.frame = BoundFrame::Physical;
        if self.frame == BoundFrame::Governor && self.bound > 0.0 && !self.channels.is_empty() {
            let mut unit = out.clone();
            unit.bound = 1.0;
            out.bound = self.bound / unit.governor_bound(n, spec)?;
        }
        Ok(out)
    }

    pub fn embed(&self, n: usize, values: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; n];
        for (c, v) in self.channels.iter().zip(values) {
            w[*c] = *v;
        }
        w
    }

    /// `w_max = sup ‖w‖` over the disturbance set, in the governor's norm.
    pub fn governor_bound(&self, n: usize, spec: &NormSpec) -> Result<f64> {
        if self.bound == 0.0 || self.channels.is_empty() {
            return Ok(0.0);
        }
        if self.frame == BoundFrame::Governor {
            return Ok(self.bound);
        }
        if let Some(c) = self.channels.iter().find(|c| **c >= n) {
            return Err(Error::InvalidArgument(format!("disturbance channel {c} out of range")));
        }
        let k = self.channels.len();
        match self.shape {
            DisturbanceShape::Ball => {
                let mut embed = Matrix::zeros(n, k);
                for (j, c) in self.channels.iter().enumerate() {
                    embed[(*c, j)] = 1.0;
                }
                let gain = match spec.kind() {
                    crate::norms::NormKind::L2 => 1.0,
                    crate::norms::NormKind::WeightedP => spec.gain_norm(&embed)?,
                    crate::norms::NormKind::L1 => (k as f64).sqrt(),
                    crate::norms::NormKind::Linf => 1.0,
                };
                Ok(self.bound * gain)
            }
            DisturbanceShape::Box => {
                let mut best: f64 = 0.0;
                for mask in 0..(1u64 << k) {
                    let vals: Vec<f64> = (0..k)
                        .map(|j| if mask >> j & 1 == 1 { self.bound } else { -self.bound })
                        .collect();
                    best = best.max(spec.vec_norm(&self.embed(n, &vals))?);
                }
                Ok(best)
            }
        }
    }
}
