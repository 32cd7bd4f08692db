//! Fixed-step closed-loop simulation, disturbance generation and constraint
//! auditing.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{self, CertificateTable, CertifyOptions};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::governor::{Governor, GovernorConfig, GovernorKind, QpStatus, StepRecord};
use crate::linalg::{dot, Matrix};
use crate::model::{
    BoundFrame, DisturbanceMode, DisturbanceShape, DisturbanceSpec, Example1, LinearPlant, Plant, Polytope,
    Spacecraft, SpacecraftParams,
};
use crate::norms::NormSpec;

/// One classical Runge–Kutta step with `v` and `w` held over the step.
pub fn rk4_step(plant: &dyn Plant, x: &[f64], v: &[f64], w: &[f64], h: f64) -> Vec<f64> {
    let f = |x: &[f64]| -> Vec<f64> {
        let mut d = plant.dynamics(x, v);
        for (di, wi) in d.iter_mut().zip(w) {
            *di += wi;
        }
        d
    };
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = f(x);
    let k2 = f(&axpy(0.5 * h, &k1));
    let k3 = f(&axpy(0.5 * h, &k2));
    let k4 = f(&axpy(h, &k3));
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Sampled signals on a uniform grid `t_i = i·h`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub commands: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn step_count(t_end: f64, h: f64) -> Result<usize> {
    if !(h > 0.0) || !(t_end >= 0.0) || !h.is_finite() || !t_end.is_finite() {
        return Err(Error::InvalidArgument("need h > 0 and a finite, non-negative span".into()));
    }
    let n = (t_end / h).round();
    if (n * h - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "span {t_end} is not a multiple of the step {h}"
        )));
    }
    Ok(n as usize)
}

/// Integrates `ẋ = f(x, v(t)) + w_i` over `[0, t_end]` with fixed step `h`;
/// `w` is sampled once per step and held.
pub fn integrate(
    plant: &dyn Plant,
    x0: &[f64],
    v: impl Fn(f64) -> Vec<f64>,
    w: impl Fn(usize, f64) -> Vec<f64>,
    t_end: f64,
    h: f64,
) -> Result<Trajectory> {
    let steps = step_count(t_end, h)?;
    let n = plant.state_dim();
    let mut traj = Trajectory::default();
    let mut x = x0.to_vec();
    for i in 0..=steps {
        let t = i as f64 * h;
        let vi = v(t);
        let wi = if i < steps { w(i, t) } else { vec![0.0; n] };
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.commands.push(vi.clone());
        traj.disturbances.push(wi.clone());
        if i < steps {
            x = rk4_step(plant, &x, &vi, &wi, h);
            if x.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite("integrate"));
            }
        }
    }
    Ok(traj)
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64, bound: f64) -> f64 {
    if bound == 0.0 || sigma == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sigma).expect("positive finite sigma");
    loop {
        let s: f64 = normal.sample(rng);
        if s.abs() <= bound {
            return s;
        }
    }
}

/// Draws `count` disturbance vectors of dimension `n`, deterministic in `seed`.
///
/// Ball: uniform direction, magnitude `|N(0, σ²)|` truncated at the bound.
/// Box: independent truncated Gaussians per channel. `σ = sigma_ratio·bound`.
pub fn sample_disturbance(spec: &DisturbanceSpec, n: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if spec.frame != BoundFrame::Physical {
        return Err(Error::InvalidArgument("resolve the disturbance bound before sampling".into()));
    }
    if !(spec.bound >= 0.0) || !spec.bound.is_finite() {
        return Err(Error::InvalidArgument("disturbance bound must be finite and non-negative".into()));
    }
    if let Some(c) = spec.channels.iter().find(|c| **c >= n) {
        return Err(Error::InvalidArgument(format!("disturbance channel {c} out of range")));
    }
    let k = spec.channels.len();
    if spec.bound == 0.0 || k == 0 {
        return Ok(vec![vec![0.0; n]; count]);
    }
    if let DisturbanceMode::Constant { direction } = &spec.mode {
        if direction.len() != k {
            return Err(Error::DimensionMismatch {
                context: "constant disturbance direction",
                expected: k,
                found: direction.len(),
            });
        }
        let values: Vec<f64> = match spec.shape {
            DisturbanceShape::Ball => {
                let norm = dot(direction, direction).sqrt();
                if norm == 0.0 {
                    return Err(Error::InvalidArgument("zero disturbance direction".into()));
                }
                direction.iter().map(|d| spec.bound * d / norm).collect()
            }
            DisturbanceShape::Box => direction
                .iter()
                .map(|d| if *d == 0.0 { 0.0 } else { spec.bound * d.signum() })
                .collect(),
        };
        return Ok(vec![spec.embed(n, &values); count]);
    }
    if !(spec.sigma_ratio > 0.0) {
        return Err(Error::InvalidArgument("sigma_ratio must be positive".into()));
    }
    let sigma = spec.sigma_ratio * spec.bound;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let values: Vec<f64> = match spec.shape {
            DisturbanceShape::Ball => {
                let dir: Vec<f64> = loop {
                    let g: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = dot(&g, &g).sqrt();
                    if norm > 1e-12 {
                        break g.into_iter().map(|c| c / norm).collect();
                    }
                };
                let mag = truncated_normal(&mut rng, sigma, spec.bound).abs();
                dir.into_iter().map(|d| d * mag).collect()
            }
            DisturbanceShape::Box => (0..k)
                .map(|_| truncated_normal(&mut rng, sigma, spec.bound))
                .collect(),
        };
        out.push(spec.embed(n, &values));
    }
    Ok(out)
}

/// Piecewise-constant reference: `value` applies from `t` onward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub t: f64,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Example1,
    Spacecraft {
        #[serde(default)]
        params: Option<SpacecraftParams>,
    },
    Linear {
        a: Matrix,
        b: Matrix,
        /// Half widths of the symmetric state box.
        state_box: Vec<f64>,
        /// Half widths of the symmetric command box.
        command_box: Vec<f64>,
        #[serde(default)]
        disturbance_channels: Option<Vec<usize>>,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<Arc<dyn Plant>> {
        Ok(match self {
            ModelSpec::Example1 => Arc::new(Example1::new()),
            ModelSpec::Spacecraft { params } => {
                Arc::new(Spacecraft::new(params.clone().unwrap_or_default())?)
            }
            ModelSpec::Linear {
                a,
                b,
                state_box,
                command_box,
                disturbance_channels,
            } => {
                let mut p = LinearPlant::new(
                    a.clone(),
                    b.clone(),
                    Polytope::symmetric_box(state_box)?,
                    Polytope::symmetric_box(command_box)?,
                )?;
                if let Some(c) = disturbance_channels {
                    p = p.with_disturbance_channels(c.clone());
                }
                Arc::new(p)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormChoice {
    L1,
    L2,
    Linf,
    /// The plant's own Lyapunov weight (the Riccati solution for the spacecraft).
    Lyapunov,
    Weighted { p: Matrix },
}

impl NormChoice {
    pub fn build(&self, plant: &dyn Plant) -> Result<NormSpec> {
        match self {
            NormChoice::L1 => Ok(NormSpec::l1()),
            NormChoice::L2 => Ok(NormSpec::l2()),
            NormChoice::Linf => Ok(NormSpec::linf()),
            NormChoice::Lyapunov => {
                let p = plant.lyapunov_weight().ok_or_else(|| {
                    Error::InvalidArgument(format!("model {} has no Lyapunov weight", plant.name()))
                })?;
                NormSpec::weighted(p)
            }
            NormChoice::Weighted { p } => NormSpec::weighted(p),
        }
    }
}

fn default_density() -> usize {
    21
}
fn default_inflation() -> f64 {
    1.05
}
fn default_cells() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationSpec {
    #[serde(default = "default_density")]
    pub density: usize,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
    #[serde(default = "default_cells")]
    pub cells_per_dim: usize,
}

impl Default for CertificationSpec {
    fn default() -> Self {
        Self {
            density: default_density(),
            inflation: default_inflation(),
            cells_per_dim: default_cells(),
        }
    }
}

/// A complete closed-loop experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: ModelSpec,
    pub norm: NormChoice,
    pub governor: GovernorConfig,
    pub disturbance: DisturbanceSpec,
    #[serde(default)]
    pub certification: CertificationSpec,
    pub reference: Vec<ReferenceStep>,
    pub v0: Vec<f64>,
    /// Defaults to the steady state of `v0`.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    pub duration: f64,
    /// Integration step; `dt_sample / 10` when absent.
    #[serde(default)]
    pub h: Option<f64>,
}

impl Scenario {
    pub fn step_size(&self) -> f64 {
        self.h.unwrap_or(self.governor.dt_sample / 10.0)
    }

    pub fn reference_at(&self, t: f64) -> &[f64] {
        let mut current = &self.reference[0].value;
        for s in &self.reference {
            if s.t <= t + 1e-12 {
                current = &s.value;
            }
        }
        current
    }

    pub fn validate(&self, plant: &dyn Plant) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n_v = plant.command_dim();
        if self.reference.is_empty() || self.reference[0].t != 0.0 {
            return bad("reference must start at t = 0".into());
        }
        if self.reference.windows(2).any(|w| w[1].t <= w[0].t) {
            return bad("reference times must increase".into());
        }
        if self.reference.iter().any(|s| s.value.len() != n_v) || self.v0.len() != n_v {
            return bad(format!("commands must have {n_v} components"));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != plant.state_dim() {
                return bad(format!("x0 must have {} components", plant.state_dim()));
            }
        }
        let h = self.step_size();
        if !(h > 0.0) || h > self.governor.dt_sample / 10.0 * (1.0 + 1e-12) {
            return bad("integration step must be positive and at most dt_sample/10".into());
        }
        let ratio = (self.governor.dt_sample / h).round();
        if (ratio * h - self.governor.dt_sample).abs() > 1e-9 * self.governor.dt_sample {
            return bad("dt_sample must be a multiple of the integration step".into());
        }
        step_count(self.duration, h).map_err(|e| Error::Config(e.to_string()))?;
        self.governor
            .validate(n_v)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Builds the plant and norm and certifies the command partition.
    pub fn prepare(&self, execution: Execution) -> Result<Prepared> {
        let plant = self.model.build()?;
        let spec = self.norm.build(plant.as_ref())?;
        let partition = bounds::uniform_partition(plant.command_set(), self.certification.cells_per_dim)?;
        let opts = CertifyOptions {
            density: self.certification.density,
            inflation: self.certification.inflation,
            execution,
        };
        let cells = bounds::certify(plant.as_ref(), &spec, &partition, &opts)?;
        let certs = CertificateTable::new(plant.name(), spec.kind(), cells);
        self.prepare_with(plant, spec, Arc::new(certs))
    }

    /// Like [`Scenario::prepare`] with an existing certificate table.
    pub fn prepare_with(&self, plant: Arc<dyn Plant>, spec: NormSpec, certs: Arc<CertificateTable>) -> Result<Prepared> {
        self.validate(plant.as_ref())?;
        let w_max = self.disturbance.governor_bound(plant.state_dim(), &spec)?;
        let disturbance = self.disturbance.resolved(plant.state_dim(), &spec)?;
        Ok(Prepared {
            scenario: self.clone(),
            disturbance,
            plant,
            spec,
            certs,
            w_max,
        })
    }
}

/// A scenario with its plant, norm and certificates resolved.
#[derive(Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    /// Disturbance set with its bound in the physical frame.
    pub disturbance: DisturbanceSpec,
    pub plant: Arc<dyn Plant>,
    pub spec: NormSpec,
    pub certs: Arc<CertificateTable>,
    /// Disturbance bound in the governor norm.
    pub w_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GovernorChoice {
    RgNl,
    RgL,
    None,
}

impl GovernorChoice {
    pub const ALL: [GovernorChoice; 3] = [GovernorChoice::RgNl, GovernorChoice::RgL, GovernorChoice::None];

    pub fn label(self) -> &'static str {
        match self {
            GovernorChoice::RgNl => "rg_nl",
            GovernorChoice::RgL => "rg_l",
            GovernorChoice::None => "none",
        }
    }

    fn kind(self) -> Option<GovernorKind> {
        match self {
            GovernorChoice::RgNl => Some(GovernorKind::Nonlinear),
            GovernorChoice::RgL => Some(GovernorKind::Linear),
            GovernorChoice::None => None,
        }
    }
}

/// Result of one closed-loop run.
#[derive(Clone, Debug)]
pub struct ClosedLoop {
    pub choice: GovernorChoice,
    pub seed: u64,
    pub trajectory: Trajectory,
    /// One record per governor sample.
    pub records: Vec<StepRecord>,
    /// For each trajectory row, the record governing it.
    pub row_record: Vec<usize>,
}

impl ClosedLoop {
    pub fn final_command(&self) -> &[f64] {
        self.trajectory.commands.last().expect("non-empty run")
    }

    /// `‖v − r‖²_S` just after each accepted command change.
    pub fn jump_costs(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.status == QpStatus::Accepted)
            .map(|r| r.cost_after)
            .collect()
    }

    /// First sample time after which the command stays within `tol` of `target`.
    pub fn settling_time(&self, target: &[f64], tol: f64) -> Option<f64> {
        let within = |v: &[f64]| v.iter().zip(target).all(|(a, b)| (a - b).abs() <= tol);
        let mut settled = None;
        for r in &self.records {
            if within(&r.v_next) {
                settled.get_or_insert(r.t);
            } else {
                settled = None;
            }
        }
        settled
    }

    pub fn mean_step_seconds(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.elapsed_s).sum::<f64>() / self.records.len() as f64
    }
}

/// Runs one closed loop: the governor (or pass-through) updates the command at
/// every sample instant, including `t = 0`, and RK4 integrates in between.
pub fn run_closed_loop(prep: &Prepared, choice: GovernorChoice, seed: u64) -> Result<ClosedLoop> {
    let sc = &prep.scenario;
    let plant = prep.plant.as_ref();
    let n = plant.state_dim();
    let h = sc.step_size();
    let steps = step_count(sc.duration, h)?;
    let ratio = (sc.governor.dt_sample / h).round() as usize;
    let w = sample_disturbance(&prep.disturbance, n, steps, seed)?;
    let mut x = sc.x0.clone().unwrap_or_else(|| plant.steady_state(&sc.v0));
    let mut governor = match choice.kind() {
        Some(kind) => Some(Governor::new(
            prep.plant.clone(),
            prep.spec.clone(),
            prep.certs.clone(),
            sc.governor.clone(),
            kind,
            prep.w_max,
            &sc.v0,
        )?),
        None => None,
    };
    let mut v = sc.v0.clone();
    let mut run = ClosedLoop {
        choice,
        seed,
        trajectory: Trajectory::default(),
        records: Vec::with_capacity(steps / ratio + 1),
        row_record: Vec::with_capacity(steps + 1),
    };
    for i in 0..=steps {
        let t = i as f64 * h;
        if i % ratio == 0 {
            let r = sc.reference_at(t);
            let rec = match governor.as_mut() {
                Some(g) => g.step(t, &x, r)?,
                None => StepRecord {
                    t,
                    status: QpStatus::Passthrough,
                    v_next: r.to_vec(),
                    dv: r.iter().zip(&v).map(|(a, b)| a - b).collect(),
                    zeta: 0.0,
                    active_set_size: 0,
                    rows: 0,
                    iterations: 0,
                    cost_before: 0.0,
                    cost_after: 0.0,
                    elapsed_s: 0.0,
                },
            };
            v = rec.v_next.clone();
            run.records.push(rec);
        }
        let wi = if i < steps { w[i].clone() } else { vec![0.0; n] };
        run.trajectory.times.push(t);
        run.trajectory.states.push(x.clone());
        run.trajectory.commands.push(v.clone());
        run.trajectory.disturbances.push(wi.clone());
        run.row_record.push(run.records.len() - 1);
        if i < steps {
            x = rk4_step(plant, &x, &v, &wi, h);
            if x.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite("run_closed_loop"));
            }
            plant.check_state(&x)?;
        }
    }
    Ok(run)
}

/// Independent runs over `seeds`, in seed order.
pub fn run_seeds(prep: &Prepared, choice: GovernorChoice, seeds: &[u64], execution: Execution) -> Vec<Result<ClosedLoop>> {
    exec::map_slice(execution, seeds, |&s| run_closed_loop(prep, choice, s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowAudit {
    pub row: usize,
    /// `max (a·x − b)` over the grid; negative means the row was never tight.
    pub max_violation: f64,
    pub first_violation_time: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: Vec<RowAudit>,
    /// Grid points at which any row is violated.
    pub violations: usize,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.violations == 0
    }
}

/// Tolerance below which `a·x − b` counts as satisfied.
pub const AUDIT_TOL: f64 = 1e-9;

/// Checks `points[i] ∈ set` at every grid time.
pub fn audit_points(times: &[f64], points: &[Vec<f64>], set: &Polytope) -> AuditReport {
    let mut rows: Vec<RowAudit> = (0..set.n_rows())
        .map(|row| RowAudit {
            row,
            max_violation: f64::NEG_INFINITY,
            first_violation_time: None,
            count: 0,
        })
        .collect();
    let mut violations = 0;
    for (t, x) in times.iter().zip(points) {
        let mut any = false;
        for (ra, i) in rows.iter_mut().zip(0..) {
            let excess = dot(set.normals().row(i), x) - set.offsets()[i];
            ra.max_violation = ra.max_violation.max(excess);
            if excess > AUDIT_TOL {
                any = true;
                ra.count += 1;
                ra.first_violation_time.get_or_insert(*t);
            }
        }
        if any {
            violations += 1;
        }
    }
    AuditReport { rows, violations }
}

pub fn audit(traj: &Trajectory, states: &Polytope) -> AuditReport {
    audit_points(&traj.times, &traj.states, states)
}

/// Writes `t,x1..xn,v1..vnv,w1..wn,qp_status,zeta`, one row per grid point.
pub fn write_csv<W: Write>(out: W, run: &ClosedLoop) -> Result<()> {
    let traj = &run.trajectory;
    let (n, n_v) = match (traj.states.first(), traj.commands.first()) {
        (Some(x), Some(v)) => (x.len(), v.len()),
        _ => return Err(Error::InvalidArgument("empty trajectory".into())),
    };
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=n_v).map(|i| format!("v{i}")));
    header.extend((1..=n).map(|i| format!("w{i}")));
    header.push("qp_status".into());
    header.push("zeta".into());
    wtr.write_record(&header).map_err(csv_err)?;
    for i in 0..traj.len() {
        let rec = &run.records[run.row_record[i]];
        let mut row = vec![traj.times[i].to_string()];
        row.extend(traj.states[i].iter().map(f64::to_string));
        row.extend(traj.commands[i].iter().map(f64::to_string));
        row.extend(traj.disturbances[i].iter().map(f64::to_string));
        row.push(rec.status.as_str().into());
        row.push(rec.zeta.to_string());
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

/// Deterministic per-run seed stream for Monte Carlo sweeps.
pub fn derive_seeds(base: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..count).map(|_| rng.random()).collect()
}
