//! Experiment front-end: versioned run configuration, certificate files,
//! closed-loop runs, baseline comparison and trace auditing.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bounds::{CertificateTable, CERTIFICATE_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::sim::{self, AuditReport, ClosedLoop, GovernorChoice, Prepared, RowAudit, Scenario, Trajectory};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

pub const CERTIFICATE_FILE: &str = "certificates.json";
pub const RUN_SUMMARY_FILE: &str = "audit.json";
pub const COMPARE_FILE: &str = "compare.json";
pub const TRACE_AUDIT_FILE: &str = "trace_audit.json";

/// Tolerance on the final command error reported as "converged".
pub const SETTLE_TOL: f64 = 1e-3;

/// Exit status contract of the command-line front-end.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CERTIFICATION: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const RUNTIME: i32 = 4;
}

/// Maps a failure to its exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::CertificationFailed { .. } => exit::CERTIFICATION,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::DimensionMismatch { .. } => exit::CONFIG,
        _ => exit::RUNTIME,
    }
}

fn default_governors() -> Vec<GovernorChoice> {
    vec![GovernorChoice::RgNl]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// On-disk experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub scenario: Scenario,
    #[serde(default = "default_governors")]
    pub governors: Vec<GovernorChoice>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Precomputed certificate table; certified on the fly when absent.
    /// Relative paths resolve against the config file's directory.
    #[serde(default)]
    pub certificates: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            name: None,
            scenario,
            governors: default_governors(),
            seeds: default_seeds(),
            certificates: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(c) = &cfg.certificates {
            if c.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.certificates = Some(base.join(c));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.governors.is_empty() {
            return Err(Error::Config("no governors requested".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds requested".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| "scenario".into())
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub governors: Option<Vec<GovernorChoice>>,
    pub density: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(g) = &self.governors {
            cfg.governors = g.clone();
        }
        if let Some(d) = self.density {
            cfg.scenario.certification.density = d;
        }
        cfg.validate()
    }
}

/// Parses `a,b,..` where each item is a seed or a half-open range `lo..hi`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = |item: &str| Error::Config(format!("bad seed item '{item}'"));
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((lo, hi)) = item.split_once("..") {
            let lo: u64 = lo.trim().parse().map_err(|_| bad(item))?;
            let hi: u64 = hi.trim().parse().map_err(|_| bad(item))?;
            if hi <= lo {
                return Err(bad(item));
            }
            out.extend(lo..hi);
        } else {
            out.push(item.parse().map_err(|_| bad(item))?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty seed list".into()));
    }
    Ok(out)
}

pub fn parse_governors(text: &str) -> Result<Vec<GovernorChoice>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            GovernorChoice::ALL
                .into_iter()
                .find(|g| g.label() == s)
                .ok_or_else(|| Error::Config(format!("unknown governor '{s}'")))
        })
        .collect()
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

/// Certifies the scenario's command partition and writes the table.
pub fn cmd_certify(cfg: &RunConfig, out: &Path, execution: Execution) -> Result<CertificateTable> {
    cfg.validate()?;
    let prep = cfg.scenario.prepare(execution)?;
    ensure_dir(out)?;
    write_json(&out.join(CERTIFICATE_FILE), prep.certs.as_ref())?;
    Ok(prep.certs.as_ref().clone())
}

/// Loads the configured certificate table or certifies afresh.
pub fn prepare(cfg: &RunConfig, execution: Execution) -> Result<Prepared> {
    cfg.validate()?;
    let Some(path) = &cfg.certificates else {
        return cfg.scenario.prepare(execution);
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let table: CertificateTable = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let plant = cfg.scenario.model.build()?;
    let spec = cfg.scenario.norm.build(plant.as_ref())?;
    if table.schema_version != CERTIFICATE_SCHEMA_VERSION {
        return Err(Error::Config(format!("unsupported certificate schema {}", table.schema_version)));
    }
    if table.model != plant.name() || table.norm != spec.kind() || table.cells.is_empty() {
        return Err(Error::Config(format!(
            "certificate table is for {} / {:?}, scenario needs {} / {:?}",
            table.model,
            table.norm,
            plant.name(),
            spec.kind()
        )));
    }
    if let Some((i, c)) = table.cells.iter().enumerate().find(|(_, c)| !(c.mu_e < 0.0)) {
        return Err(Error::CertificationFailed { cell: i, mu_e: c.mu_e });
    }
    cfg.scenario.prepare_with(plant, spec, Arc::new(table))
}

/// Per-step governor wall-clock statistics in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub steps: usize,
    pub mean_s: f64,
    pub p95_s: f64,
    pub max_s: f64,
}

impl StepTiming {
    pub fn of(run: &ClosedLoop) -> Self {
        let mut t: Vec<f64> = run.records.iter().map(|r| r.elapsed_s).collect();
        if t.is_empty() {
            return Self::default();
        }
        t.sort_by(f64::total_cmp);
        let idx = ((t.len() as f64 * 0.95).ceil() as usize).clamp(1, t.len()) - 1;
        Self {
            steps: t.len(),
            mean_s: run.mean_step_seconds(),
            p95_s: t[idx],
            max_s: t[t.len() - 1],
        }
    }
}

/// Audit and convergence summary of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub governor: GovernorChoice,
    pub seed: u64,
    pub csv: String,
    pub violations: usize,
    pub rows: Vec<RowAudit>,
    pub final_command: Vec<f64>,
    /// Largest component of `v(end) − r(end)`.
    pub final_error: f64,
    pub settling_time: Option<f64>,
    pub jumps: usize,
    pub status_counts: BTreeMap<String, usize>,
    pub timing: StepTiming,
}

impl RunReport {
    pub fn new(prep: &Prepared, run: &ClosedLoop, csv: String) -> Self {
        let report = sim::audit(&run.trajectory, prep.plant.state_set());
        let sc = &prep.scenario;
        let target = sc.reference_at(sc.duration);
        let final_error = run
            .final_command()
            .iter()
            .zip(target)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let mut status_counts = BTreeMap::new();
        for r in &run.records {
            *status_counts.entry(r.status.as_str().to_string()).or_insert(0) += 1;
        }
        Self {
            governor: run.choice,
            seed: run.seed,
            csv,
            violations: report.violations,
            rows: report.rows,
            final_command: run.final_command().to_vec(),
            final_error,
            settling_time: run.settling_time(target, SETTLE_TOL),
            jumps: run.jump_costs().len(),
            status_counts,
            timing: StepTiming::of(run),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub name: String,
    pub model: String,
    pub w_max: f64,
    pub runs: Vec<RunReport>,
    pub total_violations: usize,
}

impl RunSummary {
    pub fn clean(&self) -> bool {
        self.total_violations == 0
    }
}

pub fn csv_name(choice: GovernorChoice, seed: u64) -> String {
    format!("{}_seed{seed}.csv", choice.label())
}

fn batch_size(execution: Execution) -> usize {
    #[cfg(feature = "parallel")]
    let threads = if execution.is_parallel() { rayon::current_num_threads() } else { 1 };
    #[cfg(not(feature = "parallel"))]
    let threads = {
        let _ = execution;
        1
    };
    2 * threads.max(1)
}

/// Runs every requested governor over every seed, writing one CSV per run and
/// a combined audit summary. Runs execute in parallel batches; files are
/// written by the calling thread.
pub fn cmd_run(cfg: &RunConfig, out: &Path, execution: Execution) -> Result<RunSummary> {
    let prep = prepare(cfg, execution)?;
    ensure_dir(out)?;
    let mut runs = Vec::new();
    for &choice in &cfg.governors {
        for chunk in cfg.seeds.chunks(batch_size(execution)) {
            for result in sim::run_seeds(&prep, choice, chunk, execution) {
                let run = result?;
                let name = csv_name(choice, run.seed);
                sim::write_csv(BufWriter::new(File::create(out.join(&name))?), &run)?;
                runs.push(RunReport::new(&prep, &run, name));
            }
        }
    }
    let summary = RunSummary {
        schema_version: CONFIG_SCHEMA_VERSION,
        name: cfg.label(),
        model: prep.plant.name().to_string(),
        w_max: prep.w_max,
        total_violations: runs.iter().map(|r| r.violations).sum(),
        runs,
    };
    write_json(&out.join(RUN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// One line of the baseline comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub governor: GovernorChoice,
    pub violations: usize,
    /// Violation counts per state-constraint row.
    pub row_violations: Vec<usize>,
    pub final_error: f64,
    pub convergence_time: Option<f64>,
    pub jumps: usize,
    pub commands: u64,
    pub timing: StepTiming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn row(&self, choice: GovernorChoice) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.governor == choice)
    }

    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} (seed {})\n{:<8} {:>10} {:>12} {:>12} {:>6} {:>14}\n",
            self.name, self.seed, "governor", "violations", "final_err", "converge_s", "jumps", "mean_step_ms"
        );
        for r in &self.rows {
            let conv = r.convergence_time.map_or_else(|| "-".to_string(), |t| format!("{t:.2}"));
            s.push_str(&format!(
                "{:<8} {:>10} {:>12.3e} {:>12} {:>6} {:>14.4}\n",
                r.governor.label(),
                r.violations,
                r.final_error,
                conv,
                r.jumps,
                r.timing.mean_s * 1e3
            ));
        }
        s
    }
}

/// FNV-1a over the bit patterns of the command trace; equal traces hash
/// equal.
fn command_digest(traj: &Trajectory) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in traj.commands.iter().flatten() {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Runs RG_NL, RG_L and NONE on the first configured seed.
pub fn cmd_compare(cfg: &RunConfig, out: &Path, execution: Execution) -> Result<CompareTable> {
    let prep = prepare(cfg, execution)?;
    ensure_dir(out)?;
    let seed = cfg.seeds[0];
    let results = crate::exec::map_slice(execution, &GovernorChoice::ALL, |&c| sim::run_closed_loop(&prep, c, seed));
    let mut rows = Vec::new();
    for result in results {
        let run = result?;
        let name = csv_name(run.choice, seed);
        sim::write_csv(BufWriter::new(File::create(out.join(&name))?), &run)?;
        let rep = RunReport::new(&prep, &run, name);
        rows.push(CompareRow {
            governor: run.choice,
            violations: rep.violations,
            row_violations: rep.rows.iter().map(|r| r.count).collect(),
            final_error: rep.final_error,
            convergence_time: rep.settling_time,
            jumps: rep.jumps,
            commands: command_digest(&run.trajectory),
            timing: rep.timing,
        });
    }
    let table = CompareTable {
        schema_version: CONFIG_SCHEMA_VERSION,
        name: cfg.label(),
        seed,
        rows,
    };
    write_json(&out.join(COMPARE_FILE), &table)?;
    Ok(table)
}

/// Audit of one CSV trace found in the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceAudit {
    pub file: String,
    pub samples: usize,
    pub report: AuditReport,
}

/// Reads `t` and the `x1..xn` columns of a trace.
pub fn read_trace(path: &Path, n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let bad = |m: String| Error::Config(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| bad(format!("missing column {name}")));
    let t_col = col("t")?;
    let x_cols = (1..=n).map(|i| col(&format!("x{i}"))).collect::<Result<Vec<_>>>()?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("bad number in column {c}")))
        };
        times.push(num(t_col)?);
        states.push(x_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?);
    }
    Ok((times, states))
}

/// Re-audits every `*.csv` trace in `out` against the scenario's state set.
pub fn cmd_audit(cfg: &RunConfig, out: &Path) -> Result<Vec<TraceAudit>> {
    cfg.validate()?;
    let plant = cfg.scenario.model.build()?;
    let entries = fs::read_dir(out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no traces in {}", out.display())));
    }
    let mut audits = Vec::new();
    for f in files {
        let (times, states) = read_trace(&f, plant.state_dim())?;
        audits.push(TraceAudit {
            file: f.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            samples: times.len(),
            report: sim::audit_points(&times, &states, plant.state_set()),
        });
    }
    write_json(&out.join(TRACE_AUDIT_FILE), &audits)?;
    Ok(audits)
}
