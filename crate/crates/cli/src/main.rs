use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rg_core::exec::{self, Execution};
use rg_core::harness::{self, exit, Overrides, RunConfig};
use rg_core::{Error, Result};

/// Reference governor experiments: certificates, closed-loop runs,
/// baseline comparison and trace audits.
#[derive(Parser, Debug)]
#[command(name = "rg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify the command partition and write certificates.json.
    Certify(Common),
    /// Run each configured governor over each seed; writes CSV traces and audit.json.
    Run(Common),
    /// Run rg_nl, rg_l and none on one seed; prints and writes compare.json.
    Compare(Common),
    /// Re-audit the CSV traces in the output directory; writes trace_audit.json.
    Audit(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seeds as `a,b,..`; items may be half-open ranges `lo..hi`.
    #[arg(long)]
    seeds: Option<String>,
    /// Governors as a comma list of rg_nl, rg_l, none.
    #[arg(long)]
    governors: Option<String>,
    /// Certification grid density per dimension.
    #[arg(long)]
    density: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        let overrides = Overrides {
            seeds: self.seeds.as_deref().map(harness::parse_seeds).transpose()?,
            governors: self.governors.as_deref().map(harness::parse_governors).transpose()?,
            density: self.density,
        };
        overrides.apply(&mut cfg)?;
        Ok(cfg)
    }
}

/// Honors `RG_THREADS`; a value of 1 selects the sequential path.
fn execution() -> Result<Execution> {
    let Ok(raw) = std::env::var("RG_THREADS") else {
        return Ok(Execution::default());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Config(format!("RG_THREADS must be a positive integer, got '{raw}'")))?;
    if threads == 1 {
        return Ok(Execution::Sequential);
    }
    exec::init_threads(threads);
    Ok(Execution::default())
}

fn run(cli: Cli) -> Result<()> {
    let execution = execution()?;
    match cli.command {
        Command::Certify(c) => {
            let cfg = c.load()?;
            let table = harness::cmd_certify(&cfg, &c.out, execution)?;
            for (i, cell) in table.cells.iter().enumerate() {
                println!(
                    "cell {i}: mu_e {:.6} (grid max {:.6}) eta_x {:.6} eta_v {:.6}",
                    cell.mu_e, cell.mu_e_raw, cell.eta_x, cell.eta_v
                );
            }
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            let summary = harness::cmd_run(&cfg, &c.out, execution)?;
            for r in &summary.runs {
                println!(
                    "{} seed {}: violations {} final_err {:.3e} jumps {} mean_step {:.4} ms",
                    r.governor.label(),
                    r.seed,
                    r.violations,
                    r.final_error,
                    r.jumps,
                    r.timing.mean_s * 1e3
                );
            }
            println!("runs {} total violations {}", summary.runs.len(), summary.total_violations);
        }
        Command::Compare(c) => {
            let cfg = c.load()?;
            print!("{}", harness::cmd_compare(&cfg, &c.out, execution)?.render());
        }
        Command::Audit(c) => {
            let cfg = c.load()?;
            let audits = harness::cmd_audit(&cfg, &c.out)?;
            for a in &audits {
                println!("{}: samples {} violations {}", a.file, a.samples, a.report.violations);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rg: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
