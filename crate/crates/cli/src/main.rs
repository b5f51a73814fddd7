use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use repsim_core::bench::{bench_he, extrapolate_with, TimingTable};
use repsim_core::harness::{audit, load_scenario, replay, run, Report, RunOptions};
use repsim_core::he::{BackendKind, HeParams};
use repsim_core::identity::AuthoritySnapshot;
use repsim_core::protocol::EventLog;

#[derive(Parser)]
#[command(name = "repsim", version, about = "Encrypted reputation system simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Sim,
    Lattice,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Sim => BackendKind::Simulation,
            Backend::Lattice => BackendKind::Lattice,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write the report and event log.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "sim")]
        backend: Backend,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[arg(long, default_value = "events.jsonl")]
        log: PathBuf,
        /// Also write the authority snapshot, secrets included.
        #[arg(long)]
        authority_out: Option<PathBuf>,
    },
    /// Audit an event log.
    Audit {
        #[arg(long)]
        log: PathBuf,
        /// Authority snapshot enabling the unlinkability checks.
        #[arg(long)]
        reveal_authority: Option<PathBuf>,
    },
    /// Recompute the report from an event log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Report to compare against; a difference is an error.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the homomorphic operations.
    Bench {
        /// Homomorphic parameter file; defaults apply when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "timings.json")]
        out: PathBuf,
    },
    /// Project capacity from a timing table.
    Extrapolate {
        #[arg(long)]
        timings: PathBuf,
        #[arg(long)]
        businesses: u64,
        /// Ratings per business per day.
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        no_self_rating: bool,
        #[arg(long)]
        screen_feedback: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn emit<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", serde_json::to_string_pretty(value)?)?;
            Ok(())
        }
    }
}

fn read_log(path: &Path) -> Result<EventLog> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(EventLog::from_jsonl(&text)?)
}

/// Exit status: 0 clean, 2 audit findings.
fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            backend,
            out,
            log,
            authority_out,
        } => {
            let s = load_scenario(&scenario)?;
            let r = run(
                &s,
                &RunOptions {
                    seed,
                    backend: Some(backend.into()),
                },
            )?;
            write_json(&out, &r.report)?;
            fs::write(&log, r.log.to_jsonl()).with_context(|| format!("writing {}", log.display()))?;
            if let Some(p) = authority_out {
                write_json(&p, &r.authority)?;
            }
            eprintln!(
                "{} events, {} log lines, {} findings",
                s.events.len(),
                r.log.lines.len(),
                r.report.audit.findings.len()
            );
            Ok(if r.report.has_findings() { 2 } else { 0 })
        }
        Command::Audit { log, reveal_authority } => {
            let log = read_log(&log)?;
            let secrets: Option<AuthoritySnapshot> = reveal_authority.as_deref().map(read_json).transpose()?;
            let a = audit(&log, secrets.as_ref())?;
            emit(None, &a)?;
            Ok(if a.findings.is_empty() { 0 } else { 2 })
        }
        Command::Replay { log, report, out } => {
            let r = replay(&read_log(&log)?)?;
            if let Some(p) = report {
                let original: Report = read_json(&p)?;
                if original != r {
                    bail!("replayed report differs from {}", p.display());
                }
            }
            emit(out.as_deref(), &r)?;
            Ok(if r.has_findings() { 2 } else { 0 })
        }
        Command::Bench {
            params,
            iters,
            seed,
            out,
        } => {
            let params: HeParams = match params {
                Some(p) => read_json(&p)?,
                None => HeParams::default(),
            };
            let t = bench_he(params, iters, seed)?;
            if t.simulation_only {
                eprintln!("lattice backend not built; timings are for the simulation backend");
            }
            write_json(&out, &t)?;
            Ok(0)
        }
        Command::Extrapolate {
            timings,
            businesses,
            rate,
            no_self_rating,
            screen_feedback,
            out,
        } => {
            let t: TimingTable = read_json(&timings)?;
            let r = extrapolate_with(&t, businesses, rate, !no_self_rating, screen_feedback)?;
            emit(out.as_deref(), &r)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    // Usage errors exit 1; clap's own code 2 is reserved for findings.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
