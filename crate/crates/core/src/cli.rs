//! Command-line front end: config loading, run orchestration and output files.
//!
//! `trace.csv` columns, in order:
//!
//! * `time`
//! * the global state labels (`V1`, ..., `Ig1`, ..., `I1_2`, ...)
//! * per agent `a`: `mg{a}_xhat_{label}` for each local state, then
//!   `mg{a}_r_{label}` for each residual component
//! * per agent `a`: `mg{a}_alarm` (0 or 1)
//!
//! Floats are written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::DetectionEvent;
use crate::netmodel::BusId;
use crate::sim::{
    run_scenario_with, RunOptions, ScenarioConfig, SeedConfig, SimError, SimulationTrace,
    ValidationError,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("validation error: {0}")]
    Validation(#[from] ValidationError),

    #[error(transparent)]
    Sim(SimError),

    #[error("output error: {0}")]
    Output(#[from] io::Error),
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ConfigInvalid(v) => CliError::Validation(v),
            other => CliError::Sim(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Read { .. } | CliError::Parse(_) | CliError::Validation(_) => EXIT_CONFIG,
            CliError::Sim(_) | CliError::Output(_) => EXIT_RUNTIME,
        }
    }
}

/// Parse and validate a scenario from JSON text.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, CliError> {
    let config: ScenarioConfig = serde_json::from_str(text)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Canonical serialization: fixed field order, shortest round-trip floats.
pub fn write_config(config: &ScenarioConfig) -> String {
    serde_json::to_string_pretty(config).expect("scenario config serializes")
}

/// SHA-256 of the compact canonical serialization, hex encoded.
pub fn config_digest(config: &ScenarioConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("scenario config serializes");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSummary {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSummary {
    pub agent: BusId,
    pub events: Vec<DetectionEvent>,
    /// Residual statistics over the post-warm-up steps.
    pub residuals: Vec<ComponentSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub digest: String,
    pub wall_time: Duration,
    pub steps: usize,
    pub agents: Vec<AgentSummary>,
}

impl RunReport {
    pub fn new(config: &ScenarioConfig, trace: &SimulationTrace, wall_time: Duration) -> Self {
        let from = trace.warmup_steps.min(trace.len());
        let agents = trace
            .agents
            .iter()
            .map(|a| {
                let residuals = a
                    .labels
                    .iter()
                    .enumerate()
                    .map(|(c, label)| {
                        let vals: Vec<f64> = a.residuals.column(c).skip(from).collect();
                        let n = vals.len().max(1) as f64;
                        let mean = vals.iter().sum::<f64>() / n;
                        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        ComponentSummary {
                            label: label.clone(),
                            mean,
                            std: var.sqrt(),
                            max_abs: vals.iter().fold(0.0, |m, v| m.max(v.abs())),
                        }
                    })
                    .collect();
                AgentSummary {
                    agent: a.agent,
                    events: a.events.clone(),
                    residuals,
                }
            })
            .collect();
        RunReport {
            digest: config_digest(config),
            wall_time,
            steps: trace.len().saturating_sub(1),
            agents,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario sha256: {}", self.digest);
        let _ = writeln!(s, "steps: {}", self.steps);
        let _ = writeln!(s, "wall time: {:.3} s", self.wall_time.as_secs_f64());
        for a in &self.agents {
            let _ = writeln!(s);
            let _ = writeln!(s, "agent {}", a.agent);
            if a.events.is_empty() {
                let _ = writeln!(s, "  no detections");
            }
            for e in &a.events {
                let _ = writeln!(
                    s,
                    "  t = {:.4} s  accused {}  via {}  statistic {:.3}",
                    e.time, e.accused_neighbor, e.component, e.statistic
                );
            }
            let _ = writeln!(
                s,
                "  {:<8} {:>14} {:>14} {:>14}",
                "residual", "mean", "std", "max |r|"
            );
            for c in &a.residuals {
                let _ = writeln!(
                    s,
                    "  {:<8} {:>14.6e} {:>14.6e} {:>14.6e}",
                    c.label, c.mean, c.std, c.max_abs
                );
            }
        }
        s
    }
}

fn trace_header(trace: &SimulationTrace) -> Vec<String> {
    let mut cols = vec!["time".to_string()];
    cols.extend(trace.state_labels.iter().cloned());
    for a in &trace.agents {
        let n = a.agent.number();
        cols.extend(a.labels.iter().map(|l| format!("mg{n}_xhat_{l}")));
        cols.extend(a.labels.iter().map(|l| format!("mg{n}_r_{l}")));
    }
    cols.extend(
        trace
            .agents
            .iter()
            .map(|a| format!("mg{}_alarm", a.agent.number())),
    );
    cols
}

pub fn write_trace_csv<W: Write>(trace: &SimulationTrace, out: W) -> io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{}", trace_header(trace).join(","))?;
    for (k, t) in trace.times.iter().enumerate() {
        write!(w, "{t:.16e}")?;
        let rows = std::iter::once(trace.x_true.row(k)).chain(
            trace
                .agents
                .iter()
                .flat_map(|a| [a.x_hat.row(k), a.residuals.row(k)]),
        );
        for row in rows {
            for v in row {
                write!(w, ",{v:.16e}")?;
            }
        }
        for a in &trace.agents {
            write!(w, ",{}", u8::from(a.alarm[k]))?;
        }
        writeln!(w)?;
    }
    w.flush()
}

pub fn write_events_csv<W: Write>(events: &[DetectionEvent], out: W) -> io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "agent,accused_neighbor,component,time,statistic")?;
    for e in events {
        writeln!(
            w,
            "{},{},{},{:.16e},{:.16e}",
            e.agent, e.accused_neighbor, e.component, e.time, e.statistic
        )?;
    }
    w.flush()
}

#[derive(Debug, Parser)]
#[command(
    name = "microgrid-uio",
    version,
    about = "Distributed UIO attack detection for DC microgrids"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write trace.csv, events.csv and report.txt.
    Run(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scenario file (JSON).
    pub config: PathBuf,
    /// Output directory; same as --out.
    pub out_dir: Option<PathBuf>,
    /// Output directory (default: out).
    #[arg(long = "out", conflicts_with = "out_dir")]
    pub out: Option<PathBuf>,
    /// Check the scenario and exit without running.
    #[arg(long)]
    pub validate_only: bool,
    /// Replace all seeds with streams derived from this integer.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Override the step size, seconds.
    #[arg(long)]
    pub ts: Option<f64>,
    /// Do not print the report.
    #[arg(long)]
    pub quiet: bool,
}

impl RunArgs {
    pub fn output_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Load, apply overrides, run and write outputs.
pub fn execute(args: &RunArgs) -> Result<Option<RunReport>, CliError> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed_override {
        config.seeds = SeedConfig::from_master(seed);
    }
    if let Some(ts) = args.ts {
        config.ts = ts;
    }
    config.validate()?;
    if args.validate_only {
        return Ok(None);
    }

    let started = Instant::now();
    let trace = run_scenario_with(
        &config,
        RunOptions {
            parallel_agents: true,
        },
    )?;
    let report = RunReport::new(&config, &trace, started.elapsed());

    let dir = args.output_dir();
    fs::create_dir_all(&dir)?;
    write_trace_csv(&trace, fs::File::create(dir.join("trace.csv"))?)?;
    write_events_csv(&trace.events, fs::File::create(dir.join("events.csv"))?)?;
    fs::write(dir.join("report.txt"), report.render())?;
    Ok(Some(report))
}

/// Entry point shared by the binary and tests; returns the exit code.
pub fn run(cli: Cli) -> u8 {
    match cli.command {
        Command::Run(args) => match execute(&args) {
            Ok(Some(report)) => {
                if !args.quiet {
                    print!("{}", report.render());
                }
                EXIT_OK
            }
            Ok(None) => {
                if !args.quiet {
                    println!("{}: ok", args.config.display());
                }
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let v = CliError::Validation(ValidationError {
            path: "ts".into(),
            reason: "x".into(),
        });
        assert_eq!(v.exit_code(), EXIT_CONFIG);
        let s: CliError = SimError::NegativeVariance(-1.0).into();
        assert_eq!(s.exit_code(), EXIT_RUNTIME);
        let c: CliError = SimError::ConfigInvalid(ValidationError {
            path: "ts".into(),
            reason: "x".into(),
        })
        .into();
        assert_eq!(c.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = ScenarioConfig::three_bus_attack();
        let mut b = a.clone();
        assert_eq!(config_digest(&a), config_digest(&b));
        b.attacks[0].bias = 151.0;
        assert_ne!(config_digest(&a), config_digest(&b));
        assert_eq!(config_digest(&a).len(), 64);
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(
            parse_config("{ not json"),
            Err(CliError::Parse(_))
        ));
        assert!(matches!(
            parse_config(r#"{"network": 3}"#),
            Err(CliError::Parse(_))
        ));
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "microgrid-uio",
            "run",
            "s.json",
            "--out",
            "dir",
            "--seed-override",
            "42",
            "--ts",
            "2e-4",
            "--quiet",
            "--validate-only",
        ])
        .unwrap();
        let Command::Run(a) = cli.command;
        assert_eq!(a.output_dir(), PathBuf::from("dir"));
        assert_eq!(a.seed_override, Some(42));
        assert_eq!(a.ts, Some(2e-4));
        assert!(a.quiet && a.validate_only);

        let cli = Cli::try_parse_from(["microgrid-uio", "run", "s.json", "o"]).unwrap();
        let Command::Run(a) = cli.command;
        assert_eq!(a.output_dir(), PathBuf::from("o"));
    }
}
