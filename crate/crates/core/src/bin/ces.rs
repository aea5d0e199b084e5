//! Command-line front end: runs a session or one of the experiments and
//! writes its table as CSV or JSON.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use ces_core::analysis::{
    curve_blind_bound, experiment_attack, experiment_biased_modulation, fringe_scan,
    run_full_session, sweep_smod_surface, ternary_check, AnalysisError, AttackExperiment,
    BiasExperiment, OutputFormat, SurfaceGrid, Table, TernaryExperiment,
};
use ces_core::protocol::{ProtocolError, SessionConfig, Verdict};
use ces_core::quantum::Visibility;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_ABORT: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "ces", version, about = "Controlled entanglement source simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with the session or experiment parameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Session rounds, or the per-cell budget of an experiment.
    #[arg(long, global = true)]
    rounds: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full protocol session; exit status reports the verdict.
    Session {
        /// Also write the coincidence records to this file.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// S_mod over an entropy × mixed-state grid (test rounds per cell via --rounds).
    Surface,
    /// Sessions under biased repeated modulation (test rounds per configuration via --rounds).
    Bias,
    /// Expected |U| of a blind guess against the 1/√2 threshold.
    Bound {
        #[arg(long, default_value_t = 20)]
        n_max: u32,
    },
    /// Interferometer output fringes.
    Fringe {
        #[arg(long, default_value_t = 1.0)]
        visibility: f64,
        #[arg(long, default_value_t = 0.0)]
        offset: f64,
        #[arg(long, default_value_t = 64)]
        points: usize,
    },
    /// Tap and memory attacks (session rounds of the memory attacks via --rounds).
    Attack,
    /// Trit statistics of the mapping rules (keystream bits via --rounds).
    Ternary {
        /// Mixed-state share for the target-p rule.
        #[arg(long)]
        target_p: Option<f64>,
    },
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// A table to write and the exit status to report.
struct Outcome {
    table: Table,
    status: u8,
}

impl Outcome {
    fn ok(table: Table) -> Self {
        Outcome { table, status: EXIT_OK }
    }
}

fn session(common: &Common, transcript: Option<&Path>) -> anyhow::Result<Outcome> {
    let mut config: SessionConfig = match &common.config {
        None => SessionConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SessionConfig::from_toml_str(&text)?
        }
    };
    if let Some(s) = common.seed {
        config.master_seed = s;
    }
    if let Some(r) = common.rounds {
        config.rounds = r;
    }
    config.validate()?;
    let run = run_full_session(&config)?;
    if let Some(p) = transcript {
        write_output(Some(p), &run.transcript_dump())?;
    }
    let status = match run.verdict() {
        Verdict::Certified => EXIT_OK,
        Verdict::Abort => EXIT_ABORT,
    };
    Ok(Outcome { table: run.table, status })
}

fn dispatch(cli: &Cli) -> anyhow::Result<Outcome> {
    let c = &cli.common;
    let config = c.config.as_deref();
    let seed = c.seed.unwrap_or(0);
    Ok(match &cli.command {
        Command::Session { transcript } => return session(c, transcript.as_deref()),
        Command::Surface => {
            let mut grid: SurfaceGrid = load(config)?;
            if let Some(r) = c.rounds {
                grid.test_rounds_per_cell = r;
            }
            Outcome::ok(sweep_smod_surface(&grid, seed)?)
        }
        Command::Bias => {
            let mut exp: BiasExperiment = load(config)?;
            if let Some(r) = c.rounds {
                exp.test_rounds = r;
            }
            Outcome::ok(experiment_biased_modulation(&exp, seed)?)
        }
        Command::Bound { n_max } => {
            if config.is_some() || c.rounds.is_some() {
                bail!("bound takes neither --config nor --rounds");
            }
            Outcome::ok(curve_blind_bound(*n_max, seed)?)
        }
        Command::Fringe { visibility, offset, points } => {
            if config.is_some() || c.rounds.is_some() {
                bail!("fringe takes neither --config nor --rounds");
            }
            let v = Visibility::new(*visibility)?;
            Outcome::ok(fringe_scan(v, *offset, *points, seed)?)
        }
        Command::Attack => {
            let mut exp: AttackExperiment = load(config)?;
            if let Some(r) = c.rounds {
                exp.memory_rounds = r;
            }
            Outcome::ok(experiment_attack(&exp, seed)?)
        }
        Command::Ternary { target_p } => {
            let mut exp: TernaryExperiment = load(config)?;
            if let Some(r) = c.rounds {
                exp.bits = usize::try_from(r)?;
            }
            if let Some(p) = target_p {
                exp.target_p = *p;
            }
            Outcome::ok(ternary_check(&exp, seed)?)
        }
    })
}

fn exit_status(err: &anyhow::Error) -> u8 {
    let protocol = err.downcast_ref::<ProtocolError>().or_else(|| match err.downcast_ref::<AnalysisError>() {
        Some(AnalysisError::Protocol(p)) => Some(p),
        _ => None,
    });
    match protocol {
        Some(ProtocolError::Inconclusive { .. }) => EXIT_INCONCLUSIVE,
        Some(ProtocolError::ErrorRateAbort(_) | ProtocolError::DisclosureExceeded { .. }) => EXIT_ABORT,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = dispatch(&cli).and_then(|outcome| {
        let text = outcome.table.render(cli.common.format.into());
        write_output(cli.common.out.as_deref(), &text)?;
        Ok(outcome.status)
    });
    match result {
        Ok(status) => ExitCode::from(status),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
