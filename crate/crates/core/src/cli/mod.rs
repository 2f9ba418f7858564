//! Command-line front end. [`run`] parses arguments, loads and checks the
//! configuration, dispatches, and writes CSV reports plus a manifest.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::error::Error;
use crate::simulator::Scaling;
use config::{ExperimentConfig, Overrides};
use report::{write_reports, Manifest, Status};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;

const DEFAULT_OUT: &str = "ldpnn-out";

#[derive(Debug, Parser)]
#[command(
    name = "ldpnn",
    version,
    about = "Deviation rate functions for Gaussian neural networks"
)]
pub struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Report directory (default: the config's `output`, else ./ldpnn-out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    quad_order: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    mc_samples: Option<usize>,
    #[arg(long, global = true, value_name = "NAME")]
    activation: Option<String>,
    /// Moderate-deviation exponent; implies `--scaling md`.
    #[arg(long, global = true, value_name = "FLOAT")]
    rho: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Log-moment-generating function with quadrature and Monte Carlo values.
    Kappa,
    /// Rate functions of deep networks.
    Rate {
        #[command(subcommand)]
        which: RateCommand,
    },
    /// Limiting covariance chain, layer 0 included.
    Recursion {
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Empirical tail probabilities across the width schedule.
    Simulate(TailArgs),
    /// Empirical tails with fitted and predicted slopes.
    Validate(TailArgs),
    /// Shallow networks and their input derivatives.
    Shallow {
        #[command(subcommand)]
        which: ShallowCommand,
    },
}

#[derive(Debug, Subcommand)]
enum RateCommand {
    KappaStar,
    Chain,
    Output,
    Md,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScalingArg {
    Ld,
    Md,
}

#[derive(Debug, Args)]
struct TailArgs {
    #[arg(long, value_enum)]
    scaling: Option<ScalingArg>,
}

#[derive(Debug, Args)]
struct PatternArgs {
    /// Derivative orders `s_1,...,s_n2`, each 0 or 1.
    #[arg(long, value_name = "S1,S2,..")]
    pattern: Option<String>,
}

#[derive(Debug, Subcommand)]
enum ShallowCommand {
    Rate(PatternArgs),
    MdRate(PatternArgs),
    Validate {
        #[command(flatten)]
        pattern: PatternArgs,
        #[command(flatten)]
        tail: TailArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Kappa => "kappa",
            Command::Rate { which } => match which {
                RateCommand::KappaStar => "rate kappa-star",
                RateCommand::Chain => "rate chain",
                RateCommand::Output => "rate output",
                RateCommand::Md => "rate md",
            },
            Command::Recursion { .. } => "recursion",
            Command::Simulate(_) => "simulate",
            Command::Validate(_) => "validate",
            Command::Shallow { which } => match which {
                ShallowCommand::Rate(_) => "shallow rate",
                ShallowCommand::MdRate(_) => "shallow md-rate",
                ShallowCommand::Validate { .. } => "shallow validate",
            },
        }
    }

    fn scaling(&self) -> Option<ScalingArg> {
        match self {
            Command::Simulate(t) | Command::Validate(t) => t.scaling,
            Command::Shallow {
                which: ShallowCommand::Validate { tail, .. },
            } => tail.scaling,
            _ => None,
        }
    }

    fn pattern(&self) -> Option<&str> {
        match self {
            Command::Shallow { which } => match which {
                ShallowCommand::Rate(p) | ShallowCommand::MdRate(p) => p.pattern.as_deref(),
                ShallowCommand::Validate { pattern, .. } => pattern.pattern.as_deref(),
            },
            _ => None,
        }
    }
}

fn parse_pattern(s: &str) -> crate::Result<Vec<u8>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u8>()
                .map_err(|_| Error::InvalidConfig(format!("bad pattern entry `{t}`")))
        })
        .collect()
}

fn overrides(cli: &Cli, cfg: &ExperimentConfig) -> crate::Result<Overrides> {
    let mut o = Overrides {
        seed: cli.seed,
        quad_order: cli.quad_order,
        mc_samples: cli.mc_samples,
        activation: cli.activation.clone(),
        rho: cli.rho,
        ..Default::default()
    };
    if let Command::Recursion { depth } = &cli.command {
        o.depth = *depth;
    }
    match cli.command.scaling() {
        Some(ScalingArg::Ld) => {
            if cli.rho.is_some() {
                return Err(Error::InvalidConfig(
                    "--rho conflicts with --scaling ld".into(),
                ));
            }
            o.ld = true;
        }
        Some(ScalingArg::Md) if o.rho.is_none() => {
            o.rho = Some(match cfg.scaling {
                Scaling::Md { rho } => rho,
                Scaling::Ld => 0.5,
            });
        }
        _ => {}
    }
    if let Some(p) = cli.command.pattern() {
        o.pattern = Some(parse_pattern(p)?);
    }
    Ok(o)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonConvergence { .. } => EXIT_NONCONVERGENCE,
        _ => EXIT_CONFIG,
    }
}

fn load(cli: &Cli) -> crate::Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    let o = overrides(cli, &cfg)?;
    cfg.apply(&o)?;
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cmd: &Command, cfg: &ExperimentConfig) -> crate::Result<commands::Outcome> {
    match cmd {
        Command::Kappa => commands::kappa(cfg),
        Command::Rate { which } => match which {
            RateCommand::KappaStar => commands::kappa_star(cfg),
            RateCommand::Chain => commands::chain(cfg),
            RateCommand::Output => commands::output(cfg),
            RateCommand::Md => commands::md(cfg),
        },
        Command::Recursion { .. } => commands::recursion(cfg),
        Command::Simulate(_) => commands::simulate(cfg),
        Command::Validate(_) => commands::validate(cfg),
        Command::Shallow { which } => match which {
            ShallowCommand::Rate(_) => commands::shallow_rate(cfg, false),
            ShallowCommand::MdRate(_) => commands::shallow_rate(cfg, true),
            ShallowCommand::Validate { .. } => commands::shallow_validate(cfg),
        },
    }
}

/// Runs the tool on `args` (program name first) and returns the exit code.
/// Nothing is written unless the configuration loads and validates.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    let start = Instant::now();
    let result = dispatch(&cli.command, &cfg);
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        schema: config::SCHEMA_VERSION,
        command: cli.command.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        status: Status::Ok,
        files: Vec::new(),
        diagnostics: json!({}),
        wall_time_seconds: 0.0,
    };
    let (tables, code) = match result {
        Ok(outcome) => {
            manifest.files = outcome
                .tables
                .iter()
                .map(|t| format!("{}.csv", t.name))
                .collect();
            manifest.diagnostics = outcome.diagnostics;
            (outcome.tables, EXIT_OK)
        }
        Err(e @ Error::NonConvergence { .. }) => {
            eprintln!("error: {e}");
            manifest.status = Status::NonConvergence;
            if let Error::NonConvergence {
                what,
                iterations,
                grad_norm,
            } = &e
            {
                manifest.diagnostics = json!({
                    "error": e.to_string(),
                    "what": what,
                    "iterations": iterations,
                    "grad_norm": report::num(*grad_norm),
                });
            }
            (Vec::new(), EXIT_NONCONVERGENCE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    if let Err(e) = write_reports(&out, &tables, &manifest) {
        eprintln!("error: cannot write reports to {}: {e}", out.display());
        return EXIT_IO;
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_subcommands_and_global_flags() {
        let cli = Cli::try_parse_from([
            "ldpnn",
            "shallow",
            "validate",
            "--pattern",
            "1,0",
            "--scaling",
            "md",
            "--seed",
            "7",
        ])
        .unwrap();
        assert_eq!(cli.command.name(), "shallow validate");
        assert_eq!(cli.command.pattern(), Some("1,0"));
        assert_eq!(cli.seed, Some(7));
        assert!(Cli::try_parse_from(["ldpnn", "rate", "nope"]).is_err());
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!(parse_pattern("1, 0,1").unwrap(), vec![1, 0, 1]);
        assert!(parse_pattern("x").is_err());
    }

    #[test]
    fn missing_config_is_a_config_error() {
        assert_eq!(run(["ldpnn", "kappa"]), EXIT_CONFIG);
    }
}
