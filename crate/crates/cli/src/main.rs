//! `optomech`: batch front end for derivations, sweeps, simulations and
//! analyses of measurement-induced optomechanical entanglement.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod error;
mod run;
mod svg;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Format, Mode, Preset, RawConfig, RunConfig};
use error::{CliError, CliResult, EXIT_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "optomech", version, about = "Cooling, correlation and entanglement-witness runs for remote optomechanical oscillators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of `[section]` blocks with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set jumps.trajectories=16`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Parameter preset: `paper` (SI units) or `desk` (scaled units).
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the derived cooling and flux quantities.
    Derive,
    /// Derived quantities over a range of one system parameter.
    Sweep,
    /// Quantum-jump ensemble with click records, g2 and witness estimates.
    SimulateJumps,
    /// Heterodyne record (QSD or classical surrogate) and g2 reconstruction.
    SimulateHeterodyne,
    /// Estimates from existing click or heterodyne records.
    Analyze {
        /// Record files; repeat for several click records.
        #[arg(long)]
        input: Vec<PathBuf>,
    },
    /// Violation map max(1 - R_m, 0) with its boundary curve.
    WitnessMap,
    /// Repeat a run from its manifest.
    Rerun { manifest: PathBuf },
}

fn read_config(path: &PathBuf) -> CliResult<RawConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RawConfig::parse(&text, &path.display().to_string())
}

fn execute(cli: Cli) -> CliResult<()> {
    let (mut raw, mode) = match &cli.command {
        Command::Rerun { manifest } => {
            let raw = read_config(manifest)?;
            if cli.config.is_some() {
                return Err(CliError::Config("rerun takes its settings from the manifest; drop --config".into()));
            }
            let mode = RunConfig::declared_mode(&raw)?
                .ok_or_else(|| CliError::Config(format!("{} has no run.mode", manifest.display())))?;
            (raw, mode)
        }
        cmd => {
            let raw = match &cli.config {
                Some(p) => read_config(p)?,
                None => RawConfig::default(),
            };
            let mode = match cmd {
                Command::Derive => Mode::Derive,
                Command::Sweep => Mode::Sweep,
                Command::SimulateJumps => Mode::SimulateJumps,
                Command::SimulateHeterodyne => Mode::SimulateHeterodyne,
                Command::Analyze { .. } => Mode::Analyze,
                Command::WitnessMap => Mode::WitnessMap,
                Command::Rerun { .. } => unreachable!(),
            };
            (raw, mode)
        }
    };
    for s in &cli.sets {
        raw.set_override(s)?;
    }
    if let Some(p) = &cli.preset {
        Preset::parse(p)?;
        raw.set("system", "preset", p);
    }
    if let Some(seed) = cli.seed {
        raw.set("run", "seed", &seed.to_string());
    }
    if let Some(f) = cli.format {
        raw.set("run", "format", f.extension());
    }
    if let Command::Analyze { input } = &cli.command {
        if !input.is_empty() {
            let joined: Vec<String> = input.iter().map(|p| p.display().to_string()).collect();
            raw.set("analyze", "input", &joined.join(","));
        }
    }
    let cfg = RunConfig::resolve(&raw, mode)?;
    run::run(&cfg, &cli.out_dir)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let err = CliError::Config(e.kind().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
