use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use magtrap_cli::commands::{analyze, fit_trap, render, reproduce, simulate, track};
use magtrap_cli::config::LoadedConfig;
use magtrap_cli::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "magtrap", version, about = "Magneto-gravitational trap simulation and analysis")]
struct Cli {
    /// Scenario configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed; overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write SVG plots of every PSD.
    #[arg(long, global = true)]
    svg: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Raw,
    Pgm,
}

#[derive(Subcommand)]
enum Command {
    /// Fit multipole coefficients to the configured mode frequencies.
    FitTrap,
    /// Simulate trials at every configured pressure.
    Simulate,
    /// Fit PSDs of trajectory CSVs, a pressure directory or a simulate output.
    Analyze {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Locate the particle in a PGM directory or a raw stream sidecar.
    Track {
        #[arg(long)]
        frames: PathBuf,
    },
    /// Render a trajectory CSV to camera frames.
    Render {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, value_enum, default_value = "raw")]
        format: Format,
    },
    /// Run the built-in reproduction and print a pass/fail report.
    ReproducePaper {
        /// Also write every simulated trajectory.
        #[arg(long)]
        keep_trajectories: bool,
    },
}

fn load(cli: &Cli) -> Result<LoadedConfig> {
    match &cli.config {
        Some(p) => LoadedConfig::from_path(p),
        None => Err(CliError::Config("--config is required for this command".into())),
    }
}

fn load_or_empty(cli: &Cli) -> Result<LoadedConfig> {
    match &cli.config {
        Some(p) => LoadedConfig::from_path(p),
        None => LoadedConfig::from_str(""),
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::FitTrap => {
            let c = load(cli)?;
            fit_trap::run(&c, c.seed(cli.seed), &cli.out)
        }
        Command::Simulate => {
            let c = load(cli)?;
            simulate::run(&c, c.seed(cli.seed), &cli.out)
        }
        Command::Analyze { paths } => {
            let c = load_or_empty(cli)?;
            analyze::run(&c, c.seed(cli.seed), &cli.out, paths, cli.svg)
        }
        Command::Track { frames } => {
            let c = load_or_empty(cli)?;
            track::run(&c, c.seed(cli.seed), &cli.out, frames)
        }
        Command::Render { trajectory, format } => {
            let c = load_or_empty(cli)?;
            let f = match format {
                Format::Raw => render::FrameFormat::Raw,
                Format::Pgm => render::FrameFormat::Pgm,
            };
            render::run(&c, c.seed(cli.seed), &cli.out, trajectory, f)
        }
        Command::ReproducePaper { keep_trajectories } => {
            let text = match &cli.config {
                Some(p) => Some(
                    std::fs::read_to_string(p)
                        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
                ),
                None => None,
            };
            let opts = reproduce::Options {
                keep_trajectories: *keep_trajectories,
                svg: cli.svg,
            };
            let report = reproduce::run(text.as_deref(), cli.seed, &cli.out, opts)?;
            match report.failures() {
                0 => Ok(()),
                n => Err(CliError::Numerical(format!("{n} check(s) failed"))),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
