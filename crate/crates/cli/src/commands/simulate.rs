use std::io::Write;
use std::path::{Path, PathBuf};

use magtrap::dynamics::{simulate_trials, DynamicsError, SimOutput};
use magtrap::trapstatics::TrapModel;
use serde::{Deserialize, Serialize};

use crate::config::{LoadedConfig, ScenarioConfig};
use crate::error::{CliError, Result};
use crate::output::{pressure_dir, write_json, write_with, RunManifest};

/// Metadata stored next to the trials of one pressure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub pressure_mbar: f64,
    pub temperature_k: f64,
    pub kappa_hz_per_mbar: f64,
    pub mass_pg: f64,
    pub first_seed: u64,
    pub n_trials: usize,
    pub sample_rate_hz: f64,
    pub mode_frequencies_hz: [f64; 3],
    pub equilibrium_um: [f64; 3],
    pub failed_trials: Vec<String>,
}

pub struct PressureRun {
    pub pressure_mbar: f64,
    pub first_seed: u64,
    pub outputs: Vec<std::result::Result<SimOutput, DynamicsError>>,
}

impl PressureRun {
    pub fn successes(&self) -> Vec<&SimOutput> {
        self.outputs.iter().filter_map(|r| r.as_ref().ok()).collect()
    }

    pub fn failures(&self) -> Vec<String> {
        self.outputs
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().err().map(|e| format!("trial {i}: {e}")))
            .collect()
    }
}

/// Seed of the first trial at the `index`-th pressure; trial `i` uses
/// `first_seed + i`.
pub fn pressure_seed(seed: u64, index: usize, n_trials: usize) -> u64 {
    seed.wrapping_add((index * n_trials) as u64)
}

pub fn run_pressures(cfg: &ScenarioConfig, trap: &TrapModel, seed: u64) -> Result<Vec<PressureRun>> {
    if cfg.gas.pressures_mbar.is_empty() {
        return Err(CliError::Config("gas.pressures_mbar is empty".into()));
    }
    let particle = cfg.particle()?;
    let modes = trap
        .mode_frequencies()
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let fb = cfg.feedback(&modes, particle.mass);
    let n = cfg.sim.n_trials;
    let mut runs = Vec::new();
    for (j, &p) in cfg.gas.pressures_mbar.iter().enumerate() {
        let first_seed = pressure_seed(seed, j, n);
        let sim = cfg.sim_config(first_seed);
        let outputs = simulate_trials(trap, &particle, &cfg.gas(p), &fb, &sim, n);
        if let Some(Err(e @ DynamicsError::Config(_))) = outputs.first() {
            return Err(CliError::Config(e.to_string()));
        }
        runs.push(PressureRun {
            pressure_mbar: p,
            first_seed,
            outputs,
        });
    }
    Ok(runs)
}

fn write_forces(out: &SimOutput, w: &mut Vec<u8>) -> std::io::Result<()> {
    writeln!(w, "t,fx_n,fy_n,fz_n")?;
    for (i, f) in out.forces.iter().enumerate() {
        writeln!(w, "{},{},{},{}", out.truth.time(i), f.x, f.y, f.z)?;
    }
    Ok(())
}

pub fn trial_name(i: usize) -> String {
    format!("trial_{i:03}.csv")
}

/// Write `run.json` and, if `trials` is set, every trial's CSVs; returns
/// the files written.
pub fn write_pressure(
    cfg: &ScenarioConfig,
    trap: &TrapModel,
    run: &PressureRun,
    dir: &Path,
    trials: bool,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let measured = cfg.has_feedback() || cfg.has_detection_noise();
    let forces = cfg.has_feedback();
    for (i, r) in run.outputs.iter().enumerate().filter(|_| trials) {
        let Ok(o) = r else { continue };
        let p = dir.join("trajectories").join(trial_name(i));
        write_with(&p, |w| o.truth.write_csv(w))?;
        files.push(p);
        if measured {
            let p = dir.join("measured").join(trial_name(i));
            write_with(&p, |w| o.measured.write_csv(w))?;
            files.push(p);
        }
        if forces {
            let p = dir.join("forces").join(trial_name(i));
            write_with(&p, |w| write_forces(o, w))?;
            files.push(p);
        }
    }
    let modes = trap
        .mode_frequencies()
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let y_eq = trap
        .find_equilibrium()
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let info = RunInfo {
        pressure_mbar: run.pressure_mbar,
        temperature_k: cfg.gas.temperature_k,
        kappa_hz_per_mbar: cfg.gas.kappa_hz_per_mbar,
        mass_pg: cfg.mass_pg().unwrap_or(f64::NAN),
        first_seed: run.first_seed,
        n_trials: cfg.sim.n_trials,
        sample_rate_hz: run.successes().first().map_or(cfg.sim.output_rate_hz, |o| o.truth.sample_rate),
        mode_frequencies_hz: modes.as_array(),
        equilibrium_um: [0.0, y_eq * 1e6, 0.0],
        failed_trials: run.failures(),
    };
    let p = dir.join("run.json");
    write_json(&p, &info)?;
    files.push(p);
    Ok(files)
}

pub fn run(loaded: &LoadedConfig, seed: u64, out: &Path) -> Result<()> {
    let cfg = &loaded.config;
    let mut manifest = RunManifest::new("simulate", &loaded.sha256, seed);
    let trap = cfg.trap_model()?;
    let runs = run_pressures(cfg, &trap, seed)?;
    let mut files = Vec::new();
    for run in &runs {
        let dir = out.join(pressure_dir(run.pressure_mbar));
        files.extend(write_pressure(cfg, &trap, run, &dir, true)?);
        let failures = run.failures();
        println!(
            "p = {:e} mbar: {} of {} trials written to {}",
            run.pressure_mbar,
            run.outputs.len() - failures.len(),
            run.outputs.len(),
            dir.display()
        );
        for f in &failures {
            eprintln!("p = {:e} mbar: {f}", run.pressure_mbar);
        }
        manifest
            .failures
            .extend(failures.into_iter().map(|f| format!("p = {:e} mbar: {f}", run.pressure_mbar)));
    }
    let failed = manifest.failures.len();
    manifest.finish(out, &files)?;
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} trial(s) failed; see manifest.json")));
    }
    Ok(())
}
