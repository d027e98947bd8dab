use std::path::Path;

use magtrap::trapstatics::TrapModel;
use magtrap::{ModeFrequencies, MultipoleCoefficients, Vec3};
use serde::Serialize;

use crate::config::LoadedConfig;
use crate::error::{CliError, Result};
use crate::output::{write_json, RunManifest};

#[derive(Debug, Clone, Serialize)]
pub struct ModeRecord {
    pub fx_hz: f64,
    pub fy_hz: f64,
    pub fz_hz: f64,
}

impl From<ModeFrequencies> for ModeRecord {
    fn from(m: ModeFrequencies) -> Self {
        Self {
            fx_hz: m.fx,
            fy_hz: m.fy,
            fz_hz: m.fz,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientRecord {
    pub a2_t: f64,
    pub a3_t: f64,
    pub a4_t: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrapReport {
    pub a2_t: f64,
    pub a3_t: f64,
    pub a4_t: f64,
    pub y0_um: f64,
    pub y_eq_um: f64,
    pub b_eq_tesla: f64,
    /// Mode frequencies of the resulting trap.
    pub mode_frequencies_hz: ModeRecord,
    /// Relative frequency mismatch of the fit; absent for given coefficients.
    pub residual_norm: Option<f64>,
    pub alternatives: Vec<CoefficientRecord>,
}

/// Coefficients (fitted or given), equilibrium, field there and modes.
pub fn trap_report(loaded: &LoadedConfig) -> Result<(TrapModel, TrapReport)> {
    let cfg = &loaded.config;
    let given = cfg.trap.as_ref().and_then(|t| t.coefficients).is_some();
    let (trap, residual, alternatives) = if given {
        (cfg.trap_model()?, None, Vec::new())
    } else {
        let fit = cfg.fit_trap()?;
        let alts = fit
            .alternatives
            .iter()
            .map(|(c, _)| CoefficientRecord {
                a2_t: c.a2,
                a3_t: c.a3,
                a4_t: c.a4,
            })
            .collect();
        (TrapModel::new(fit.coeffs, cfg.material()), Some(fit.residual_norm), alts)
    };
    let numerical = |e: magtrap::trapstatics::StaticsError| CliError::Numerical(e.to_string());
    let y_eq = trap.find_equilibrium().map_err(numerical)?;
    let modes = trap.mode_frequencies_at(y_eq).map_err(numerical)?;
    let c: MultipoleCoefficients = trap.coeffs;
    let b_eq = c.field_b(&Vec3::new(0.0, y_eq, 0.0)).norm();
    Ok((
        trap,
        TrapReport {
            a2_t: c.a2,
            a3_t: c.a3,
            a4_t: c.a4,
            y0_um: c.y0 * 1e6,
            y_eq_um: y_eq * 1e6,
            b_eq_tesla: b_eq,
            mode_frequencies_hz: modes.into(),
            residual_norm: residual,
            alternatives,
        },
    ))
}

pub fn run(loaded: &LoadedConfig, seed: u64, out: &Path) -> Result<()> {
    let manifest = RunManifest::new("fit-trap", &loaded.sha256, seed);
    let (_, report) = trap_report(loaded)?;
    let path = out.join("coefficients.json");
    write_json(&path, &report)?;
    println!(
        "a2 = {:.4} T, a3 = {:.4} T, a4 = {:.4} T, y_eq = {:.3} um, |B_eq| = {:.4} T",
        report.a2_t, report.a3_t, report.a4_t, report.y_eq_um, report.b_eq_tesla
    );
    manifest.finish(out, &[path])
}
