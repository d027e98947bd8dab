//! PSD analysis shared by `analyze` and `reproduce-paper`.

use std::io::Write;
use std::path::{Path, PathBuf};

use magtrap::dynamics::SimOutput;
use magtrap::spectra::{
    fit_psd, mass_from_fit, temperature_from_fit, trial_psd, CalibrationResult, PsdEstimate, PsdFit,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Axis, Calibrate, ScenarioConfig};
use crate::error::Result;
use crate::output::{write_json, write_with};
use crate::svg::{log_log_plot, Series};

/// Trials of one experiment, positions in µm per axis.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub sample_rate: f64,
    pub trials: Vec<[Vec<f64>; 3]>,
}

impl TrialSet {
    /// Truth trajectories of the given runs; `None` when there are none.
    pub fn from_outputs(outs: &[&SimOutput]) -> Option<Self> {
        let first = outs.first()?;
        Some(Self {
            sample_rate: first.truth.sample_rate,
            trials: outs.iter().map(|o| [0, 1, 2].map(|k| o.truth.component_um(k))).collect(),
        })
    }

    fn axis(&self, axis: Axis) -> Vec<Vec<f64>> {
        self.trials.iter().map(|t| t[axis.index()].clone()).collect()
    }

    fn observed(&self, axis: Axis) -> bool {
        self.trials.iter().all(|t| t[axis.index()].iter().all(|v| v.is_finite()))
    }
}

/// How to turn a fitted line strength into a mass or a temperature.
#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    pub mode: Calibrate,
    pub temperature_k: f64,
    pub mass_kg: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum AxisOutcome {
    Fitted {
        psd: PsdEstimate,
        fit: PsdFit,
        mass: CalibrationResult,
        temperature: CalibrationResult,
    },
    /// The PSD exists but the line fit failed.
    Failed { psd: Option<PsdEstimate>, reason: String },
    /// Coordinate not observed (NaN in the input).
    Skipped,
}

#[derive(Debug, Clone)]
pub struct AxisResult {
    pub axis: Axis,
    pub outcome: AxisOutcome,
}

impl AxisResult {
    pub fn fit(&self) -> Option<&PsdFit> {
        match &self.outcome {
            AxisOutcome::Fitted { fit, .. } => Some(fit),
            _ => None,
        }
    }

    pub fn temperature(&self) -> Option<CalibrationResult> {
        match &self.outcome {
            AxisOutcome::Fitted { temperature, .. } => Some(*temperature),
            _ => None,
        }
    }

    pub fn mass(&self) -> Option<CalibrationResult> {
        match &self.outcome {
            AxisOutcome::Fitted { mass, .. } => Some(*mass),
            _ => None,
        }
    }

    pub fn failed(&self) -> bool {
        matches!(self.outcome, AxisOutcome::Failed { .. })
    }
}

/// PSD and line fit for each requested axis, in parallel.
pub fn analyze_set(
    set: &TrialSet,
    cfg: &ScenarioConfig,
    hints: Option<[f64; 3]>,
    calib: Calibration,
) -> Vec<AxisResult> {
    cfg.analysis
        .axes
        .par_iter()
        .map(|&axis| AxisResult {
            axis,
            outcome: analyze_axis(set, cfg, axis, hints.map(|h| h[axis.index()]), calib),
        })
        .collect()
}

fn analyze_axis(set: &TrialSet, cfg: &ScenarioConfig, axis: Axis, hint: Option<f64>, calib: Calibration) -> AxisOutcome {
    if !set.observed(axis) {
        return AxisOutcome::Skipped;
    }
    let psd = match trial_psd(&set.axis(axis), set.sample_rate) {
        Ok(p) => p,
        Err(e) => {
            return AxisOutcome::Failed {
                psd: None,
                reason: e.to_string(),
            }
        }
    };
    let fit = match fit_psd(&psd, &cfg.fit_options(axis, hint)) {
        Ok(f) => f,
        Err(e) => {
            return AxisOutcome::Failed {
                psd: Some(psd),
                reason: e.to_string(),
            }
        }
    };
    let assumed_t = CalibrationResult {
        value: calib.temperature_k,
        std: 0.0,
    };
    let (mass, temperature) = match (calib.mode, calib.mass_kg) {
        (Calibrate::Temperature, Some(m)) => (CalibrationResult { value: m, std: 0.0 }, temperature_from_fit(&fit, m, 0.0)),
        _ => (mass_from_fit(&fit, calib.temperature_k), assumed_t),
    };
    AxisOutcome::Fitted {
        psd,
        fit,
        mass,
        temperature,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitRecord {
    pub axis: Axis,
    pub f0_hz: f64,
    pub f0_err_hz: f64,
    pub gamma_hz: f64,
    pub gamma_err_hz: f64,
    pub s0_um2: f64,
    pub s0_err_um2: f64,
    pub noise_floor_um2_per_hz: f64,
    pub residual_norm: f64,
    pub n_trials: usize,
    pub mass_pg: f64,
    pub mass_err_pg: f64,
    pub temp_k: f64,
    pub temp_err_k: f64,
}

impl FitRecord {
    pub fn new(axis: Axis, fit: &PsdFit, mass: &CalibrationResult, temp: &CalibrationResult) -> Self {
        Self {
            axis,
            f0_hz: fit.f0_hz,
            f0_err_hz: fit.uncertainties.f0_hz,
            gamma_hz: fit.gamma_hz,
            gamma_err_hz: fit.uncertainties.gamma_hz,
            s0_um2: fit.s0_um2,
            s0_err_um2: fit.uncertainties.s0_um2,
            noise_floor_um2_per_hz: fit.noise_floor,
            residual_norm: fit.residual_norm,
            n_trials: fit.n_trials,
            mass_pg: mass.value * 1e15,
            mass_err_pg: mass.std * 1e15,
            temp_k: temp.value,
            temp_err_k: temp.std,
        }
    }
}

pub const SUMMARY_HEADER: &str = "group,pressure_mbar,axis,status,f0_hz,f0_err_hz,gamma_hz,gamma_err_hz,s0_um2,s0_err_um2,mass_pg,mass_err_pg,temp_k,temp_err_k,n_trials,residual_norm";

/// One summary CSV line per axis result.
pub fn summary_lines(group: &str, pressure: Option<f64>, results: &[AxisResult]) -> Vec<String> {
    let p = pressure.map_or(String::new(), |p| format!("{p:e}"));
    results
        .iter()
        .map(|r| match &r.outcome {
            AxisOutcome::Fitted {
                fit, mass, temperature, ..
            } => {
                let f = FitRecord::new(r.axis, fit, mass, temperature);
                format!(
                    "{group},{p},{},ok,{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.axis.name(),
                    f.f0_hz,
                    f.f0_err_hz,
                    f.gamma_hz,
                    f.gamma_err_hz,
                    f.s0_um2,
                    f.s0_err_um2,
                    f.mass_pg,
                    f.mass_err_pg,
                    f.temp_k,
                    f.temp_err_k,
                    f.n_trials,
                    f.residual_norm
                )
            }
            AxisOutcome::Failed { reason, .. } => {
                format!("{group},{p},{},failed: {},,,,,,,,,,,,", r.axis.name(), reason.replace(',', ";"))
            }
            AxisOutcome::Skipped => format!("{group},{p},{},skipped,,,,,,,,,,,,", r.axis.name()),
        })
        .collect()
}

/// PSD CSVs, fit JSON and optional SVGs for one group; returns the files.
pub fn write_group(dir: &Path, results: &[AxisResult], svg: bool) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for r in results {
        let name = r.axis.name();
        let (psd, fit) = match &r.outcome {
            AxisOutcome::Fitted {
                psd,
                fit,
                mass,
                temperature,
            } => {
                let path = dir.join(format!("fit_{name}.json"));
                write_json(&path, &FitRecord::new(r.axis, fit, mass, temperature))?;
                files.push(path);
                (Some(psd), Some(fit))
            }
            AxisOutcome::Failed { psd, .. } => (psd.as_ref(), None),
            AxisOutcome::Skipped => (None, None),
        };
        let Some(psd) = psd else { continue };
        let path = dir.join(format!("psd_{name}.csv"));
        write_with(&path, |w| psd.write_csv(w))?;
        files.push(path);
        if svg {
            let path = dir.join(format!("psd_{name}.svg"));
            let data: Vec<(f64, f64)> = psd.freqs.iter().copied().zip(psd.values.iter().copied()).skip(1).collect();
            let mut series = vec![Series {
                label: "PSD",
                color: "black",
                points: data,
            }];
            if let Some(fit) = fit {
                series.push(Series {
                    label: "fit",
                    color: "#d62728",
                    points: psd.freqs.iter().skip(1).map(|&f| (f, fit.model(f))).collect(),
                });
            }
            let text = log_log_plot(&format!("{name} PSD"), "frequency (Hz)", "PSD (um^2/Hz)", &series);
            write_with(&path, |w| w.write_all(text.as_bytes()))?;
            files.push(path);
        }
    }
    Ok(files)
}
