//! Power spectral density estimation and thermal calibration.
//!
//! Periodograms are one-sided and normalised so that `Σ values · Δf` equals
//! the mean square of the input, which makes the line-shape scale `S0`
//! satisfy `π·S0/2 = ⟨x²⟩ = k_B·T/(m·ω0²)`. Positions are in micrometres, so
//! PSD values are µm²/Hz and `S0` is in µm².

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::KB;
use crate::lm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("series too short for a periodogram ({0} < 256 samples)")]
    Length(usize),
    #[error("series contains non-finite values")]
    NonFinite,
    #[error("PSD frequency grids differ")]
    GridMismatch,
    #[error("no trials to average")]
    Empty,
    #[error("no resolvable peak (peak/median ratio {ratio:.2})")]
    NoPeak { ratio: f64 },
    #[error("line-shape fit did not converge (best residual {best_residual:e})")]
    NoConvergence { best_residual: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// One-sided PSD with optional per-point standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    /// µm²/Hz
    pub values: Vec<f64>,
    /// Standard error of each point (zero when unknown).
    pub point_std: Vec<f64>,
    pub n_trials: usize,
    pub sample_rate: f64,
}

impl PsdEstimate {
    pub fn df(&self) -> f64 {
        self.freqs[1] - self.freqs[0]
    }

    /// `Σ values · Δf`, the mean square of the input.
    pub fn total_power(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.df()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "freq_hz,psd_um2_per_hz,std_um2_per_hz")?;
        for i in 0..self.freqs.len() {
            writeln!(w, "{},{},{}", self.freqs[i], self.values[i], self.point_std[i])?;
        }
        Ok(())
    }

    /// Read the CSV written by [`PsdEstimate::write_csv`]. The sample rate is
    /// recovered from the grid (`f_max = fs/2` for even-length inputs).
    pub fn read_csv<R: BufRead>(r: R, n_trials: usize) -> Result<Self, SpectraError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .and_then(|l| l.ok())
            .ok_or_else(|| SpectraError::InvalidInput("empty PSD file".into()))?;
        if header.trim() != "freq_hz,psd_um2_per_hz,std_um2_per_hz" {
            return Err(SpectraError::InvalidInput(format!("unexpected PSD header {header:?}")));
        }
        let (mut freqs, mut values, mut point_std) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let line = line.map_err(|e| SpectraError::InvalidInput(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| SpectraError::InvalidInput(e.to_string()))?;
            if v.len() != 3 {
                return Err(SpectraError::InvalidInput(format!("bad PSD row {line:?}")));
            }
            freqs.push(v[0]);
            values.push(v[1]);
            point_std.push(v[2]);
        }
        if freqs.len() < 2 {
            return Err(SpectraError::InvalidInput("PSD needs at least 2 rows".into()));
        }
        let sample_rate = 2.0 * freqs[freqs.len() - 1];
        Ok(Self {
            freqs,
            values,
            point_std,
            n_trials,
            sample_rate,
        })
    }
}

/// One-sided periodogram of a uniformly sampled series (µm in, µm²/Hz out).
pub fn periodogram(series: &[f64], sample_rate: f64) -> Result<PsdEstimate, SpectraError> {
    let n = series.len();
    if n < 256 {
        return Err(SpectraError::Length(n));
    }
    if series.iter().any(|v| !v.is_finite()) || !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(SpectraError::NonFinite);
    }
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let n_bins = n / 2 + 1;
    let scale = 1.0 / (n as f64 * sample_rate);
    let values = (0..n_bins)
        .map(|k| {
            let p = buf[k].norm_sqr() * scale;
            let nyquist = n % 2 == 0 && k == n / 2;
            if k == 0 || nyquist {
                p
            } else {
                2.0 * p
            }
        })
        .collect();
    let freqs = (0..n_bins).map(|k| k as f64 * sample_rate / n as f64).collect();
    Ok(PsdEstimate {
        freqs,
        values,
        point_std: vec![0.0; n_bins],
        n_trials: 1,
        sample_rate,
    })
}

/// Pointwise mean of trial PSDs; `point_std` is the standard error of the
/// mean (sample standard deviation over `√n`).
pub fn average_trials(psds: &[PsdEstimate]) -> Result<PsdEstimate, SpectraError> {
    let first = psds.first().ok_or(SpectraError::Empty)?;
    if psds.iter().any(|p| p.freqs != first.freqs) {
        return Err(SpectraError::GridMismatch);
    }
    let n = psds.len() as f64;
    let m = first.freqs.len();
    let mut mean = vec![0.0; m];
    for p in psds {
        for (acc, v) in mean.iter_mut().zip(&p.values) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let point_std = if psds.len() > 1 {
        (0..m)
            .map(|i| {
                let ss: f64 = psds.iter().map(|p| (p.values[i] - mean[i]).powi(2)).sum();
                (ss / (n - 1.0)).sqrt() / n.sqrt()
            })
            .collect()
    } else {
        vec![0.0; m]
    };
    Ok(PsdEstimate {
        freqs: first.freqs.clone(),
        values: mean,
        point_std,
        n_trials: psds.len(),
        sample_rate: first.sample_rate,
    })
}

/// Mean-subtract each trial, take its periodogram and average.
pub fn trial_psd(trials: &[Vec<f64>], sample_rate: f64) -> Result<PsdEstimate, SpectraError> {
    use rayon::prelude::*;
    let psds: Vec<PsdEstimate> = trials
        .par_iter()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let centred: Vec<f64> = s.iter().map(|v| v - mean).collect();
            periodogram(&centred, sample_rate)
        })
        .collect::<Result<_, _>>()?;
    average_trials(&psds)
}

/// Damped-oscillator line shape `S0·f0²·Γ / ((f0² − f²)² + f²·Γ²)`.
pub fn lorentzian(f: f64, f0: f64, gamma: f64, s0: f64) -> f64 {
    let d = f0 * f0 - f * f;
    s0 * f0 * f0 * gamma / (d * d + f * f * gamma * gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Model-based weights when several trials were averaged, otherwise
    /// unweighted.
    #[default]
    Auto,
    /// `1/point_std²` taken directly from the trial scatter.
    PointStd,
    /// Iteratively reweighted with `σ_i = model_i/√n_trials`.
    Model,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Bands masked out of the fit, Hz.
    pub exclude_bands: Vec<(f64, f64)>,
    /// Explicit fit window; default `[f0/4, min(4·f0, Nyquist)]`.
    pub window: Option<(f64, f64)>,
    /// Expected resonance, used to place the default window and the
    /// starting point. Without it the largest peak is used.
    pub f0_hint: Option<f64>,
    pub fit_floor: bool,
    pub weighting: Weighting,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            exclude_bands: vec![(119.0, 121.0)],
            window: None,
            f0_hint: None,
            fit_floor: true,
            weighting: Weighting::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitUncertainties {
    pub f0_hz: f64,
    pub gamma_hz: f64,
    pub s0_um2: f64,
    pub noise_floor: f64,
}

/// Fitted line shape. Serialises to the fit-result JSON schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdFit {
    pub f0_hz: f64,
    pub gamma_hz: f64,
    pub s0_um2: f64,
    /// Additive white floor, µm²/Hz (not part of `S0`).
    pub noise_floor: f64,
    pub uncertainties: FitUncertainties,
    pub n_trials: usize,
    pub residual_norm: f64,
}

impl PsdFit {
    pub fn model(&self, f: f64) -> f64 {
        lorentzian(f, self.f0_hz, self.gamma_hz, self.s0_um2) + self.noise_floor
    }
}

struct LineProblem<'a> {
    f: &'a [f64],
    y: &'a [f64],
    sigma: Vec<f64>,
    fit_floor: bool,
}

impl LineProblem<'_> {
    fn eval(&self, p: &DVector<f64>, f: f64) -> f64 {
        let floor = if self.fit_floor { p[3] } else { 0.0 };
        lorentzian(f, p[0], p[1], p[2]) + floor
    }
}

impl lm::Problem for LineProblem<'_> {
    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let r = DVector::from_iterator(
            self.f.len(),
            (0..self.f.len()).map(|i| (self.eval(p, self.f[i]) - self.y[i]) / self.sigma[i]),
        );
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (f0, g, s0) = (p[0], p[1], p[2]);
        let mut j = DMatrix::zeros(self.f.len(), p.len());
        for (i, &f) in self.f.iter().enumerate() {
            let u = f0 * f0 - f * f;
            let d = u * u + f * f * g * g;
            let d2 = d * d;
            let w = 1.0 / self.sigma[i];
            j[(i, 0)] = w * s0 * g * 2.0 * f0 * (d - 2.0 * f0 * f0 * u) / d2;
            j[(i, 1)] = w * s0 * f0 * f0 * (d - 2.0 * f * f * g * g) / d2;
            j[(i, 2)] = w * f0 * f0 * g / d;
            if self.fit_floor {
                j[(i, 3)] = w;
            }
        }
        Some(j)
    }
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    let mut prefix = vec![0.0; v.len() + 1];
    for (i, x) in v.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
    }
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(v.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Weighted least-squares fit of the line shape (plus optional white floor).
pub fn fit_psd(psd: &PsdEstimate, opts: &FitOptions) -> Result<PsdFit, SpectraError> {
    let nyquist = psd.sample_rate / 2.0;
    let excluded = |f: f64| opts.exclude_bands.iter().any(|&(lo, hi)| f >= lo && f <= hi);
    let usable: Vec<usize> = (0..psd.freqs.len())
        .filter(|&i| psd.freqs[i] > 0.0 && !excluded(psd.freqs[i]))
        .collect();
    if usable.len() < 8 {
        return Err(SpectraError::InvalidInput("too few usable PSD points".into()));
    }

    // peak detection on a lightly smoothed copy
    let w = (usable.len() / 200).clamp(5, 51) | 1;
    let vals: Vec<f64> = usable.iter().map(|&i| psd.values[i]).collect();
    let smooth = moving_average(&vals, w);
    let search: Vec<usize> = match (opts.window, opts.f0_hint) {
        (Some((lo, hi)), _) => (0..usable.len()).filter(|&k| psd.freqs[usable[k]] >= lo && psd.freqs[usable[k]] <= hi).collect(),
        (None, Some(h)) => (0..usable.len())
            .filter(|&k| psd.freqs[usable[k]] >= h / 4.0 && psd.freqs[usable[k]] <= (4.0 * h).min(nyquist))
            .collect(),
        (None, None) => (0..usable.len()).collect(),
    };
    let &k_peak = search
        .iter()
        .max_by(|&&a, &&b| smooth[a].total_cmp(&smooth[b]))
        .ok_or_else(|| SpectraError::InvalidInput("empty fit window".into()))?;
    let med = median(&vals);
    let ratio = if med > 0.0 { smooth[k_peak] / med } else { f64::INFINITY };
    if !(ratio > 5.0) {
        return Err(SpectraError::NoPeak { ratio });
    }
    let f_peak = psd.freqs[usable[k_peak]];
    let peak = smooth[k_peak];

    // full width at half maximum on the smoothed spectrum
    let mut lo = k_peak;
    while lo > 0 && smooth[lo] > 0.5 * peak {
        lo -= 1;
    }
    let mut hi = k_peak;
    while hi + 1 < smooth.len() && smooth[hi] > 0.5 * peak {
        hi += 1;
    }
    let fwhm = (psd.freqs[usable[hi]] - psd.freqs[usable[lo]]).max(2.0 * psd.df());

    let (wlo, whi) = opts.window.unwrap_or((f_peak / 4.0, (4.0 * f_peak).min(nyquist)));
    let idx: Vec<usize> = usable
        .iter()
        .copied()
        .filter(|&i| psd.freqs[i] >= wlo && psd.freqs[i] <= whi)
        .collect();
    let n_par = if opts.fit_floor { 4 } else { 3 };
    if idx.len() <= n_par {
        return Err(SpectraError::InvalidInput("too few points in fit window".into()));
    }
    let f: Vec<f64> = idx.iter().map(|&i| psd.freqs[i]).collect();
    let y: Vec<f64> = idx.iter().map(|&i| psd.values[i]).collect();
    let std: Vec<f64> = idx.iter().map(|&i| psd.point_std[i]).collect();
    let have_std = psd.n_trials > 1 && std.iter().all(|s| *s > 0.0);

    let weighting = match opts.weighting {
        Weighting::Auto if have_std => Weighting::Model,
        Weighting::Auto => Weighting::Uniform,
        Weighting::PointStd if !have_std => Weighting::Uniform,
        other => other,
    };

    let mut x0 = vec![f_peak, fwhm, peak * fwhm];
    if opts.fit_floor {
        x0.push(0.0);
    }
    let mut params = DVector::from_vec(x0);
    let uniform_scale = y.iter().sum::<f64>() / y.len() as f64;
    let initial_sigma = match weighting {
        Weighting::PointStd => std.clone(),
        _ => vec![uniform_scale; y.len()],
    };
    let mut problem = LineProblem {
        f: &f,
        y: &y,
        sigma: initial_sigma,
        fit_floor: opts.fit_floor,
    };
    let lm_opts = lm::Options {
        max_iter: 500,
        gtol: 0.0,
        xtol: 1e-13,
        ftol_abs: 0.0,
    };

    let rounds = if weighting == Weighting::Model { 6 } else { 1 };
    let mut report = None;
    for round in 0..rounds {
        if round > 0 {
            let sqrt_n = (psd.n_trials as f64).sqrt();
            let prev = params.clone();
            problem.sigma = f.iter().map(|&fi| problem.eval(&prev, fi).abs().max(1e-300) / sqrt_n).collect();
        }
        let rep = lm::minimize(&problem, params.clone(), lm_opts).ok_or(SpectraError::NoConvergence {
            best_residual: f64::INFINITY,
        })?;
        let change = (&rep.params - &params).abs().component_div(&params.abs().add_scalar(1e-300)).max();
        params = rep.params.clone();
        let done = round > 0 && change < 1e-10;
        report = Some(rep);
        if done {
            break;
        }
    }
    let rep = report.expect("at least one fit round");
    if !rep.converged {
        return Err(SpectraError::NoConvergence {
            best_residual: rep.residual_norm,
        });
    }

    let (mut f0, mut g, mut s0) = (params[0], params[1], params[2]);
    f0 = f0.abs();
    if g < 0.0 && s0 < 0.0 {
        g = -g;
        s0 = -s0;
    }
    if !(f0 > 0.0 && g > 0.0 && s0 > 0.0) {
        return Err(SpectraError::NoConvergence {
            best_residual: rep.residual_norm,
        });
    }

    let dof = (f.len() - n_par) as f64;
    let chi2 = rep.residual_norm * rep.residual_norm;
    let mut cov = rep.covariance().unwrap_or_else(|| DMatrix::from_element(n_par, n_par, f64::NAN));
    if weighting == Weighting::Uniform {
        cov *= chi2 / dof;
    }
    let err = |k: usize| cov[(k, k)].max(0.0).sqrt();

    Ok(PsdFit {
        f0_hz: f0,
        gamma_hz: g,
        s0_um2: s0,
        noise_floor: if opts.fit_floor { params[3] } else { 0.0 },
        uncertainties: FitUncertainties {
            f0_hz: err(0),
            gamma_hz: err(1),
            s0_um2: err(2),
            noise_floor: if opts.fit_floor { err(3) } else { 0.0 },
        },
        n_trials: psd.n_trials,
        residual_norm: (chi2 / dof).sqrt(),
    })
}

/// A calibrated quantity with its 1σ uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub value: f64,
    pub std: f64,
}

/// Particle mass (kg) from `S0 = k_B·T/(2π³·m·f0²)`.
pub fn mass_from_fit(fit: &PsdFit, temperature_k: f64) -> CalibrationResult {
    mass_from_line(fit.s0_um2, fit.uncertainties.s0_um2, fit.f0_hz, fit.uncertainties.f0_hz, temperature_k)
}

pub fn mass_from_line(s0_um2: f64, s0_err: f64, f0: f64, f0_err: f64, temperature_k: f64) -> CalibrationResult {
    let s0 = s0_um2 * 1e-12;
    let m = KB * temperature_k / (2.0 * PI.powi(3) * s0 * f0 * f0);
    let rel = ((s0_err / s0_um2).powi(2) + (2.0 * f0_err / f0).powi(2)).sqrt();
    CalibrationResult { value: m, std: m * rel }
}

/// Mode temperature (K) from the fitted line and a known mass (kg).
pub fn temperature_from_fit(fit: &PsdFit, mass: f64, mass_std: f64) -> CalibrationResult {
    temperature_from_line(fit.s0_um2, fit.uncertainties.s0_um2, fit.f0_hz, fit.uncertainties.f0_hz, mass, mass_std)
}

pub fn temperature_from_line(s0_um2: f64, s0_err: f64, f0: f64, f0_err: f64, mass: f64, mass_std: f64) -> CalibrationResult {
    let t = 2.0 * PI.powi(3) * mass * s0_um2 * 1e-12 * f0 * f0 / KB;
    let rel = ((s0_err / s0_um2).powi(2) + (2.0 * f0_err / f0).powi(2) + (mass_std / mass).powi(2)).sqrt();
    CalibrationResult { value: t, std: t * rel }
}
