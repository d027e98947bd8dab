//! Stochastic centre-of-mass dynamics with gas damping, thermal noise, line
//! noise and cold-damping feedback.
//!
//! The equation of motion per unit mass is
//! `r̈ = −∇U/m − γ·ṙ + (F_fb + F_line)/m + √(2γk_BT/m)·ξ(t)` with the angular
//! damping rate `γ = 2π·Γ_f0`, where `Γ_f0` is the linewidth in hertz that
//! appears in the PSD line shape. It is integrated with the BAOAB splitting:
//! half kick, half drift, exact Ornstein–Uhlenbeck velocity update, half drift,
//! half kick. Feedback forces are computed once per step from the noisy
//! measurement at the start of the step and held over it.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::KB;
use crate::fieldmodel::Vec3;
use crate::trapstatics::{ModeFrequencies, Particle, StaticsError, TrapModel};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("particle escaped the modelled region at t = {t:.6} s (|r| = {radius:e} m)")]
    Escape { t: f64, radius: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Statics(#[from] StaticsError),
    #[error("trajectory I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GasEnvironment {
    pub pressure_mbar: f64,
    pub temperature_k: f64,
    /// Damping linewidth per unit pressure, Hz/mbar.
    pub kappa_hz_per_mbar: f64,
}

impl GasEnvironment {
    /// Default damping coefficient from a through-origin regression of the
    /// rough-vacuum linewidths against pressure.
    pub const DEFAULT_KAPPA: f64 = 63.0;

    pub fn new(pressure_mbar: f64) -> Self {
        Self {
            pressure_mbar,
            temperature_k: crate::constants::AMBIENT_K,
            kappa_hz_per_mbar: Self::DEFAULT_KAPPA,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.pressure_mbar >= 0.0 && self.pressure_mbar.is_finite()) {
            return Err(DynamicsError::Config(format!("pressure must be >= 0, got {}", self.pressure_mbar)));
        }
        if !(self.temperature_k > 0.0 && self.temperature_k.is_finite()) {
            return Err(DynamicsError::Config(format!("temperature must be > 0, got {}", self.temperature_k)));
        }
        if !(self.kappa_hz_per_mbar > 0.0 && self.kappa_hz_per_mbar.is_finite()) {
            return Err(DynamicsError::Config(format!("kappa must be > 0, got {}", self.kappa_hz_per_mbar)));
        }
        Ok(())
    }

    /// Damping linewidth `Γ_f0 = κ·p` in hertz.
    pub fn damping_rate(&self) -> f64 {
        self.kappa_hz_per_mbar * self.pressure_mbar
    }
}

/// How an axis controller turns measured position into force.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Biquad bandpass, quarter-period delay, gain, saturation.
    #[default]
    Bandpass,
    /// `−gain·(x[n] − x[n−1])/Δt` from the measured signal, then saturation.
    IdealVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisFeedback {
    pub enabled: bool,
    pub mode: FeedbackMode,
    pub center_freq_hz: f64,
    pub bandwidth_hz: f64,
    /// Velocity-damping coefficient, N·s/m.
    pub gain: f64,
    /// Output delay in control samples; `None` selects a quarter period at
    /// the centre frequency.
    pub extra_delay: Option<usize>,
    pub force_max_n: f64,
    /// Gaussian position-readout noise per control sample, m.
    pub detection_noise_m: f64,
}

impl Default for AxisFeedback {
    fn default() -> Self {
        Self {
            enabled: false,
            mode: FeedbackMode::Bandpass,
            center_freq_hz: 10.0,
            bandwidth_hz: 10.0,
            gain: 0.0,
            extra_delay: None,
            force_max_n: 1e-9,
            detection_noise_m: 0.0,
        }
    }
}

impl AxisFeedback {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |what: &str| Err(DynamicsError::Config(format!("feedback {what} out of range: {self:?}")));
        if !(self.bandwidth_hz > 0.0) {
            return bad("bandwidth");
        }
        if !(self.center_freq_hz > 0.0) {
            return bad("center frequency");
        }
        if !(self.force_max_n > 0.0) {
            return bad("force_max");
        }
        if !(self.gain >= 0.0) {
            return bad("gain");
        }
        if !(self.detection_noise_m >= 0.0) {
            return bad("detection noise");
        }
        Ok(())
    }

    /// Gain giving an extra damping linewidth `gamma_hz` for a particle of
    /// `mass` kg under ideal velocity feedback.
    pub fn gain_for_linewidth(mass: f64, gamma_hz: f64) -> f64 {
        2.0 * PI * mass * gamma_hz
    }
}

/// Per-axis controllers sharing one actuator.
///
/// The drive is the sum of the axis controller outputs; axis `j` sees
/// `coupling[j]` times that sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    pub axes: [AxisFeedback; 3],
    pub coupling: [f64; 3],
    /// Quadratic readout coefficient for the transverse channel, 1/m.
    pub transverse_nonlinearity: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            axes: [AxisFeedback::default(); 3],
            coupling: [1.0; 3],
            transverse_nonlinearity: 0.0,
        }
    }
}

impl FeedbackConfig {
    pub fn disabled() -> Self {
        Self::default()
    }
}

/// Second-order IIR bandpass (constant 0 dB peak gain).
#[derive(Debug, Clone)]
pub struct Bandpass {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Bandpass {
    pub fn new(sample_rate: f64, center: f64, bandwidth: f64) -> Self {
        let w0 = 2.0 * PI * center / sample_rate;
        let q = center / bandwidth;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b2: -alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    pub fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Running state of one axis controller.
#[derive(Debug, Clone)]
pub struct FeedbackState {
    cfg: AxisFeedback,
    sample_rate: f64,
    filter: Bandpass,
    delay: VecDeque<f64>,
    prev: Option<f64>,
}

impl FeedbackState {
    pub fn new(cfg: AxisFeedback, sample_rate: f64) -> Self {
        let d = cfg.extra_delay.unwrap_or_else(|| quarter_period_delay(sample_rate, cfg.center_freq_hz));
        Self {
            filter: Bandpass::new(sample_rate, cfg.center_freq_hz, cfg.bandwidth_hz),
            delay: VecDeque::from(vec![0.0; d]),
            prev: None,
            cfg,
            sample_rate,
        }
    }

    /// Force for the next control interval given the latest measured position.
    pub fn step(&mut self, measured: f64) -> f64 {
        if !self.cfg.enabled {
            return 0.0;
        }
        let raw = match self.cfg.mode {
            FeedbackMode::Bandpass => {
                let filtered = self.filter.process(measured);
                self.delay.push_back(filtered);
                let delayed = self.delay.pop_front().unwrap_or(filtered);
                self.cfg.gain * 2.0 * PI * self.cfg.center_freq_hz * delayed
            }
            FeedbackMode::IdealVelocity => {
                let v = self.prev.map_or(0.0, |p| (measured - p) * self.sample_rate);
                self.prev = Some(measured);
                -self.cfg.gain * v
            }
        };
        raw.clamp(-self.cfg.force_max_n, self.cfg.force_max_n)
    }
}

/// Delay (in samples) equal to a quarter period at `freq`: for a sinusoid
/// passed through the bandpass at its centre this turns position into a force
/// opposing velocity.
pub fn quarter_period_delay(sample_rate: f64, freq: f64) -> usize {
    (sample_rate / (4.0 * freq)).round() as usize
}

/// Sinusoidal disturbance force (N) applied on the vertical axis.
pub fn line_noise(t: f64, amplitude: f64, freq: f64) -> f64 {
    if amplitude == 0.0 {
        return 0.0;
    }
    amplitude * (2.0 * PI * freq * t).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// Boltzmann sample around the equilibrium at the gas temperature.
    Thermal,
    /// Offset from the equilibrium (m) and velocity (m/s).
    Displaced { offset: [f64; 3], velocity: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialMode {
    #[default]
    Full,
    /// Quadratic expansion about the equilibrium.
    Harmonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub duration_s: f64,
    /// Unrecorded settling time integrated before the first output sample.
    #[serde(default)]
    pub warmup_s: f64,
    /// Requested integrator step; shortened so that the output interval is a
    /// whole number of steps.
    pub dt_s: f64,
    pub output_rate_hz: f64,
    pub seed: u64,
    pub initial: InitialState,
    pub potential: PotentialMode,
    pub line_noise_n: f64,
    pub line_noise_hz: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            warmup_s: 0.0,
            dt_s: 2.5e-5,
            output_rate_hz: crate::constants::CAMERA_FPS,
            seed: 0,
            initial: InitialState::Thermal,
            potential: PotentialMode::Full,
            line_noise_n: 0.0,
            line_noise_hz: 120.0,
        }
    }
}

impl SimConfig {
    /// Integrator steps per output sample and the effective step size.
    pub fn stepping(&self) -> (usize, f64) {
        let stride = (1.0 / (self.output_rate_hz * self.dt_s) - 1e-9).ceil().max(1.0) as usize;
        (stride, 1.0 / (self.output_rate_hz * stride as f64))
    }
}

/// Uniformly sampled positions in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample_rate: f64,
    pub t0: f64,
    pub samples: Vec<Vec3>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.sample_rate
    }

    pub fn component(&self, axis: usize) -> Vec<f64> {
        self.samples.iter().map(|p| p[axis]).collect()
    }

    /// One coordinate in micrometres, exactly as written to CSV.
    pub fn component_um(&self, axis: usize) -> Vec<f64> {
        self.samples.iter().map(|p| p[axis] * 1e6).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,x_um,y_um,z_um")?;
        for (i, p) in self.samples.iter().enumerate() {
            writeln!(w, "{},{},{},{}", self.time(i), p.x * 1e6, p.y * 1e6, p.z * 1e6)?;
        }
        Ok(())
    }

    /// Parse `t,x_um,y_um,z_um` CSV, returning the time column and the three
    /// micrometre columns untouched. NaN marks an unobserved coordinate.
    pub fn read_csv_um<R: BufRead>(r: R) -> Result<TrajectoryColumns, DynamicsError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| DynamicsError::Parse("empty trajectory file".into()))??;
        if header.trim() != "t,x_um,y_um,z_um" {
            return Err(DynamicsError::Parse(format!("unexpected header {header:?}")));
        }
        let mut cols = TrajectoryColumns::default();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| DynamicsError::Parse(format!("line {}: {e}", n + 2)))?;
            if vals.len() != 4 || vals.iter().any(|v| v.is_infinite()) || vals[0].is_nan() {
                return Err(DynamicsError::Parse(format!("line {}: expected 4 values", n + 2)));
            }
            cols.t.push(vals[0]);
            for k in 0..3 {
                cols.um[k].push(vals[k + 1]);
            }
        }
        if cols.t.len() < 2 {
            return Err(DynamicsError::Parse("trajectory needs at least 2 samples".into()));
        }
        Ok(cols)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryColumns {
    pub t: Vec<f64>,
    pub um: [Vec<f64>; 3],
}

impl TrajectoryColumns {
    pub fn sample_rate(&self) -> f64 {
        let n = self.t.len();
        (n - 1) as f64 / (self.t[n - 1] - self.t[0])
    }

    pub fn into_trajectory(self) -> Trajectory {
        let sample_rate = self.sample_rate();
        let samples = (0..self.t.len())
            .map(|i| Vec3::new(self.um[0][i], self.um[1][i], self.um[2][i]) * 1e-6)
            .collect();
        Trajectory {
            sample_rate,
            t0: self.t[0],
            samples,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub truth: Trajectory,
    pub measured: Trajectory,
    /// Applied feedback force per output sample, N.
    pub forces: Vec<Vec3>,
    pub equilibrium: Vec3,
    pub modes: ModeFrequencies,
}

impl SimOutput {
    pub fn write_force_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,Fx,Fy,Fz")?;
        for (i, f) in self.forces.iter().enumerate() {
            writeln!(w, "{},{},{},{}", self.truth.time(i), f.x * 1e12, f.y * 1e12, f.z * 1e12)?;
        }
        Ok(())
    }
}

enum Acceleration {
    Full(TrapModel),
    Harmonic { eq: Vec3, k: Matrix3<f64> },
}

impl Acceleration {
    fn at(&self, pos: &Vec3) -> Vec3 {
        match self {
            Acceleration::Full(t) => t.acceleration(pos),
            Acceleration::Harmonic { eq, k } => -(k * (pos - eq)),
        }
    }
}

/// Integrate one trajectory. Deterministic for a fixed `cfg.seed`.
pub fn simulate(
    trap: &TrapModel,
    particle: &Particle,
    gas: &GasEnvironment,
    fb: &FeedbackConfig,
    cfg: &SimConfig,
) -> Result<SimOutput, DynamicsError> {
    gas.validate()?;
    for a in &fb.axes {
        a.validate()?;
    }
    if !(cfg.dt_s > 0.0 && cfg.duration_s > 0.0 && cfg.output_rate_hz > 0.0) {
        return Err(DynamicsError::Config("dt, duration and output rate must be positive".into()));
    }
    if !(cfg.warmup_s >= 0.0 && cfg.warmup_s.is_finite()) {
        return Err(DynamicsError::Config("warmup must be >= 0".into()));
    }
    if cfg.output_rate_hz > 1.0 / cfg.dt_s * (1.0 + 1e-12) {
        return Err(DynamicsError::Config("output rate exceeds integrator rate".into()));
    }

    let y_eq = trap.find_equilibrium()?;
    let modes = trap.mode_frequencies_at(y_eq)?;
    if cfg.dt_s > 1.0 / (50.0 * modes.max()) {
        return Err(DynamicsError::Config(format!(
            "dt = {} s exceeds stability bound 1/(50·{:.3} Hz)",
            cfg.dt_s,
            modes.max()
        )));
    }
    let eq = Vec3::new(0.0, y_eq, 0.0);
    let accel = match cfg.potential {
        PotentialMode::Full => Acceleration::Full(*trap),
        PotentialMode::Harmonic => Acceleration::Harmonic {
            eq,
            k: trap.curvature(&eq),
        },
    };

    let (stride, dt) = cfg.stepping();
    let n_out = (cfg.duration_s * cfg.output_rate_hz).floor() as usize;
    if n_out < 2 {
        return Err(DynamicsError::Config("duration yields fewer than 2 output samples".into()));
    }

    let m = particle.mass;
    let kt = KB * gas.temperature_k;
    let gamma = 2.0 * PI * gas.damping_rate();
    let c1 = (-gamma * dt).exp();
    let c2 = ((1.0 - c1 * c1) * kt / m).sqrt();
    let h = 0.5 * dt;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let (mut x, mut v) = match cfg.initial {
        InitialState::Thermal => {
            let f = modes.as_array();
            let mut x = eq;
            let mut v = Vec3::zeros();
            for k in 0..3 {
                let w = 2.0 * PI * f[k];
                x[k] += (kt / (m * w * w)).sqrt() * normal();
                v[k] = (kt / m).sqrt() * normal();
            }
            (x, v)
        }
        InitialState::Displaced { offset, velocity } => (eq + Vec3::from(offset), Vec3::from(velocity)),
    };

    let control_rate = 1.0 / dt;
    let mut controllers: Vec<FeedbackState> = fb.axes.iter().map(|a| FeedbackState::new(*a, control_rate)).collect();
    let any_feedback = fb.axes.iter().any(|a| a.enabled);
    let coupling = Vec3::from(fb.coupling);
    let noise_std = Vec3::new(
        fb.axes[0].detection_noise_m,
        fb.axes[1].detection_noise_m,
        fb.axes[2].detection_noise_m,
    );
    let thermal = c2 > 0.0;
    let limit2 = trap.coeffs.y0 * trap.coeffs.y0;

    let mut truth = Vec::with_capacity(n_out);
    let mut measured = Vec::with_capacity(n_out);
    let mut forces = Vec::with_capacity(n_out);

    let n_warm = (cfg.warmup_s * cfg.output_rate_hz).round() as usize;
    let mut a = accel.at(&x);
    let mut step: u64 = 0;
    for idx in 0..n_warm + n_out {
        for sub in 0..stride {
            let t = step as f64 * dt;
            let mut meas = x;
            for k in 0..3 {
                if noise_std[k] > 0.0 {
                    meas[k] += noise_std[k] * normal();
                }
            }
            if fb.transverse_nonlinearity != 0.0 {
                let dx = meas.x - eq.x;
                meas.x += fb.transverse_nonlinearity * dx * dx;
            }

            let drive = if any_feedback {
                controllers.iter_mut().enumerate().map(|(k, c)| c.step(meas[k])).sum::<f64>()
            } else {
                0.0
            };
            let f_fb = coupling * drive;

            if sub == 0 && idx >= n_warm {
                truth.push(x);
                measured.push(meas);
                forces.push(f_fb);
            }

            let line_a = line_noise(t, cfg.line_noise_n, cfg.line_noise_hz) / m;
            v += h * (a + f_fb / m);
            v.y += h * line_a;
            x += h * v;
            if thermal {
                v = c1 * v + c2 * Vec3::new(normal(), normal(), normal());
            } else {
                v *= c1;
            }
            x += h * v;
            a = accel.at(&x);
            let line_b = line_noise(t + dt, cfg.line_noise_n, cfg.line_noise_hz) / m;
            v += h * (a + f_fb / m);
            v.y += h * line_b;

            step += 1;
            if !(x.norm_squared() <= limit2) {
                return Err(DynamicsError::Escape {
                    t: step as f64 * dt,
                    radius: x.norm(),
                });
            }
        }
    }

    let mk = |samples| Trajectory {
        sample_rate: cfg.output_rate_hz,
        t0: n_warm as f64 / cfg.output_rate_hz,
        samples,
    };
    Ok(SimOutput {
        truth: mk(truth),
        measured: mk(measured),
        forces,
        equilibrium: eq,
        modes,
    })
}

/// Run `n` independent trials with seeds `base_seed + i`, in parallel.
/// Results are returned in trial order regardless of scheduling.
pub fn simulate_trials(
    trap: &TrapModel,
    particle: &Particle,
    gas: &GasEnvironment,
    fb: &FeedbackConfig,
    cfg: &SimConfig,
    n: usize,
) -> Vec<Result<SimOutput, DynamicsError>> {
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut c = *cfg;
            c.seed = cfg.seed.wrapping_add(i as u64);
            simulate(trap, particle, gas, fb, &c)
        })
        .collect()
}

/// Equipartition temperature `m·ω²·⟨x²⟩/k_B` of one mode.
pub fn equipartition_temperature(mass: f64, freq_hz: f64, variance_m2: f64) -> f64 {
    let w = 2.0 * PI * freq_hz;
    mass * w * w * variance_m2 / KB
}

/// Sample variance about the mean.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldmodel::MultipoleCoefficients;
    use crate::trapstatics::{fit_coefficients, Material};

    fn paper_trap() -> TrapModel {
        let m = Material::diamond();
        let fit = fit_coefficients(&ModeFrequencies::reported(), &m, crate::constants::TRAP_Y0).unwrap();
        TrapModel::new(fit.coeffs, m)
    }

    #[test]
    fn damping_rate_examples() {
        let g = GasEnvironment::new(5.3e-2);
        assert!((g.damping_rate() - 3.339).abs() < 1e-3);
        assert!((g.damping_rate() - 3.39).abs() < 0.06);
        assert_eq!(GasEnvironment::new(0.0).damping_rate(), 0.0);
        assert!((GasEnvironment::new(6.7e-3).damping_rate() - 0.4221).abs() < 1e-4);
    }

    #[test]
    fn line_noise_zero_amplitude() {
        assert_eq!(line_noise(0.123, 0.0, 120.0), 0.0);
        assert!((line_noise(1.0 / 480.0, 2.0, 120.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stepping_makes_whole_strides() {
        let cfg = SimConfig::default();
        let (stride, dt) = cfg.stepping();
        assert_eq!(stride, 81);
        assert!(dt <= cfg.dt_s);
        assert!((stride as f64 * dt * cfg.output_rate_hz - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bandpass_rejects_dc() {
        let mut f = FeedbackState::new(
            AxisFeedback {
                enabled: true,
                center_freq_hz: 10.0,
                bandwidth_hz: 5.0,
                gain: 1e-12,
                force_max_n: 1.0,
                ..Default::default()
            },
            1000.0,
        );
        let mut last = 1.0;
        for _ in 0..20000 {
            last = f.step(1e-6);
        }
        assert!(last.abs() < 1e-12 * 2.0 * PI * 10.0 * 1e-6 * 1e-3);
    }

    #[test]
    fn saturation_clamps_exactly() {
        let mut f = FeedbackState::new(
            AxisFeedback {
                enabled: true,
                mode: FeedbackMode::IdealVelocity,
                gain: 1.0,
                force_max_n: 2e-12,
                ..Default::default()
            },
            1000.0,
        );
        f.step(0.0);
        assert_eq!(f.step(1.0), -2e-12);
        assert_eq!(f.step(-5.0), 2e-12);
    }

    #[test]
    fn quarter_period_phase_and_amplitude() {
        let fs = 10_000.0;
        let fc = 9.6;
        let gain = 3e-12;
        let amp = 1e-6;
        let mut f = FeedbackState::new(
            AxisFeedback {
                enabled: true,
                center_freq_hz: fc,
                bandwidth_hz: 4.0,
                gain,
                force_max_n: 1.0,
                ..Default::default()
            },
            fs,
        );
        let w = 2.0 * PI * fc;
        let n = (fs * 20.0) as usize;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(f.step(amp * (w * i as f64 / fs).sin()));
        }
        // project the last 10 s onto sin/cos
        let start = n / 2;
        let (mut s, mut c) = (0.0, 0.0);
        for (i, o) in out.iter().enumerate().skip(start) {
            let t = i as f64 / fs;
            s += o * (w * t).sin();
            c += o * (w * t).cos();
        }
        let norm = 2.0 / (n - start) as f64;
        let (s, c) = (s * norm, c * norm);
        let out_amp = s.hypot(c);
        let expect = gain * w * amp;
        assert!((out_amp - expect).abs() < 0.05 * expect, "{out_amp} vs {expect}");
        // output ≈ −A·cos(ωt): lags the input by 90°, i.e. opposes velocity
        assert!(c < 0.0 && s.abs() < 0.1 * c.abs());
    }

    #[test]
    fn zero_temperature_ring_down() {
        let trap = paper_trap();
        let particle = Particle::new(trap.material, 28e-15).unwrap();
        let gas = GasEnvironment {
            temperature_k: 1e-300,
            ..GasEnvironment::new(5.3e-2)
        };
        let cfg = SimConfig {
            duration_s: 1.0,
            dt_s: 2e-5,
            output_rate_hz: 5000.0,
            initial: InitialState::Displaced {
                offset: [0.0, 0.1e-6, 0.0],
                velocity: [0.0; 3],
            },
            potential: PotentialMode::Harmonic,
            ..Default::default()
        };
        let out = simulate(&trap, &particle, &gas, &FeedbackConfig::disabled(), &cfg).unwrap();
        let y: Vec<f64> = out.truth.component(1).iter().map(|y| y - out.equilibrium.y).collect();
        let gamma = 2.0 * PI * gas.damping_rate();
        // envelope at 0.5 s, from local peak magnitudes
        let i0 = 2500;
        let (ip, peak) = (i0 - 30..i0 + 30)
            .map(|i| (i, y[i].abs()))
            .fold((0, 0.0f64), |best, cur| if cur.1 > best.1 { cur } else { best });
        let expect = 0.1e-6 * (-gamma / 2.0 * ip as f64 / 5000.0).exp();
        assert!((peak - expect).abs() < 0.03 * expect, "{peak} vs {expect}");

        // zero crossings give the damped frequency
        let crossings: Vec<usize> = (1..y.len()).filter(|&i| y[i - 1] < 0.0 && y[i] >= 0.0).collect();
        let periods = (crossings.len() - 1) as f64;
        let f = periods / ((crossings[crossings.len() - 1] - crossings[0]) as f64 / 5000.0);
        let wd = ((2.0 * PI * out.modes.fy).powi(2) - gamma * gamma / 4.0).sqrt() / (2.0 * PI);
        assert!((f - wd).abs() < 0.002 * wd, "{f} vs {wd}");
    }

    #[test]
    fn deterministic_for_seed() {
        let trap = paper_trap();
        let particle = Particle::new(trap.material, 28e-15).unwrap();
        let gas = GasEnvironment::new(5.3e-2);
        let cfg = SimConfig {
            duration_s: 0.5,
            seed: 42,
            ..Default::default()
        };
        let a = simulate(&trap, &particle, &gas, &FeedbackConfig::disabled(), &cfg).unwrap();
        let b = simulate(&trap, &particle, &gas, &FeedbackConfig::disabled(), &cfg).unwrap();
        assert_eq!(a.truth, b.truth);
        let c = simulate(&trap, &particle, &gas, &FeedbackConfig::disabled(), &SimConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn rejects_coarse_step() {
        let trap = paper_trap();
        let particle = Particle::new(trap.material, 28e-15).unwrap();
        let cfg = SimConfig {
            dt_s: 1e-3,
            output_rate_hz: 100.0,
            ..Default::default()
        };
        let err = simulate(&trap, &particle, &GasEnvironment::new(1e-2), &FeedbackConfig::disabled(), &cfg);
        assert!(matches!(err, Err(DynamicsError::Config(_))));
    }

    #[test]
    fn escape_is_reported() {
        let trap = TrapModel::new(MultipoleCoefficients::reported(), Material::diamond());
        let particle = Particle::new(trap.material, 28e-15).unwrap();
        let cfg = SimConfig {
            duration_s: 1.0,
            initial: InitialState::Displaced {
                offset: [0.0, 0.0, 0.0],
                velocity: [0.0, 0.0, 1.0],
            },
            ..Default::default()
        };
        let err = simulate(&trap, &particle, &GasEnvironment::new(0.0), &FeedbackConfig::disabled(), &cfg);
        assert!(matches!(err, Err(DynamicsError::Escape { .. })), "{err:?}");
    }

    #[test]
    fn csv_round_trip_preserves_micrometres() {
        let traj = Trajectory {
            sample_rate: 496.0,
            t0: 0.0,
            samples: vec![Vec3::new(1.234e-7, -1.9e-5, 3.3e-6), Vec3::new(0.0, -1.8e-5, 1e-9)],
        };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x_um,y_um,z_um\n"));
        let cols = Trajectory::read_csv_um(&buf[..]).unwrap();
        assert_eq!(cols.um[1], traj.component_um(1));
        assert!((cols.sample_rate() - 496.0).abs() < 1e-9);
    }
}
