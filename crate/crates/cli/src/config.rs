//! Scenario configuration. Every numeric key carries its unit in the name.

use std::path::Path;

use magtrap::dynamics::{
    AxisFeedback, FeedbackConfig, FeedbackMode, GasEnvironment, InitialState, PotentialMode, SimConfig,
};
use magtrap::spectra::{FitOptions, Weighting};
use magtrap::tracking::CameraModel;
use magtrap::trapstatics::{fit_coefficients, CoefficientFit, Material, ModeFrequencies, Particle, TrapModel};
use magtrap::MultipoleCoefficients;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::output::{seed_from_hash, sha256_hex};

pub const AXIS_NAMES: [&str; 3] = ["transverse", "vertical", "axial"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Transverse,
    Vertical,
    Axial,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Transverse, Axis::Vertical, Axis::Axial];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        AXIS_NAMES[self.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: Option<u64>,
    pub trap: Option<TrapSection>,
    pub particle: Option<ParticleSection>,
    #[serde(default)]
    pub gas: GasSection,
    #[serde(default)]
    pub feedback: FeedbackSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    pub tracking: Option<TrackingSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapSection {
    #[serde(default = "default_y0_um")]
    pub y0_um: f64,
    #[serde(default = "default_chi")]
    pub chi_si: f64,
    #[serde(default = "default_density")]
    pub density_kg_per_m3: f64,
    pub frequencies: Option<FrequencySection>,
    pub coefficients: Option<CoefficientSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencySection {
    pub fx_hz: f64,
    pub fy_hz: f64,
    pub fz_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    pub a2_t: f64,
    pub a3_t: f64,
    pub a4_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitFromPsd {
    #[serde(rename = "fit-from-psd")]
    FitFromPsd,
}

/// A mass in picograms, or the marker `"fit-from-psd"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MassSpec {
    Picograms(f64),
    Fit(FitFromPsd),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSection {
    pub mass_pg: MassSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GasSection {
    #[serde(default)]
    pub pressures_mbar: Vec<f64>,
    #[serde(default = "default_temperature")]
    pub temperature_k: f64,
    #[serde(default = "default_kappa")]
    pub kappa_hz_per_mbar: f64,
}

impl Default for GasSection {
    fn default() -> Self {
        Self {
            pressures_mbar: Vec::new(),
            temperature_k: default_temperature(),
            kappa_hz_per_mbar: default_kappa(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub mode: FeedbackMode,
    /// Defaults to the axis mode frequency.
    pub center_freq_hz: Option<f64>,
    /// Defaults to the centre frequency.
    pub bandwidth_hz: Option<f64>,
    pub gain_n_s_per_m: Option<f64>,
    /// Extra damping linewidth to aim for; converted to a gain.
    pub linewidth_hz: Option<f64>,
    pub delay_samples: Option<usize>,
    #[serde(default = "default_force_max")]
    pub force_max_n: f64,
    #[serde(default)]
    pub detection_noise_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSection {
    #[serde(default = "default_coupling")]
    pub coupling_ratio: [f64; 3],
    #[serde(default)]
    pub transverse_nonlinearity_per_m: f64,
    pub transverse: Option<AxisSection>,
    pub vertical: Option<AxisSection>,
    pub axial: Option<AxisSection>,
}

impl Default for FeedbackSection {
    fn default() -> Self {
        Self {
            coupling_ratio: default_coupling(),
            transverse_nonlinearity_per_m: 0.0,
            transverse: None,
            vertical: None,
            axial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default)]
    pub warmup_s: f64,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    #[serde(default = "default_fps")]
    pub output_rate_hz: f64,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub potential: PotentialMode,
    #[serde(default)]
    pub line_noise_amplitude_n: f64,
    #[serde(default = "default_line_freq")]
    pub line_noise_freq_hz: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            duration_s: default_duration(),
            warmup_s: 0.0,
            dt_s: default_dt(),
            output_rate_hz: default_fps(),
            n_trials: default_trials(),
            potential: PotentialMode::Full,
            line_noise_amplitude_n: 0.0,
            line_noise_freq_hz: default_line_freq(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibrate {
    /// Mass from the line strength at the gas temperature.
    #[default]
    Mass,
    /// Temperature from the line strength at the configured mass.
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Truth,
    Measured,
}

impl Source {
    pub fn dir_name(self) -> &'static str {
        match self {
            Source::Truth => "trajectories",
            Source::Measured => "measured",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub transverse: Option<[f64; 2]>,
    pub vertical: Option<[f64; 2]>,
    pub axial: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_axes")]
    pub axes: Vec<Axis>,
    #[serde(default = "default_exclude")]
    pub exclude_bands_hz: Vec<[f64; 2]>,
    #[serde(default)]
    pub windows_hz: WindowSection,
    #[serde(default = "yes")]
    pub fit_floor: bool,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub calibrate: Calibrate,
    #[serde(default)]
    pub source: Source,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            axes: default_axes(),
            exclude_bands_hz: default_exclude(),
            windows_hz: WindowSection::default(),
            fit_floor: true,
            weighting: Weighting::Auto,
            calibrate: Calibrate::Mass,
            source: Source::Truth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingSection {
    #[serde(default = "default_calibration")]
    pub calibration_um_per_px: f64,
    #[serde(default = "default_psf")]
    pub psf_sigma_px: f64,
    #[serde(default = "default_peak")]
    pub peak_counts: f64,
    #[serde(default = "default_bg_mean")]
    pub background_mean_counts: f64,
    #[serde(default = "default_bg_std")]
    pub background_std_counts: f64,
    #[serde(default = "default_width")]
    pub width_px: usize,
    #[serde(default = "default_height")]
    pub height_px: usize,
    #[serde(default = "default_bit_depth")]
    pub bit_depth: u8,
    #[serde(default = "default_fps")]
    pub fps_hz: f64,
    /// (y, z) at the frame centre; defaults to the trajectory mean when
    /// rendering and to the stream sidecar when tracking.
    pub center_um: Option<[f64; 2]>,
    /// Defaults to 30% of the expected spot mass.
    pub min_mass_counts: Option<f64>,
    #[serde(default)]
    pub dim_probability: f64,
    #[serde(default = "default_dim_factor")]
    pub dim_factor: f64,
}

impl Default for TrackingSection {
    fn default() -> Self {
        Self {
            calibration_um_per_px: default_calibration(),
            psf_sigma_px: default_psf(),
            peak_counts: default_peak(),
            background_mean_counts: default_bg_mean(),
            background_std_counts: default_bg_std(),
            width_px: default_width(),
            height_px: default_height(),
            bit_depth: default_bit_depth(),
            fps_hz: default_fps(),
            center_um: None,
            min_mass_counts: None,
            dim_probability: 0.0,
            dim_factor: default_dim_factor(),
        }
    }
}

fn yes() -> bool {
    true
}
fn default_y0_um() -> f64 {
    magtrap::constants::TRAP_Y0 * 1e6
}
fn default_chi() -> f64 {
    magtrap::constants::DIAMOND_CHI
}
fn default_density() -> f64 {
    magtrap::constants::DIAMOND_RHO
}
fn default_temperature() -> f64 {
    magtrap::constants::AMBIENT_K
}
fn default_kappa() -> f64 {
    GasEnvironment::DEFAULT_KAPPA
}
fn default_force_max() -> f64 {
    1e-9
}
fn default_coupling() -> [f64; 3] {
    [1.0; 3]
}
fn default_duration() -> f64 {
    60.0
}
fn default_dt() -> f64 {
    SimConfig::default().dt_s
}
fn default_fps() -> f64 {
    magtrap::constants::CAMERA_FPS
}
fn default_trials() -> usize {
    1
}
fn default_line_freq() -> f64 {
    120.0
}
fn default_axes() -> Vec<Axis> {
    Axis::ALL.to_vec()
}
fn default_exclude() -> Vec<[f64; 2]> {
    vec![[119.0, 121.0]]
}
fn default_calibration() -> f64 {
    magtrap::constants::CAMERA_UM_PER_PX
}
fn default_psf() -> f64 {
    1.5
}
fn default_peak() -> f64 {
    200.0
}
fn default_bg_mean() -> f64 {
    20.0
}
fn default_bg_std() -> f64 {
    2.0
}
fn default_width() -> usize {
    256
}
fn default_height() -> usize {
    64
}
fn default_bit_depth() -> u8 {
    16
}
fn default_dim_factor() -> f64 {
    0.1
}

/// A parsed configuration together with the hash of its source text.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ScenarioConfig,
    pub sha256: String,
}

impl LoadedConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(Self {
            config,
            sha256: sha256_hex(text.as_bytes()),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Explicit seed, else the config's own seed, else one derived from the
    /// config hash.
    pub fn seed(&self, cli_seed: Option<u64>) -> u64 {
        cli_seed
            .or(self.config.seed)
            .unwrap_or_else(|| seed_from_hash(&self.sha256))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be a positive number, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be >= 0, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.trap {
            positive("trap.y0_um", t.y0_um)?;
            positive("trap.density_kg_per_m3", t.density_kg_per_m3)?;
            if !t.chi_si.is_finite() {
                return Err(CliError::Config("trap.chi_si must be finite".into()));
            }
            match (&t.frequencies, &t.coefficients) {
                (Some(f), None) => {
                    positive("trap.frequencies.fx_hz", f.fx_hz)?;
                    positive("trap.frequencies.fy_hz", f.fy_hz)?;
                    positive("trap.frequencies.fz_hz", f.fz_hz)?;
                }
                (None, Some(c)) => {
                    for (n, v) in [("a2_t", c.a2_t), ("a3_t", c.a3_t), ("a4_t", c.a4_t)] {
                        if !v.is_finite() {
                            return Err(CliError::Config(format!("trap.coefficients.{n} must be finite")));
                        }
                    }
                }
                (Some(_), Some(_)) => {
                    return Err(CliError::Config(
                        "trap: give either [trap.frequencies] or [trap.coefficients], not both".into(),
                    ))
                }
                (None, None) => {
                    return Err(CliError::Config(
                        "trap: missing [trap.frequencies] (fx_hz, fy_hz, fz_hz) or [trap.coefficients]".into(),
                    ))
                }
            }
        }
        if let Some(ParticleSection {
            mass_pg: MassSpec::Picograms(m),
        }) = self.particle
        {
            positive("particle.mass_pg", m)?;
        }
        for p in &self.gas.pressures_mbar {
            non_negative("gas.pressures_mbar", *p)?;
        }
        positive("gas.temperature_k", self.gas.temperature_k)?;
        positive("gas.kappa_hz_per_mbar", self.gas.kappa_hz_per_mbar)?;
        for (name, ax) in self.feedback_axes() {
            let Some(a) = ax else { continue };
            if a.gain_n_s_per_m.is_some() && a.linewidth_hz.is_some() {
                return Err(CliError::Config(format!(
                    "feedback.{name}: give gain_n_s_per_m or linewidth_hz, not both"
                )));
            }
            if a.enabled && a.gain_n_s_per_m.is_none() && a.linewidth_hz.is_none() {
                return Err(CliError::Config(format!(
                    "feedback.{name}: missing gain_n_s_per_m or linewidth_hz"
                )));
            }
            for (k, v) in [("center_freq_hz", a.center_freq_hz), ("bandwidth_hz", a.bandwidth_hz)] {
                if let Some(v) = v {
                    positive(&format!("feedback.{name}.{k}"), v)?;
                }
            }
            for (k, v) in [("gain_n_s_per_m", a.gain_n_s_per_m), ("linewidth_hz", a.linewidth_hz)] {
                if let Some(v) = v {
                    non_negative(&format!("feedback.{name}.{k}"), v)?;
                }
            }
            positive(&format!("feedback.{name}.force_max_n"), a.force_max_n)?;
            non_negative(&format!("feedback.{name}.detection_noise_m"), a.detection_noise_m)?;
        }
        for (i, c) in self.feedback.coupling_ratio.iter().enumerate() {
            if !c.is_finite() {
                return Err(CliError::Config(format!("feedback.coupling_ratio[{i}] must be finite")));
            }
        }
        let s = &self.sim;
        positive("sim.duration_s", s.duration_s)?;
        non_negative("sim.warmup_s", s.warmup_s)?;
        positive("sim.dt_s", s.dt_s)?;
        positive("sim.output_rate_hz", s.output_rate_hz)?;
        if s.n_trials == 0 {
            return Err(CliError::Config("sim.n_trials must be >= 1".into()));
        }
        non_negative("sim.line_noise_amplitude_n", s.line_noise_amplitude_n)?;
        positive("sim.line_noise_freq_hz", s.line_noise_freq_hz)?;
        for b in &self.analysis.exclude_bands_hz {
            if !(b[0] < b[1]) {
                return Err(CliError::Config(format!("analysis.exclude_bands_hz: bad band {b:?}")));
            }
        }
        for (name, w) in self.windows() {
            if let Some(w) = w {
                if !(w[0] >= 0.0 && w[0] < w[1]) {
                    return Err(CliError::Config(format!("analysis.windows_hz.{name}: bad window {w:?}")));
                }
            }
        }
        if let Some(t) = &self.tracking {
            self.camera_from(t, [0.0, 0.0])
                .validate()
                .map_err(|e| CliError::Config(format!("tracking: {e}")))?;
            if !(0.0..=1.0).contains(&t.dim_probability) {
                return Err(CliError::Config("tracking.dim_probability must be in [0, 1]".into()));
            }
            non_negative("tracking.dim_factor", t.dim_factor)?;
        }
        Ok(())
    }

    fn feedback_axes(&self) -> [(&'static str, Option<AxisSection>); 3] {
        [
            ("transverse", self.feedback.transverse),
            ("vertical", self.feedback.vertical),
            ("axial", self.feedback.axial),
        ]
    }

    fn windows(&self) -> [(&'static str, Option<[f64; 2]>); 3] {
        let w = &self.analysis.windows_hz;
        [("transverse", w.transverse), ("vertical", w.vertical), ("axial", w.axial)]
    }

    pub fn material(&self) -> Material {
        self.trap.as_ref().map_or_else(Material::diamond, |t| Material {
            chi: t.chi_si,
            rho: t.density_kg_per_m3,
        })
    }

    fn trap_section(&self) -> Result<&TrapSection> {
        self.trap
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [trap] section".into()))
    }

    pub fn measured_frequencies(&self) -> Result<ModeFrequencies> {
        let t = self.trap_section()?;
        let f = t.frequencies.ok_or_else(|| {
            CliError::Config("missing [trap.frequencies] (fx_hz, fy_hz, fz_hz)".into())
        })?;
        Ok(ModeFrequencies::new(f.fx_hz, f.fy_hz, f.fz_hz))
    }

    /// Run the coefficient fit when the trap is given by its frequencies.
    pub fn fit_trap(&self) -> Result<CoefficientFit> {
        let t = self.trap_section()?;
        let f = self.measured_frequencies()?;
        fit_coefficients(&f, &self.material(), t.y0_um * 1e-6).map_err(|e| CliError::Numerical(e.to_string()))
    }

    pub fn trap_model(&self) -> Result<TrapModel> {
        let t = self.trap_section()?;
        let coeffs = match t.coefficients {
            Some(c) => MultipoleCoefficients::new(c.a2_t, c.a3_t, c.a4_t, t.y0_um * 1e-6)
                .map_err(|e| CliError::Config(e.to_string()))?,
            None => self.fit_trap()?.coeffs,
        };
        Ok(TrapModel::new(coeffs, self.material()))
    }

    pub fn mass_pg(&self) -> Option<f64> {
        match self.particle {
            Some(ParticleSection {
                mass_pg: MassSpec::Picograms(m),
            }) => Some(m),
            _ => None,
        }
    }

    pub fn particle(&self) -> Result<Particle> {
        let m = self.mass_pg().ok_or_else(|| {
            CliError::Config("particle.mass_pg must be a number to simulate or to calibrate temperature".into())
        })?;
        Particle::new(self.material(), m * 1e-15).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn gas(&self, pressure_mbar: f64) -> GasEnvironment {
        GasEnvironment {
            pressure_mbar,
            temperature_k: self.gas.temperature_k,
            kappa_hz_per_mbar: self.gas.kappa_hz_per_mbar,
        }
    }

    pub fn has_feedback(&self) -> bool {
        self.feedback_axes().iter().any(|(_, a)| a.is_some_and(|a| a.enabled))
    }

    pub fn has_detection_noise(&self) -> bool {
        self.feedback_axes()
            .iter()
            .any(|(_, a)| a.is_some_and(|a| a.detection_noise_m > 0.0))
    }

    pub fn feedback(&self, modes: &ModeFrequencies, mass_kg: f64) -> FeedbackConfig {
        let f = modes.as_array();
        let mut fb = FeedbackConfig {
            coupling: self.feedback.coupling_ratio,
            transverse_nonlinearity: self.feedback.transverse_nonlinearity_per_m,
            ..FeedbackConfig::default()
        };
        for (k, (_, a)) in self.feedback_axes().into_iter().enumerate() {
            let Some(a) = a else { continue };
            let center = a.center_freq_hz.unwrap_or(f[k]);
            let gain = match (a.gain_n_s_per_m, a.linewidth_hz) {
                (Some(g), _) => g,
                (None, Some(l)) => AxisFeedback::gain_for_linewidth(mass_kg, l),
                (None, None) => 0.0,
            };
            fb.axes[k] = AxisFeedback {
                enabled: a.enabled,
                mode: a.mode,
                center_freq_hz: center,
                bandwidth_hz: a.bandwidth_hz.unwrap_or(center),
                gain,
                extra_delay: a.delay_samples,
                force_max_n: a.force_max_n,
                detection_noise_m: a.detection_noise_m,
            };
        }
        fb
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            duration_s: s.duration_s,
            warmup_s: s.warmup_s,
            dt_s: s.dt_s,
            output_rate_hz: s.output_rate_hz,
            seed,
            initial: InitialState::Thermal,
            potential: s.potential,
            line_noise_n: s.line_noise_amplitude_n,
            line_noise_hz: s.line_noise_freq_hz,
        }
    }

    pub fn fit_options(&self, axis: Axis, hint: Option<f64>) -> FitOptions {
        let a = &self.analysis;
        FitOptions {
            exclude_bands: a.exclude_bands_hz.iter().map(|b| (b[0], b[1])).collect(),
            window: self.windows()[axis.index()].1.map(|w| (w[0], w[1])),
            f0_hint: hint,
            fit_floor: a.fit_floor,
            weighting: a.weighting,
        }
    }

    pub fn camera_from(&self, t: &TrackingSection, center_um: [f64; 2]) -> CameraModel {
        CameraModel {
            calibration_um_per_px: t.calibration_um_per_px,
            psf_sigma_px: t.psf_sigma_px,
            peak_counts: t.peak_counts,
            background_mean: t.background_mean_counts,
            background_std: t.background_std_counts,
            width: t.width_px,
            height: t.height_px,
            center_um: t.center_um.unwrap_or(center_um),
            bit_depth: t.bit_depth,
            fps: t.fps_hz,
        }
    }

    pub fn tracking_or_default(&self) -> TrackingSection {
        self.tracking.unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAPER: &str = r#"
[trap.frequencies]
fx_hz = 104.0
fy_hz = 130.0
fz_hz = 9.6

[particle]
mass_pg = 28.0

[gas]
pressures_mbar = [5.3e-2]
"#;

    #[test]
    fn parses_minimal_config() {
        let c = LoadedConfig::from_str(PAPER).unwrap();
        assert_eq!(c.config.mass_pg(), Some(28.0));
        assert_eq!(c.config.trap.as_ref().unwrap().y0_um, 75.0);
        assert_eq!(c.config.sim.n_trials, 1);
        assert_eq!(c.config.analysis.axes, Axis::ALL.to_vec());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = PAPER.replace("mass_pg = 28.0", "mass_pg = 28.0\nmass = 3");
        let e = LoadedConfig::from_str(&text).unwrap_err();
        assert!(matches!(e, CliError::Config(ref m) if m.contains("mass")), "{e}");
    }

    #[test]
    fn unit_less_keys_are_rejected() {
        let text = PAPER.replace("pressures_mbar", "pressures");
        assert!(LoadedConfig::from_str(&text).is_err());
    }

    #[test]
    fn missing_frequency_names_the_key() {
        let text = PAPER.replace("fz_hz = 9.6\n", "");
        let e = LoadedConfig::from_str(&text).unwrap_err();
        assert!(e.to_string().contains("fz_hz"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn fit_from_psd_marker() {
        let text = PAPER.replace("mass_pg = 28.0", "mass_pg = \"fit-from-psd\"");
        let c = LoadedConfig::from_str(&text).unwrap();
        assert_eq!(c.config.mass_pg(), None);
        assert!(c.config.particle().is_err());
        let bad = PAPER.replace("mass_pg = 28.0", "mass_pg = \"heavy\"");
        assert!(LoadedConfig::from_str(&bad).is_err());
    }

    #[test]
    fn seed_precedence() {
        let c = LoadedConfig::from_str(PAPER).unwrap();
        let derived = c.seed(None);
        assert_eq!(derived, seed_from_hash(&c.sha256));
        assert_eq!(c.seed(Some(5)), 5);
        let seeded = LoadedConfig::from_str(&format!("seed = 9\n{PAPER}")).unwrap();
        assert_eq!(seeded.seed(None), 9);
        assert_eq!(seeded.seed(Some(5)), 5);
    }

    #[test]
    fn feedback_linewidth_becomes_gain() {
        let text = format!("{PAPER}\n[feedback.axial]\nmode = \"ideal_velocity\"\nlinewidth_hz = 10.0\n");
        let c = LoadedConfig::from_str(&text).unwrap().config;
        let fb = c.feedback(&ModeFrequencies::reported(), 28e-15);
        assert!(fb.axes[2].enabled && !fb.axes[0].enabled);
        assert_eq!(fb.axes[2].mode, FeedbackMode::IdealVelocity);
        assert!((fb.axes[2].gain - AxisFeedback::gain_for_linewidth(28e-15, 10.0)).abs() < 1e-30);
        assert_eq!(fb.axes[2].center_freq_hz, 9.6);
        assert!(c.has_feedback());
    }

    #[test]
    fn conflicting_trap_sections() {
        let text = format!("{PAPER}\n[trap.coefficients]\na2_t = -1.3\na3_t = 0.018\na4_t = 0.72\n");
        assert!(LoadedConfig::from_str(&text).is_err());
    }
}
