use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use magtrap::dynamics::{equipartition_temperature, simulate_trials, variance, SimOutput, Trajectory};
use magtrap::tracking::{fill_missing, track_rendered, SyntheticTracking};
use magtrap::{MultipoleCoefficients, TrapModel};
use serde::Serialize;

use crate::checks::{
    field_errors, localisation_rms_px, size_spread, HV_ASSUMED_MASS_PG, TABLE_HV_AXIAL, TABLE_HV_TRANSVERSE_F0,
    TABLE_HV_VERTICAL, TABLE_LINE_ROWS, TABLE_MASS_ROWS,
};
use crate::commands::fit_trap::trap_report;
use crate::commands::simulate::{run_pressures, write_pressure, PressureRun};
use crate::config::{Axis, Calibrate, LoadedConfig, ScenarioConfig};
use crate::error::{CliError, Result};
use crate::output::{pressure_dir, write_json, write_with, RunManifest};
use crate::pipeline::{analyze_set, summary_lines, write_group, AxisResult, Calibration, TrialSet, SUMMARY_HEADER};

/// Rough-vacuum scenario: the published trap, a 28 pg particle and the four
/// thermalised pressures.
pub const ROUGH_CONFIG: &str = r#"seed = 1701

[trap]
y0_um = 75.0

[trap.frequencies]
fx_hz = 104.0
fy_hz = 130.0
fz_hz = 9.6

[particle]
mass_pg = 28.0

[gas]
pressures_mbar = [5.3e-2, 2.7e-2, 1.3e-2, 6.7e-3]
temperature_k = 295.0

[sim]
duration_s = 60.0
n_trials = 30
"#;

/// Feedback-cooled high-vacuum overlay applied on top of the rough scenario.
pub const HV_OVERLAY: &str = r#"[gas]
pressures_mbar = [7e-8]

[sim]
warmup_s = 2.0

[feedback.axial]
mode = "ideal_velocity"
linewidth_hz = 10.6
detection_noise_m = 20e-9

[feedback.vertical]
mode = "bandpass"
linewidth_hz = 6.3
bandwidth_hz = 50.0
detection_noise_m = 20e-9

[feedback.transverse]
mode = "bandpass"
linewidth_hz = 2.0
bandwidth_hz = 50.0
detection_noise_m = 20e-9
"#;

const ZERO_NOISE_TRIALS: usize = 4;
const TRACKED_TRIALS: usize = 2;
const FIELD_POINTS: usize = 1000;
const RMS_FRAMES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Info,
}

impl Status {
    fn of(pass: bool) -> Self {
        if pass {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub criterion: u8,
    pub check: String,
    pub value: String,
    pub target: String,
    pub status: Status,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    fn push(&mut self, criterion: u8, check: impl Into<String>, value: impl Into<String>, target: impl Into<String>, status: Status) {
        self.rows.push(ReportRow {
            criterion,
            check: check.into(),
            value: value.into(),
            target: target.into(),
            status,
        });
    }

    fn check(&mut self, criterion: u8, check: impl Into<String>, value: impl Into<String>, target: impl Into<String>, pass: bool) {
        self.push(criterion, check, value, target, Status::of(pass));
    }

    fn fail(&mut self, criterion: u8, check: impl Into<String>, reason: impl Into<String>) {
        self.push(criterion, check, reason, "", Status::Fail);
    }

    fn info(&mut self, criterion: u8, check: impl Into<String>, value: impl Into<String>) {
        self.push(criterion, check, value, "", Status::Info);
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status == Status::Fail).count()
    }

    /// Overall status of one criterion: FAIL if any of its rows failed.
    pub fn criterion_passed(&self, criterion: u8) -> bool {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.criterion == criterion).collect();
        !rows.is_empty() && rows.iter().all(|r| r.status != Status::Fail)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("criterion,check,value,target,status\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "C{},{},{},{},{}",
                r.criterion,
                csv_field(&r.check),
                csv_field(&r.value),
                csv_field(&r.target),
                r.status.label()
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.check.len()).max().unwrap_or(0);
        let v = self
            .rows
            .iter()
            .filter(|r| r.status != Status::Info)
            .map(|r| r.value.len())
            .max()
            .unwrap_or(0);
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "C{}  {:<w$}  {:<v$}  {:<32}  {}",
                r.criterion,
                r.check,
                r.value,
                r.target,
                r.status.label()
            );
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn rel_err(value: f64, target: f64) -> f64 {
    (value - target).abs() / target.abs()
}

/// Merge `over` into `base`; nested tables merge, other values replace. A
/// trap given by coefficients displaces one given by frequencies and the
/// other way round.
pub fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                if k == "trap" {
                    for (a, b_) in [("coefficients", "frequencies"), ("frequencies", "coefficients")] {
                        if o.contains_key(a) {
                            b.remove(b_);
                        }
                    }
                }
                merge(b, o)
            }
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn load_merged(layers: &[&toml::Table]) -> Result<LoadedConfig> {
    let mut table = toml::Table::new();
    for l in layers {
        merge(&mut table, l);
    }
    let text = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
    LoadedConfig::from_str(&text)
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| CliError::Config(e.message().to_string()))
}

/// The rough and high-vacuum scenarios, with an optional user override
/// merged into both. The high-vacuum run keeps its own pressure, warm-up and
/// feedback.
pub fn scenarios(override_text: Option<&str>) -> Result<(LoadedConfig, LoadedConfig)> {
    let base = parse_table(ROUGH_CONFIG)?;
    let hv = parse_table(HV_OVERLAY)?;
    let user = match override_text {
        Some(t) => parse_table(t)?,
        None => toml::Table::new(),
    };
    let rough = load_merged(&[&base, &user])?;
    let mut user_hv = user;
    user_hv.remove("feedback");
    let hv = load_merged(&[&base, &user_hv, &hv])?;
    Ok((rough, hv))
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub keep_trajectories: bool,
    pub svg: bool,
}

struct Stage {
    timings: Vec<(String, f64)>,
    start: Instant,
}

impl Stage {
    fn new() -> Self {
        Self {
            timings: Vec::new(),
            start: Instant::now(),
        }
    }

    fn done(&mut self, name: &str) -> f64 {
        let t = self.start.elapsed().as_secs_f64();
        self.timings.push((name.to_string(), t));
        self.start = Instant::now();
        t
    }
}

struct Outputs {
    files: Vec<PathBuf>,
    summary: Vec<String>,
}

impl Outputs {
    fn group(&mut self, out: &Path, name: &str, pressure: Option<f64>, results: &[AxisResult], svg: bool) -> Result<()> {
        self.files.extend(write_group(&out.join(name), results, svg)?);
        self.summary.extend(summary_lines(name, pressure, results));
        Ok(())
    }
}

fn result_for(results: &[AxisResult], axis: Axis) -> Option<&AxisResult> {
    results.iter().find(|r| r.axis == axis)
}

pub fn run(override_text: Option<&str>, cli_seed: Option<u64>, out: &Path, opts: Options) -> Result<Report> {
    let (rough, hv) = scenarios(override_text)?;
    let seed = rough.seed(cli_seed);
    let mut manifest = RunManifest::new("reproduce-paper", &rough.sha256, seed);
    let mut report = Report::default();
    let mut outputs = Outputs {
        files: Vec::new(),
        summary: vec![SUMMARY_HEADER.to_string()],
    };
    let mut stage = Stage::new();

    let trap = criterion_1(&rough, out, &mut report, &mut outputs, &mut stage);
    criterion_2(&mut report);
    stage.done("table_arithmetic");
    criterion_5(trap.as_ref(), &mut report);
    stage.done("field_properties");
    criterion_6(&rough.config, trap.as_ref(), &mut report);
    stage.done("size_independence");

    let rough_axial = match &trap {
        Some(trap) => criterion_3(&rough.config, trap, seed, out, opts, &mut report, &mut outputs, &mut stage)?,
        None => {
            for c in [3, 4, 7, 8] {
                report.fail(c, "trap-dependent checks", "not run: trap fit failed");
            }
            None
        }
    };
    if let (Some(trap), Some(rough_run)) = (&trap, &rough_axial) {
        criterion_4(&hv.config, trap, seed, out, opts, rough_run, &mut report, &mut outputs, &mut stage)?;
        criterion_7(&rough.config, trap, seed, out, opts, rough_run, &mut report, &mut outputs, &mut stage)?;
        criterion_8(&rough.config, trap, rough_run, &mut report);
        stage.done("determinism");
    } else if trap.is_some() {
        for c in [4, 7, 8] {
            report.fail(c, "rough-run-dependent checks", "not run: rough-vacuum run failed");
        }
    }

    let summary = out.join("summary.csv");
    write_with(&summary, |w| w.write_all((outputs.summary.join("\n") + "\n").as_bytes()))?;
    outputs.files.push(summary);
    let csv = out.join("report.csv");
    write_with(&csv, |w| w.write_all(report.to_csv().as_bytes()))?;
    let json = out.join("report.json");
    write_json(&json, &report)?;
    outputs.files.extend([csv, json]);
    print!("{}", report.to_text());
    manifest.timings_s = stage.timings;
    manifest.failures = report
        .rows
        .iter()
        .filter(|r| r.status == Status::Fail)
        .map(|r| format!("C{} {}: {}", r.criterion, r.check, r.value))
        .collect();
    manifest.finish(out, &outputs.files)?;
    Ok(report)
}

fn criterion_1(
    rough: &LoadedConfig,
    out: &Path,
    report: &mut Report,
    outputs: &mut Outputs,
    stage: &mut Stage,
) -> Option<TrapModel> {
    let fitted = trap_report(rough);
    let elapsed = stage.done("fit_trap");
    let (trap, r) = match fitted {
        Ok(x) => x,
        Err(e) => {
            report.fail(1, "coefficient fit", e.to_string());
            return None;
        }
    };
    let path = out.join("fit_trap").join("coefficients.json");
    if let Err(e) = write_json(&path, &r) {
        report.fail(1, "write coefficients", e.to_string());
    }
    outputs.files.push(path);
    let rows = [
        ("a2", r.a2_t, -1.3, 0.15, "T"),
        ("a3", r.a3_t, 0.018, 0.15, "T"),
        ("a4", r.a4_t, 0.72, 0.15, "T"),
        ("y_eq", r.y_eq_um, -19.0, 0.10, "um"),
        ("|B(y_eq)|", r.b_eq_tesla, 0.2, 0.10, "T"),
    ];
    for (name, v, target, tol, unit) in rows {
        report.check(
            1,
            name,
            format!("{v:.4} {unit}"),
            format!("{target} {unit} +/- {:.0}%", tol * 100.0),
            rel_err(v, target) <= tol,
        );
    }
    report.check(1, "fit runtime", "see manifest", "< 1 s", elapsed < 1.0);
    Some(trap)
}

fn criterion_2(report: &mut Report) {
    for row in &TABLE_MASS_ROWS {
        let m = row.recomputed_pg();
        let tol = row.tolerance_pg();
        report.check(
            2,
            format!("mass {:e} mbar {}", row.pressure_mbar, row.axis),
            format!("{m:.2} pg"),
            format!("{} +/- {tol:.2} pg", row.mass_pg),
            (m - row.mass_pg).abs() <= tol,
        );
    }
}

fn criterion_5(trap: Option<&TrapModel>, report: &mut Report) {
    let coeffs = trap.map_or_else(MultipoleCoefficients::reported, |t| t.coeffs);
    let e = field_errors(&coeffs, FIELD_POINTS, 5);
    let rows = [
        ("laplacian of potential", e.laplacian, 1e-6),
        ("divergence of B", e.divergence, 1e-12),
        ("curl of B", e.curl, 1e-12),
        ("B vs -grad potential", e.potential_gradient, 1e-6),
        ("grad |B|^2 vs differences", e.gradient, 1e-6),
        ("hessian |B|^2 vs differences", e.hessian, 1e-6),
    ];
    for (name, v, tol) in rows {
        report.check(5, name, format!("{v:.1e}"), format!("<= {tol:.0e} over {FIELD_POINTS} points"), v <= tol);
    }
}

fn criterion_6(cfg: &ScenarioConfig, trap: Option<&TrapModel>, report: &mut Report) {
    let coeffs = trap.map_or_else(MultipoleCoefficients::reported, |t| t.coeffs);
    match size_spread(&coeffs, &cfg.material()) {
        Ok(s) => report.check(6, "mode frequencies across 1 ag..1 pg", format!("{s:.1e}"), "<= 1e-12", s <= 1e-12),
        Err(e) => report.fail(6, "mode frequencies across 1 ag..1 pg", e),
    }
}

/// Rough-run results needed by later criteria.
struct RoughRun {
    /// Axial fit at the lowest rough pressure.
    lowest_axial_f0: f64,
    /// Largest axial linewidth over the rough pressures.
    rough_axial_gammas: Vec<f64>,
    /// Truth trajectories kept for tracking and determinism checks.
    kept: Vec<SimOutput>,
    first_seed: u64,
    pressure_mbar: f64,
}

#[allow(clippy::too_many_arguments)]
fn criterion_3(
    cfg: &ScenarioConfig,
    trap: &TrapModel,
    seed: u64,
    out: &Path,
    opts: Options,
    report: &mut Report,
    outputs: &mut Outputs,
    stage: &mut Stage,
) -> Result<Option<RoughRun>> {
    let modes = trap.mode_frequencies().map_err(|e| CliError::Numerical(e.to_string()))?.as_array();
    let mass_pg = cfg.mass_pg().unwrap_or(f64::NAN);
    let calib = Calibration {
        mode: Calibrate::Mass,
        temperature_k: cfg.gas.temperature_k,
        mass_kg: None,
    };
    let mut kept = None;
    let mut lowest = None;
    let mut gammas = Vec::new();
    let mut single = cfg.clone();
    for (j, &p) in cfg.gas.pressures_mbar.iter().enumerate() {
        single.gas.pressures_mbar = vec![p];
        let run: PressureRun = run_pressures(&single, trap, seed.wrapping_add((j * cfg.sim.n_trials) as u64))?
            .pop()
            .expect("one pressure");
        let dir = out.join("rough").join(pressure_dir(p));
        outputs.files.extend(write_pressure(cfg, trap, &run, &dir, opts.keep_trajectories)?);
        let failures = run.failures();
        if !failures.is_empty() {
            report.fail(3, format!("simulate {p:e} mbar"), failures.join("; "));
        }
        let oks = run.successes();
        let Some(set) = TrialSet::from_outputs(&oks) else {
            continue;
        };
        let results = analyze_set(&set, cfg, Some(modes), calib);
        let name = format!("rough/analysis/{}", pressure_dir(p));
        outputs.group(out, &name, Some(p), &results, opts.svg)?;
        let gamma_gas = cfg.gas(p).damping_rate();
        let table = TABLE_LINE_ROWS.iter().find(|r| rel_err(r.pressure_mbar, p) < 1e-9);
        let strict = j == 0;
        for axis in Axis::ALL {
            let label = |what: &str| format!("{what} {p:e} mbar {}", axis.name());
            let Some(r) = result_for(&results, axis) else { continue };
            let (Some(fit), Some(mass)) = (r.fit(), r.mass()) else {
                report.fail(3, label("fit"), "fit failed");
                continue;
            };
            let k = axis.index();
            let f0_err = rel_err(fit.f0_hz, modes[k]);
            report.check(3, label("f0"), format!("{:.3} Hz", fit.f0_hz), format!("{:.3} Hz +/- 1%", modes[k]), f0_err <= 0.01);
            let g_err = rel_err(fit.gamma_hz, gamma_gas);
            let g_sig = 3.0 * fit.uncertainties.gamma_hz / gamma_gas;
            let m_err = rel_err(mass.value * 1e15, mass_pg);
            let m_sig = 3.0 * mass.std / mass.value;
            if strict {
                report.check(3, label("gamma"), format!("{:.4} Hz", fit.gamma_hz), format!("{gamma_gas:.4} Hz +/- 10%"), g_err <= 0.10);
                report.check(3, label("mass"), format!("{:.3} pg", mass.value * 1e15), format!("{mass_pg} pg +/- 5%"), m_err <= 0.05);
            } else {
                report.check(
                    3,
                    label("gamma"),
                    format!("{:.4} Hz", fit.gamma_hz),
                    format!("{gamma_gas:.4} Hz +/- max(10%, 3 sigma)"),
                    g_err <= 0.10f64.max(g_sig),
                );
                report.check(
                    3,
                    label("mass"),
                    format!("{:.3} pg", mass.value * 1e15),
                    format!("{mass_pg} pg +/- max(5%, 3 sigma)"),
                    m_err <= 0.05f64.max(m_sig),
                );
            }
            if let Some(t) = table {
                report.check(
                    3,
                    label("f0 vs table"),
                    format!("{:.3} Hz", fit.f0_hz),
                    format!("{} Hz +/- 1%", t.f0_hz[k]),
                    rel_err(fit.f0_hz, t.f0_hz[k]) <= 0.01,
                );
                report.check(
                    3,
                    label("gamma vs table"),
                    format!("{:.4} Hz", fit.gamma_hz),
                    format!("{} Hz +/- 15%", t.gamma_hz[k]),
                    rel_err(fit.gamma_hz, t.gamma_hz[k]) <= 0.15,
                );
            }
            if axis == Axis::Axial {
                gammas.push(fit.gamma_hz);
                lowest = Some(fit.f0_hz);
            }
        }
        if j == 0 {
            kept = Some((run.first_seed, p, run.outputs.into_iter().filter_map(|r| r.ok()).take(TRACKED_TRIALS).collect::<Vec<_>>()));
        }
        stage.done(&format!("rough {p:e} mbar"));
    }
    Ok(match (kept, lowest) {
        (Some((first_seed, pressure_mbar, kept)), Some(f0)) if !kept.is_empty() => Some(RoughRun {
            lowest_axial_f0: f0,
            rough_axial_gammas: gammas,
            kept,
            first_seed,
            pressure_mbar,
        }),
        _ => None,
    })
}

#[allow(clippy::too_many_arguments)]
fn criterion_4(
    cfg: &ScenarioConfig,
    trap: &TrapModel,
    seed: u64,
    out: &Path,
    opts: Options,
    rough: &RoughRun,
    report: &mut Report,
    outputs: &mut Outputs,
    stage: &mut Stage,
) -> Result<()> {
    let modes = trap.mode_frequencies().map_err(|e| CliError::Numerical(e.to_string()))?;
    let particle = cfg.particle()?;
    let p = cfg.gas.pressures_mbar[0];
    let gas = cfg.gas(p);

    // variance check without detection noise
    let mut quiet = cfg.clone();
    for a in [&mut quiet.feedback.transverse, &mut quiet.feedback.vertical, &mut quiet.feedback.axial]
        .into_iter()
        .flatten()
    {
        a.detection_noise_m = 0.0;
    }
    let fb = quiet.feedback(&modes, particle.mass);
    let sim = quiet.sim_config(seed.wrapping_add(2000));
    let runs = simulate_trials(trap, &particle, &gas, &fb, &sim, ZERO_NOISE_TRIALS);
    let k = Axis::Axial.index();
    let mut temps = Vec::new();
    for r in &runs {
        match r {
            Ok(o) => temps.push(equipartition_temperature(particle.mass, modes.fz, variance(&o.truth.component(k)))),
            Err(e) => report.fail(4, "zero-noise run", e.to_string()),
        }
    }
    let gamma_gas = gas.damping_rate();
    let gamma_fb = fb.axes[k].gain / (2.0 * std::f64::consts::PI * particle.mass);
    let expected = gas.temperature_k * gamma_gas / (gamma_gas + gamma_fb);
    if !temps.is_empty() {
        let t = temps.iter().sum::<f64>() / temps.len() as f64;
        report.check(
            4,
            "zero-noise axial T_eff",
            format!("{t:.4e} K"),
            format!("{expected:.4e} K +/- 15%"),
            rel_err(t, expected) <= 0.15,
        );
    }
    drop(runs);
    stage.done("hv zero noise");

    let run = run_pressures(cfg, trap, seed.wrapping_add(1000))?.pop().expect("one pressure");
    let dir = out.join("hv").join(pressure_dir(p));
    outputs.files.extend(write_pressure(cfg, trap, &run, &dir, opts.keep_trajectories)?);
    let failures = run.failures();
    if !failures.is_empty() {
        report.fail(4, "simulate high vacuum", failures.join("; "));
    }
    let oks = run.successes();
    let Some(set) = TrialSet::from_outputs(&oks) else {
        report.fail(4, "high-vacuum analysis", "no trials survived");
        return Ok(());
    };
    let calib = Calibration {
        mode: Calibrate::Temperature,
        temperature_k: cfg.gas.temperature_k,
        mass_kg: Some(HV_ASSUMED_MASS_PG * 1e-15),
    };
    let results = analyze_set(&set, cfg, Some(modes.as_array()), calib);
    outputs.group(out, &format!("hv/analysis/{}", pressure_dir(p)), Some(p), &results, opts.svg)?;
    stage.done("hv cooled");

    let axial = result_for(&results, Axis::Axial).and_then(|r| r.fit().zip(r.temperature()));
    match axial {
        Some((fit, t)) => {
            report.check(4, "cooled axial T", format!("{:.4e} K", t.value), "<= 1 K", t.value <= 1.0);
            let factor = cfg.gas.temperature_k / t.value;
            report.check(4, "axial cooling factor", format!("{factor:.3e}"), ">= 300", factor >= 300.0);
            let shift = (fit.f0_hz - rough.lowest_axial_f0).abs();
            report.check(
                4,
                "axial f0 shift vs lowest rough pressure",
                format!("{shift:.3} Hz"),
                "<= 1 Hz",
                shift <= 1.0,
            );
            let widest = rough.rough_axial_gammas.iter().copied().fold(0.0, f64::max);
            report.check(
                4,
                "axial gamma broadened",
                format!("{:.3} Hz", fit.gamma_hz),
                format!("> {widest:.3} Hz (widest rough)"),
                fit.gamma_hz > widest,
            );
            report.info(
                4,
                "axial vs published cooled row",
                format!(
                    "f0 {:.2} / {} Hz, gamma {:.2} / {} Hz, T {:.2e} / {} K",
                    fit.f0_hz, TABLE_HV_AXIAL.0, fit.gamma_hz, TABLE_HV_AXIAL.1, t.value, TABLE_HV_AXIAL.2
                ),
            );
        }
        None => report.fail(4, "cooled axial fit", "fit failed"),
    }
    for (axis, published) in [
        (Axis::Vertical, format!("{} Hz, {} Hz, {} K", TABLE_HV_VERTICAL.0, TABLE_HV_VERTICAL.1, TABLE_HV_VERTICAL.2)),
        (Axis::Transverse, format!("{TABLE_HV_TRANSVERSE_F0} Hz")),
    ] {
        let text = match result_for(&results, axis).and_then(|r| r.fit().zip(r.temperature())) {
            Some((fit, t)) => format!(
                "f0 {:.2} Hz, gamma {:.2} Hz, T {:.2e} K (published {published})",
                fit.f0_hz, fit.gamma_hz, t.value
            ),
            None => "fit failed".into(),
        };
        report.info(4, format!("cooled {}", axis.name()), text);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn criterion_7(
    cfg: &ScenarioConfig,
    trap: &TrapModel,
    seed: u64,
    out: &Path,
    opts: Options,
    rough: &RoughRun,
    report: &mut Report,
    outputs: &mut Outputs,
    stage: &mut Stage,
) -> Result<()> {
    let t = cfg.tracking_or_default();
    let y_eq = trap.find_equilibrium().map_err(|e| CliError::Numerical(e.to_string()))?;
    let base = cfg.camera_from(&t, [y_eq * 1e6, 0.0]);
    let snr10 = magtrap::tracking::CameraModel {
        background_std: base.peak_counts / 10.0,
        ..base
    };
    let rms = localisation_rms_px(&snr10, RMS_FRAMES, seed.wrapping_add(3000));
    report.check(
        7,
        format!("render-locate RMS at SNR {:.0}", snr10.snr()),
        format!("{rms:.4} px"),
        "< 0.2 px",
        rms < 0.2,
    );
    stage.done("tracking rms");

    let opts_track = SyntheticTracking {
        min_mass: t.min_mass_counts.unwrap_or_else(|| base.default_min_mass()),
        dim_probability: 0.01,
        dim_factor: 0.05,
        seed: seed.wrapping_add(4000),
    };
    let mut tracked = Vec::new();
    let mut dropped = 0usize;
    let mut frames = 0usize;
    for (i, o) in rough.kept.iter().enumerate() {
        let opts_i = SyntheticTracking {
            seed: opts_track.seed.wrapping_add((i * o.truth.len()) as u64),
            ..opts_track
        };
        let raw = track_rendered(&base, &o.truth, &opts_i).map_err(|e| CliError::Numerical(e.to_string()))?;
        dropped += raw.n_missing();
        frames += raw.points.len();
        let filled = fill_missing(&raw).map_err(|e| CliError::Numerical(e.to_string()))?;
        tracked.push(filled.to_trajectory());
    }
    let fraction = dropped as f64 / frames as f64;
    report.info(7, "tracked dropout fraction", format!("{fraction:.4}"));
    let to_set = |ts: &[&Trajectory]| TrialSet {
        sample_rate: ts[0].sample_rate,
        trials: ts.iter().map(|t| [0, 1, 2].map(|k| t.component_um(k))).collect(),
    };
    let direct = to_set(&rough.kept.iter().map(|o| &o.truth).collect::<Vec<_>>());
    let tracked_set = to_set(&tracked.iter().collect::<Vec<_>>());
    let calib = Calibration {
        mode: Calibrate::Temperature,
        temperature_k: cfg.gas.temperature_k,
        mass_kg: cfg.mass_pg().map(|m| m * 1e-15),
    };
    let mut tracked_cfg = cfg.clone();
    tracked_cfg.analysis.axes = vec![Axis::Vertical, Axis::Axial];
    let modes = trap.mode_frequencies().map_err(|e| CliError::Numerical(e.to_string()))?.as_array();
    let d = analyze_set(&direct, &tracked_cfg, Some(modes), calib);
    let tr = analyze_set(&tracked_set, &tracked_cfg, Some(modes), calib);
    outputs.group(out, "tracking/analysis/direct", Some(rough.pressure_mbar), &d, opts.svg)?;
    outputs.group(out, "tracking/analysis/tracked", Some(rough.pressure_mbar), &tr, opts.svg)?;
    let df = direct.sample_rate / direct.trials[0][0].len() as f64;
    for axis in [Axis::Vertical, Axis::Axial] {
        let pair = result_for(&d, axis)
            .and_then(|r| r.fit().zip(r.temperature()))
            .zip(result_for(&tr, axis).and_then(|r| r.fit().zip(r.temperature())));
        let Some(((fd, td), (ft, tt))) = pair else {
            report.fail(7, format!("tracked {} fit", axis.name()), "fit failed");
            continue;
        };
        let shift = (ft.f0_hz - fd.f0_hz).abs();
        report.check(
            7,
            format!("tracked vs direct f0 {}", axis.name()),
            format!("{shift:.5} Hz"),
            format!("<= one bin ({df:.5} Hz)"),
            shift <= df * (1.0 + 1e-9),
        );
        let bias = tt.value / td.value - 1.0;
        report.check(
            7,
            format!("1% dropout temperature bias {}", axis.name()),
            format!("{:+.3}%", 100.0 * bias),
            "< 3%",
            bias.abs() < 0.03,
        );
    }
    stage.done("tracking pipeline");
    Ok(())
}

fn criterion_8(cfg: &ScenarioConfig, trap: &TrapModel, rough: &RoughRun, report: &mut Report) {
    let mut single = cfg.clone();
    single.gas.pressures_mbar = vec![rough.pressure_mbar];
    single.sim.n_trials = 1;
    let bytes = |o: &SimOutput| {
        let mut v = Vec::new();
        o.truth.write_csv(&mut v).map(|_| v)
    };
    let again = run_pressures(&single, trap, rough.first_seed)
        .ok()
        .and_then(|mut r| r.pop())
        .and_then(|r| r.outputs.into_iter().next())
        .and_then(|r| r.ok());
    let same = match (again, rough.kept.first()) {
        (Some(a), Some(b)) => matches!((bytes(&a), bytes(b)), (Ok(x), Ok(y)) if x == y),
        _ => false,
    };
    report.check(
        8,
        "rerun of first rough trial",
        if same { "identical" } else { "differs" },
        "byte-identical CSV",
        same,
    );
}
