use magtrap::constants::{KB, TRAP_Y0};
use magtrap::dynamics::{
    simulate, simulate_trials, variance, AxisFeedback, FeedbackConfig, FeedbackMode, GasEnvironment, InitialState,
    PotentialMode, SimConfig, SimOutput,
};
use magtrap::spectra::{fit_psd, periodogram, temperature_from_fit, trial_psd, FitOptions};
use magtrap::trapstatics::{fit_coefficients, Material, ModeFrequencies, Particle, TrapModel};
use std::f64::consts::PI;

const MASS: f64 = 28e-15;

fn paper_trap() -> TrapModel {
    let m = Material::diamond();
    let fit = fit_coefficients(&ModeFrequencies::reported(), &m, TRAP_Y0).unwrap();
    TrapModel::new(fit.coeffs, m)
}

fn particle() -> Particle {
    Particle::new(Material::diamond(), MASS).unwrap()
}

fn run(gas: &GasEnvironment, fb: &FeedbackConfig, cfg: &SimConfig, n: usize) -> Vec<SimOutput> {
    simulate_trials(&paper_trap(), &particle(), gas, fb, cfg, n)
        .into_iter()
        .map(|r| r.unwrap())
        .collect()
}

fn ideal_feedback(axes: &[usize], linewidths: [f64; 3], modes: &ModeFrequencies) -> FeedbackConfig {
    let mut fb = FeedbackConfig::default();
    let f = modes.as_array();
    for &k in axes {
        fb.axes[k] = AxisFeedback {
            enabled: true,
            mode: FeedbackMode::IdealVelocity,
            center_freq_hz: f[k],
            bandwidth_hz: f[k],
            gain: AxisFeedback::gain_for_linewidth(MASS, linewidths[k]),
            ..AxisFeedback::default()
        };
    }
    fb
}

#[test]
fn equipartition_without_feedback() {
    let gas = GasEnvironment::new(5.3e-2);
    let runs = run(&gas, &FeedbackConfig::disabled(), &SimConfig::default(), 30);
    let f = runs[0].modes.as_array();
    for axis in 0..3 {
        let vars: Vec<f64> = runs.iter().map(|r| variance(&r.truth.component(axis))).collect();
        let mean = vars.iter().sum::<f64>() / vars.len() as f64;
        let sem = (variance(&vars) / vars.len() as f64).sqrt();
        let w = 2.0 * PI * f[axis];
        let expect = KB * gas.temperature_k / (MASS * w * w);
        assert!(
            (mean - expect).abs() < 3.0 * sem,
            "axis {axis}: <x^2> {mean:e} vs {expect:e} (sem {sem:e})"
        );
    }
}

#[test]
fn cold_damping_temperature() {
    // feedback linewidth 9x the gas linewidth on every axis at once
    let gas = GasEnvironment::new(5.3e-3);
    let g_gas = gas.damping_rate();
    let modes = paper_trap().mode_frequencies().unwrap();
    let fb = ideal_feedback(&[0, 1, 2], [9.0 * g_gas; 3], &modes);
    let cfg = SimConfig {
        warmup_s: 5.0,
        ..SimConfig::default()
    };
    let runs = run(&gas, &fb, &cfg, 30);
    let f = modes.as_array();
    let expect = gas.temperature_k / 10.0;
    for axis in 0..3 {
        let var = runs.iter().map(|r| variance(&r.truth.component(axis))).sum::<f64>() / runs.len() as f64;
        let w = 2.0 * PI * f[axis];
        let t = MASS * w * w * var / KB;
        assert!((t / expect - 1.0).abs() < 0.15, "axis {axis}: T_eff {t} K, expected {expect} K");
    }
}

#[test]
fn feedback_on_one_axis_leaves_others_alone() {
    let gas = GasEnvironment::new(5.3e-2);
    let modes = paper_trap().mode_frequencies().unwrap();
    let cfg = SimConfig {
        warmup_s: 2.0,
        ..SimConfig::default()
    };
    let free = run(&gas, &FeedbackConfig::disabled(), &cfg, 30);
    let cooled = run(&gas, &ideal_feedback(&[2], [0.0, 0.0, 10.0], &modes), &cfg, 30);

    let fitted_t = |runs: &[SimOutput], axis: usize, hint: f64| {
        let trials: Vec<Vec<f64>> = runs.iter().map(|r| r.truth.component_um(axis)).collect();
        let psd = trial_psd(&trials, runs[0].truth.sample_rate).unwrap();
        let fit = fit_psd(
            &psd,
            &FitOptions {
                f0_hint: Some(hint),
                ..FitOptions::default()
            },
        )
        .unwrap();
        temperature_from_fit(&fit, MASS, 0.0).value
    };
    let f = modes.as_array();
    let z_free = fitted_t(&free, 2, f[2]);
    let z_cooled = fitted_t(&cooled, 2, f[2]);
    assert!(z_cooled < 0.5 * z_free, "axial feedback did not cool: {z_cooled} vs {z_free}");
    for axis in 0..2 {
        let a = fitted_t(&free, axis, f[axis]);
        let b = fitted_t(&cooled, axis, f[axis]);
        assert!((b / a - 1.0).abs() < 0.05, "axis {axis}: {a} K -> {b} K");
    }
}

#[test]
fn halving_dt_preserves_statistics() {
    // deterministic ring-down: any change comes from integrator error alone
    let trap = paper_trap();
    let gas = GasEnvironment {
        temperature_k: 1e-300,
        ..GasEnvironment::new(1e-2)
    };
    let base = SimConfig {
        duration_s: 4.0,
        initial: InitialState::Displaced {
            offset: [0.2e-6, 0.2e-6, 2e-6],
            velocity: [0.0; 3],
        },
        ..SimConfig::default()
    };
    let half = SimConfig {
        dt_s: base.dt_s / 2.0,
        ..base
    };
    let a = simulate(&trap, &particle(), &gas, &FeedbackConfig::disabled(), &base).unwrap();
    let b = simulate(&trap, &particle(), &gas, &FeedbackConfig::disabled(), &half).unwrap();
    assert!(b.truth.len() == a.truth.len());
    let f = a.modes.as_array();
    for axis in 0..3 {
        let (va, vb) = (variance(&a.truth.component(axis)), variance(&b.truth.component(axis)));
        assert!((va / vb - 1.0).abs() < 1e-3, "axis {axis}: variance {va:e} vs {vb:e}");
        let opts = FitOptions {
            f0_hint: Some(f[axis]),
            exclude_bands: vec![],
            ..FitOptions::default()
        };
        let fa = fit_psd(&periodogram(&a.truth.component_um(axis), 496.0).unwrap(), &opts).unwrap();
        let fb = fit_psd(&periodogram(&b.truth.component_um(axis), 496.0).unwrap(), &opts).unwrap();
        assert!((fa.f0_hz / fb.f0_hz - 1.0).abs() < 1e-3, "axis {axis}: f0 {} vs {}", fa.f0_hz, fb.f0_hz);
    }

    // thermal statistics agree within their sampling error
    let gas = GasEnvironment::new(5.3e-2);
    let cfg = SimConfig {
        duration_s: 20.0,
        potential: PotentialMode::Harmonic,
        ..SimConfig::default()
    };
    let cfg_half = SimConfig {
        dt_s: cfg.dt_s / 2.0,
        ..cfg
    };
    let ra = run(&gas, &FeedbackConfig::disabled(), &cfg, 30);
    let rb = run(&gas, &FeedbackConfig::disabled(), &cfg_half, 30);
    for axis in 0..3 {
        let va: Vec<f64> = ra.iter().map(|r| variance(&r.truth.component(axis))).collect();
        let vb: Vec<f64> = rb.iter().map(|r| variance(&r.truth.component(axis))).collect();
        let ma = va.iter().sum::<f64>() / 30.0;
        let mb = vb.iter().sum::<f64>() / 30.0;
        let sem = ((variance(&va) + variance(&vb)) / 30.0).sqrt();
        assert!((ma - mb).abs() < 3.0 * sem, "axis {axis}: {ma:e} vs {mb:e}");
    }
}

#[test]
fn undamped_spectrum_peaks_at_mode_frequencies() {
    let gas = GasEnvironment::new(7e-8);
    for potential in [PotentialMode::Harmonic, PotentialMode::Full] {
        let cfg = SimConfig {
            potential,
            initial: InitialState::Displaced {
                offset: [0.1e-6, 0.1e-6, 0.5e-6],
                velocity: [0.0; 3],
            },
            ..SimConfig::default()
        };
        let out = simulate(&paper_trap(), &particle(), &gas, &FeedbackConfig::disabled(), &cfg).unwrap();
        let f = out.modes.as_array();
        for axis in 0..3 {
            let p = periodogram(&out.truth.component_um(axis), 496.0).unwrap();
            let k = (1..p.values.len()).max_by(|&a, &b| p.values[a].total_cmp(&p.values[b])).unwrap();
            assert!(
                (p.freqs[k] - f[axis]).abs() <= p.df() * (1.0 + 1e-9),
                "{potential:?} axis {axis}: peak {} vs {}",
                p.freqs[k],
                f[axis]
            );
        }
    }
}

#[test]
fn line_noise_appears_only_on_vertical_axis() {
    let gas = GasEnvironment::new(5.3e-2);
    let cfg = SimConfig {
        duration_s: 20.0,
        line_noise_n: 5e-16,
        ..SimConfig::default()
    };
    let quiet_cfg = SimConfig { line_noise_n: 0.0, ..cfg };
    let noisy = simulate(&paper_trap(), &particle(), &gas, &FeedbackConfig::disabled(), &cfg).unwrap();
    let quiet = simulate(&paper_trap(), &particle(), &gas, &FeedbackConfig::disabled(), &quiet_cfg).unwrap();
    for axis in 0..3 {
        let pn = periodogram(&noisy.truth.component_um(axis), 496.0).unwrap();
        let pq = periodogram(&quiet.truth.component_um(axis), 496.0).unwrap();
        let k = (120.0 / pn.df()).round() as usize;
        let neighbours: f64 = (k + 20..k + 60).map(|i| pn.values[i]).sum::<f64>() / 40.0;
        if axis == 1 {
            // spike stands far above the neighbouring thermal background
            assert!(pn.values[k] > 100.0 * neighbours, "no spike at 120 Hz");
        } else {
            // nonlinear coupling shifts the background slightly but adds no line
            let ratio = pn.values[k] / pq.values[k];
            assert!((ratio - 1.0).abs() < 0.05, "axis {axis}: ratio {ratio}");
            assert!(pn.values[k] < 10.0 * neighbours, "axis {axis}: spike at 120 Hz");
        }
    }
}
