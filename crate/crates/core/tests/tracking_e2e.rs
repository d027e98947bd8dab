use magtrap::constants::TRAP_Y0;
use magtrap::dynamics::{
    simulate_trials, AxisFeedback, FeedbackConfig, FeedbackMode, GasEnvironment, SimConfig, SimOutput, Trajectory,
};
use magtrap::spectra::{fit_psd, temperature_from_fit, trial_psd, FitOptions, PsdFit};
use magtrap::tracking::{fill_missing, track_rendered, CameraModel, SyntheticTracking, TrackedTrajectory};
use magtrap::trapstatics::{fit_coefficients, Material, ModeFrequencies, Particle, TrapModel};

const MASS: f64 = 28e-15;

fn runs(pressure: f64, fb: &FeedbackConfig, n: usize, duration_s: f64, warmup_s: f64) -> Vec<SimOutput> {
    let m = Material::diamond();
    let fit = fit_coefficients(&ModeFrequencies::reported(), &m, TRAP_Y0).unwrap();
    let trap = TrapModel::new(fit.coeffs, m);
    let cfg = SimConfig {
        duration_s,
        warmup_s,
        seed: 3,
        ..SimConfig::default()
    };
    simulate_trials(&trap, &Particle::new(m, MASS).unwrap(), &GasEnvironment::new(pressure), fb, &cfg, n)
        .into_iter()
        .map(|r| r.unwrap())
        .collect()
}

fn camera_for(out: &SimOutput) -> CameraModel {
    CameraModel {
        center_um: [out.equilibrium.y * 1e6, out.equilibrium.z * 1e6],
        ..CameraModel::default()
    }
}

fn track(out: &SimOutput, min_mass_scale: f64, dim_probability: f64, dim_factor: f64) -> TrackedTrajectory {
    let cam = camera_for(out);
    let opts = SyntheticTracking {
        min_mass: min_mass_scale * cam.default_min_mass(),
        dim_probability,
        dim_factor,
        seed: 101,
    };
    fill_missing(&track_rendered(&cam, &out.truth, &opts).unwrap()).unwrap()
}

fn axial_fit(trajs: &[Trajectory], f0: f64) -> PsdFit {
    let trials: Vec<Vec<f64>> = trajs.iter().map(|t| t.component_um(2)).collect();
    let psd = trial_psd(&trials, trajs[0].sample_rate).unwrap();
    fit_psd(
        &psd,
        &FitOptions {
            f0_hint: Some(f0),
            ..FitOptions::default()
        },
    )
    .unwrap()
}

#[test]
fn tracked_pipeline_matches_direct_pipeline() {
    let outs = runs(5.3e-2, &FeedbackConfig::disabled(), 3, 30.0, 0.0);
    let f0 = outs[0].modes.fz;
    let df = outs[0].truth.sample_rate / outs[0].truth.len() as f64;

    let direct: Vec<Trajectory> = outs.iter().map(|o| o.truth.clone()).collect();
    let clean: Vec<TrackedTrajectory> = outs.iter().map(|o| track(o, 1.0, 0.0, 1.0)).collect();
    let tracked: Vec<Trajectory> = clean.iter().map(|t| t.to_trajectory()).collect();
    let a = axial_fit(&direct, f0);
    let b = axial_fit(&tracked, f0);
    assert!((a.f0_hz - b.f0_hz).abs() <= df, "f0 direct {} vs tracked {}", a.f0_hz, b.f0_hz);
    assert!((a.gamma_hz / b.gamma_hz - 1.0).abs() < 0.1, "gamma {} vs {}", a.gamma_hz, b.gamma_hz);

    // 1% of frames too dim to keep, filled with the mean position
    let dropped: Vec<TrackedTrajectory> = outs.iter().map(|o| track(o, 1.0, 0.01, 0.05)).collect();
    let missing: usize = dropped.iter().map(|t| t.n_missing()).sum();
    let total: usize = dropped.iter().map(|t| t.points.len()).sum();
    let frac = missing as f64 / total as f64;
    assert!((0.005..0.015).contains(&frac), "dropout fraction {frac}");
    for (d, c) in dropped.iter().zip(&clean) {
        for (p, q) in d.points.iter().zip(&c.points) {
            if p.found {
                assert_eq!(p, q);
            }
        }
    }
    let filled: Vec<Trajectory> = dropped.iter().map(|t| t.to_trajectory()).collect();
    let t_clean = temperature_from_fit(&b, MASS, 0.0).value;
    let t_filled = temperature_from_fit(&axial_fit(&filled, f0), MASS, 0.0).value;
    let bias = t_filled / t_clean - 1.0;
    assert!(bias.abs() < 0.03, "dropout bias {bias}");
}

#[test]
fn doubling_min_mass_changes_cooled_temperature_slightly() {
    let modes = ModeFrequencies::reported();
    let mut fb = FeedbackConfig::default();
    fb.axes[2] = AxisFeedback {
        enabled: true,
        mode: FeedbackMode::IdealVelocity,
        center_freq_hz: modes.fz,
        bandwidth_hz: modes.fz,
        gain: AxisFeedback::gain_for_linewidth(MASS, 10.6),
        ..AxisFeedback::default()
    };
    let outs = runs(7e-8, &fb, 2, 30.0, 2.0);
    let f0 = outs[0].modes.fz;

    // dim frames carry about 45% of the usual mass: kept at the default
    // threshold, rejected once it is doubled
    let fit_t = |scale: f64| {
        let tracks: Vec<TrackedTrajectory> = outs.iter().map(|o| track(o, scale, 0.01, 0.45)).collect();
        let missing: usize = tracks.iter().map(|t| t.n_missing()).sum();
        let trajs: Vec<Trajectory> = tracks.iter().map(|t| t.to_trajectory()).collect();
        (temperature_from_fit(&axial_fit(&trajs, f0), MASS, 0.0).value, missing)
    };
    let (t1, m1) = fit_t(1.0);
    let (t2, m2) = fit_t(2.0);
    assert!(t1 < 1.0, "cooled tracked temperature {t1} K");
    assert!(m2 > m1, "doubling min_mass rejected no extra frames ({m1} vs {m2})");
    assert!((t2 / t1 - 1.0).abs() < 0.05, "{t1} K -> {t2} K");
}
