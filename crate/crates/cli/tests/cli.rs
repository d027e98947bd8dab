use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use magtrap::tracking::{write_pgm, Frame};
use magtrap_cli::commands::simulate::run_pressures;
use magtrap_cli::config::{Calibrate, LoadedConfig};
use magtrap_cli::pipeline::{analyze_set, Calibration, TrialSet};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

const PAPER: &str = r#"
seed = 7

[trap.frequencies]
fx_hz = 104.0
fy_hz = 130.0
fz_hz = 9.6

[particle]
mass_pg = 28.0

[gas]
pressures_mbar = [5.3e-2]

[sim]
duration_s = 8.0
n_trials = 3
"#;

fn magtrap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magtrap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn fit_trap_writes_published_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PAPER);
    let out = dir.path().join("out");
    let o = magtrap(&["--config", s(&cfg), "--out", s(&out), "fit-trap"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("coefficients.json"));
    let a2 = v["a2_t"].as_f64().unwrap();
    let b = v["b_eq_tesla"].as_f64().unwrap();
    assert!((a2 + 1.3).abs() <= 0.15 * 1.3, "{a2}");
    assert!((b - 0.2).abs() <= 0.02, "{b}");
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn missing_frequency_exits_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &PAPER.replace("fz_hz = 9.6\n", ""));
    let o = magtrap(&["--config", s(&cfg), "--out", s(&dir.path().join("o")), "fit-trap"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fz_hz"));
}

#[test]
fn unknown_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &PAPER.replace("[sim]", "[sim]\nduration = 3.0"));
    let o = magtrap(&["--config", s(&cfg), "--out", s(&dir.path().join("o")), "simulate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn non_levitating_material_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &PAPER.replace("[trap.frequencies]", "[trap]\nchi_si = 0.0\n\n[trap.frequencies]"));
    let o = magtrap(&["--config", s(&cfg), "--out", s(&dir.path().join("o")), "fit-trap"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn coefficients_round_trip_through_frequencies() {
    let dir = tempfile::tempdir().unwrap();
    let given = "[trap.coefficients]\na2_t = -1.2\na3_t = 0.02\na4_t = 0.65\n";
    let cfg = write_config(dir.path(), given);
    let out = dir.path().join("a");
    assert!(magtrap(&["--config", s(&cfg), "--out", s(&out), "fit-trap"]).status.success());
    let f = json(&out.join("coefficients.json"))["mode_frequencies_hz"].clone();
    let text = format!(
        "[trap.frequencies]\nfx_hz = {}\nfy_hz = {}\nfz_hz = {}\n",
        f["fx_hz"], f["fy_hz"], f["fz_hz"]
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("b");
    assert!(magtrap(&["--config", s(&cfg), "--out", s(&out), "fit-trap"]).status.success());
    let v = json(&out.join("coefficients.json"));
    for (k, want) in [("a2_t", -1.2), ("a3_t", 0.02), ("a4_t", 0.65)] {
        let got = v[k].as_f64().unwrap();
        assert!((got - want).abs() <= 1e-6 * want.abs(), "{k}: {got}");
    }
}

fn data_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_deterministic_and_writes_each_trial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PAPER);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = magtrap(&["--config", s(&cfg), "--out", s(out), "simulate"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = data_files(&a);
    assert_eq!(files, data_files(&b));
    let trials = files.iter().filter(|f| f.starts_with("p5.3e-2mbar/trajectories")).count();
    assert_eq!(trials, 3);
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["outputs"].as_array().unwrap().len(), files.len());
}

#[test]
fn simulate_then_analyze_equals_library_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PAPER);
    let sim = dir.path().join("sim");
    let ana = dir.path().join("ana");
    assert!(magtrap(&["--config", s(&cfg), "--out", s(&sim), "simulate"]).status.success());
    let o = magtrap(&["--config", s(&cfg), "--out", s(&ana), "analyze", s(&sim)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let loaded = LoadedConfig::from_str(PAPER).unwrap();
    let c = &loaded.config;
    let trap = c.trap_model().unwrap();
    let run = run_pressures(c, &trap, 7).unwrap().pop().unwrap();
    let set = TrialSet::from_outputs(&run.successes()).unwrap();
    let calib = Calibration {
        mode: Calibrate::Mass,
        temperature_k: 295.0,
        mass_kg: None,
    };
    let direct = analyze_set(&set, c, Some(trap.mode_frequencies().unwrap().as_array()), calib);
    let summary = fs::read_to_string(ana.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    for r in &direct {
        let fit = r.fit().unwrap();
        let row: Vec<&str> = summary
            .lines()
            .find(|l| l.split(',').nth(2) == Some(r.axis.name()))
            .unwrap()
            .split(',')
            .collect();
        let col = |i: usize| row[i].parse::<f64>().unwrap();
        assert_eq!(col(4), fit.f0_hz);
        assert_eq!(col(6), fit.gamma_hz);
        assert_eq!(col(8), fit.s0_um2);
        assert_eq!(col(10), r.mass().unwrap().value * 1e15);
    }
    assert!(summary.lines().skip(1).all(|l| l.contains(",ok,")));
}

#[test]
fn analyze_without_a_peak_exits_two_but_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut text = String::from("t,x_um,y_um,z_um\n");
    for i in 0..4096 {
        let t = i as f64 / 496.0;
        text += &format!("{t},{},{},{}\n", n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
    }
    let csv = dir.path().join("noise.csv");
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("o");
    let o = magtrap(&["--out", s(&out), "analyze", s(&csv)]);
    assert_eq!(o.status.code(), Some(2));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.contains(",failed")).count(), 3, "{summary}");
    assert!(out.join("analysis/files/psd_axial.csv").is_file());
}

#[test]
fn single_trial_analysis_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &PAPER.replace("n_trials = 3", "n_trials = 1"));
    let sim = dir.path().join("sim");
    assert!(magtrap(&["--config", s(&cfg), "--out", s(&sim), "simulate"]).status.success());
    let csv = sim.join("p5.3e-2mbar/trajectories/trial_000.csv");
    let out = dir.path().join("o");
    let o = magtrap(&["--config", s(&cfg), "--out", s(&out), "analyze", s(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("analysis/files/fit_axial.json"));
    assert_eq!(v["n_trials"], 1);
}

#[test]
fn all_dark_frames_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    fs::create_dir_all(&frames).unwrap();
    for i in 0..20 {
        let f = Frame::new(64, 32, vec![20.0; 64 * 32], 0.0).unwrap();
        let mut buf = Vec::new();
        write_pgm(&f, 8, &mut buf).unwrap();
        fs::write(frames.join(format!("frame_{i:03}.pgm")), buf).unwrap();
    }
    let o = magtrap(&["--out", s(&dir.path().join("o")), "track", "--frames", s(&frames)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unreadable_frames_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    fs::create_dir_all(&frames).unwrap();
    fs::write(frames.join("frame_000.pgm"), b"P2 garbage").unwrap();
    let o = magtrap(&["--out", s(&dir.path().join("o")), "track", "--frames", s(&frames)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn dropouts_are_reported_as_filled_frames() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{PAPER}\n[tracking]\ndim_probability = 0.05\ndim_factor = 0.0\n")
        .replace("duration_s = 8.0", "duration_s = 2.0")
        .replace("n_trials = 3", "n_trials = 1");
    let cfg = write_config(dir.path(), &text);
    let sim = dir.path().join("sim");
    assert!(magtrap(&["--config", s(&cfg), "--out", s(&sim), "simulate"]).status.success());
    let csv = sim.join("p5.3e-2mbar/trajectories/trial_000.csv");
    for format in ["raw", "pgm"] {
        let frames = dir.path().join(format!("frames_{format}"));
        let o = magtrap(&["--config", s(&cfg), "--out", s(&frames), "render", "--trajectory", s(&csv), "--format", format]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let source = if format == "raw" { frames.join("frames.json") } else { frames.join("frames") };
        let out = dir.path().join(format!("track_{format}"));
        let o = magtrap(&["--config", s(&cfg), "--out", s(&out), "track", "--frames", s(&source)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let r = json(&out.join("track_report.json"));
        let missing = r["n_missing"].as_u64().unwrap();
        assert_eq!(r["n_frames"], 992);
        assert!((20..=80).contains(&missing), "{missing}");
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert!(stdout.contains(&format!("{missing} frames filled")), "{stdout}");
        let tracked = fs::read_to_string(out.join("tracked.csv")).unwrap();
        assert_eq!(tracked.lines().count(), 993);
        assert!(tracked.lines().skip(1).all(|l| l.split(',').nth(1) == Some("NaN")));
    }
}
