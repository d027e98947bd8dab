use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use magtrap::dynamics::{Trajectory, TrajectoryColumns};

use crate::commands::simulate::RunInfo;
use crate::config::{Calibrate, LoadedConfig, ScenarioConfig};
use crate::error::{CliError, Result};
use crate::output::{write_with, RunManifest};
use crate::pipeline::{analyze_set, summary_lines, write_group, AxisResult, Calibration, TrialSet, SUMMARY_HEADER};

/// Trials analysed together, with whatever metadata came with them.
#[derive(Debug, Clone)]
pub struct InputGroup {
    pub name: String,
    pub files: Vec<PathBuf>,
    pub info: Option<RunInfo>,
}

fn read_info(dir: &Path) -> Result<Option<RunInfo>> {
    let p = dir.join("run.json");
    if !p.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map_or_else(|| "input".into(), |n| n.to_string_lossy().into_owned())
}

fn pressure_group(dir: &Path, source: &str, info: RunInfo) -> Result<InputGroup> {
    let sub = dir.join(source);
    if !sub.is_dir() {
        return Err(CliError::Input(format!("{} has no {source}/ directory", dir.display())));
    }
    let files = csv_files(&sub)?;
    Ok(InputGroup {
        name: dir_name(dir),
        files,
        info: Some(info),
    })
}

/// Resolve command-line paths into analysis groups: a `simulate` output
/// root, a single pressure directory, a directory of CSVs, or CSV files.
pub fn collect_groups(paths: &[PathBuf], source: &str) -> Result<Vec<InputGroup>> {
    let mut groups = Vec::new();
    let mut loose = Vec::new();
    for p in paths {
        if p.is_file() {
            loose.push(p.clone());
        } else if p.is_dir() {
            if let Some(info) = read_info(p)? {
                groups.push(pressure_group(p, source, info)?);
                continue;
            }
            let mut subdirs: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|d| d.join("run.json").is_file())
                .collect();
            subdirs.sort();
            if subdirs.is_empty() {
                groups.push(InputGroup {
                    name: dir_name(p),
                    files: csv_files(p)?,
                    info: None,
                });
            } else {
                for d in subdirs {
                    let info = read_info(&d)?.expect("checked above");
                    groups.push(pressure_group(&d, source, info)?);
                }
            }
        } else {
            return Err(CliError::Input(format!("no such file or directory: {}", p.display())));
        }
    }
    if !loose.is_empty() {
        groups.push(InputGroup {
            name: "files".into(),
            files: loose,
            info: None,
        });
    }
    for g in &groups {
        if g.files.is_empty() {
            return Err(CliError::Input(format!("group {}: no trajectory CSV files", g.name)));
        }
    }
    if groups.is_empty() {
        return Err(CliError::Input("nothing to analyse".into()));
    }
    Ok(groups)
}

/// Read trajectory CSVs into a trial set; all must share one sample rate and
/// length. A known rate replaces the one implied by the time column.
pub fn load_trials(files: &[PathBuf], known_rate: Option<f64>) -> Result<TrialSet> {
    let mut trials = Vec::new();
    let mut rate: Option<f64> = None;
    for f in files {
        let file = fs::File::open(f).map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?;
        let cols: TrajectoryColumns =
            Trajectory::read_csv_um(BufReader::new(file)).map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?;
        if cols.t.len() < 8 {
            return Err(CliError::Input(format!("{}: too few samples", f.display())));
        }
        let r = cols.sample_rate();
        if let Some(k) = known_rate {
            if ((r - k) / k).abs() > 1e-6 {
                return Err(CliError::Input(format!("{}: sample rate {r} Hz, run.json says {k} Hz", f.display())));
            }
        }
        match rate {
            Some(r0) if ((r - r0) / r0).abs() > 1e-6 => {
                return Err(CliError::Input(format!(
                    "{}: sample rate {r} Hz differs from {r0} Hz",
                    f.display()
                )))
            }
            None => rate = Some(r),
            _ => {}
        }
        trials.push(cols.um);
    }
    let n = trials[0][0].len();
    if trials.iter().any(|t| t[0].len() != n) {
        return Err(CliError::Input("trials differ in length".into()));
    }
    Ok(TrialSet {
        sample_rate: known_rate.or(rate).expect("at least one file"),
        trials,
    })
}

pub fn calibration(cfg: &ScenarioConfig, info: Option<&RunInfo>) -> Result<Calibration> {
    let mass_kg = cfg.mass_pg().map(|m| m * 1e-15);
    if cfg.analysis.calibrate == Calibrate::Temperature && mass_kg.is_none() {
        return Err(CliError::Config(
            "analysis.calibrate = \"temperature\" needs a numeric particle.mass_pg".into(),
        ));
    }
    Ok(Calibration {
        mode: cfg.analysis.calibrate,
        temperature_k: info.map_or(cfg.gas.temperature_k, |i| i.temperature_k),
        mass_kg,
    })
}

fn hints(cfg: &ScenarioConfig, info: Option<&RunInfo>) -> Option<[f64; 3]> {
    if let Some(i) = info {
        return Some(i.mode_frequencies_hz);
    }
    let trap = cfg.trap_model().ok()?;
    trap.mode_frequencies().ok().map(|m| m.as_array())
}

pub struct GroupAnalysis {
    pub group: InputGroup,
    pub results: Vec<AxisResult>,
}

pub fn analyze_groups(cfg: &ScenarioConfig, groups: Vec<InputGroup>) -> Result<Vec<GroupAnalysis>> {
    groups
        .into_iter()
        .map(|g| {
            let set = load_trials(&g.files, g.info.as_ref().map(|i| i.sample_rate_hz))?;
            let calib = calibration(cfg, g.info.as_ref())?;
            let results = analyze_set(&set, cfg, hints(cfg, g.info.as_ref()), calib);
            Ok(GroupAnalysis { group: g, results })
        })
        .collect()
}

pub fn run(loaded: &LoadedConfig, seed: u64, out: &Path, paths: &[PathBuf], svg: bool) -> Result<()> {
    let cfg = &loaded.config;
    let manifest = RunManifest::new("analyze", &loaded.sha256, seed);
    let groups = collect_groups(paths, cfg.analysis.source.dir_name())?;
    let analyses = analyze_groups(cfg, groups)?;
    let mut files = Vec::new();
    let mut lines = vec![SUMMARY_HEADER.to_string()];
    let mut failed = Vec::new();
    for a in &analyses {
        let dir = out.join("analysis").join(&a.group.name);
        files.extend(write_group(&dir, &a.results, svg)?);
        let pressure = a.group.info.as_ref().map(|i| i.pressure_mbar);
        lines.extend(summary_lines(&a.group.name, pressure, &a.results));
        for r in &a.results {
            match (r.fit(), r.mass(), r.temperature()) {
                (Some(f), Some(m), Some(t)) => println!(
                    "{} {}: f0 = {:.3} Hz, gamma = {:.4} Hz, mass = {:.3} pg, T = {:.4e} K",
                    a.group.name,
                    r.axis.name(),
                    f.f0_hz,
                    f.gamma_hz,
                    m.value * 1e15,
                    t.value
                ),
                _ if r.failed() => failed.push(format!("{} {}", a.group.name, r.axis.name())),
                _ => println!("{} {}: not observed, skipped", a.group.name, r.axis.name()),
            }
        }
    }
    let summary = out.join("summary.csv");
    write_with(&summary, |w| {
        for l in &lines {
            std::io::Write::write_all(w, l.as_bytes())?;
            std::io::Write::write_all(w, b"\n")?;
        }
        Ok(())
    })?;
    files.push(summary);
    let mut manifest = manifest;
    manifest.failures = failed.iter().map(|f| format!("{f}: fit failed")).collect();
    manifest.finish(out, &files)?;
    if !failed.is_empty() {
        return Err(CliError::Numerical(format!("fit failed for {}", failed.join(", "))));
    }
    Ok(())
}
