use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use magtrap::tracking::{
    fill_missing, pgm_files, read_pgm, track_frames, CameraModel, Frame, RawStreamReader, TrackedTrajectory,
    TrackingError,
};
use serde::Serialize;

use crate::config::LoadedConfig;
use crate::error::{CliError, Result};
use crate::output::{write_json, write_with, RunManifest};

const CHUNK: usize = 1024;

#[derive(Debug, Clone, Serialize)]
pub struct TrackReport {
    pub n_frames: usize,
    pub n_missing: usize,
    pub dropout_fraction: f64,
    /// Missing positions are replaced by the mean found position.
    pub fill_policy: String,
    pub min_mass_counts: f64,
    pub sample_rate_hz: f64,
    pub calibration_um_per_px: f64,
    pub center_um: [f64; 2],
}

fn input_error(path: &Path, e: TrackingError) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

/// Frames from a PGM directory or a raw stream sidecar, with the camera
/// geometry they imply.
enum FrameSource {
    Pgm { files: Vec<PathBuf>, fps: f64 },
    Raw(RawStreamReader),
}

impl FrameSource {
    fn open(path: &Path, base: &CameraModel) -> Result<(Self, CameraModel)> {
        if path.is_dir() {
            let files = pgm_files(path).map_err(|e| input_error(path, e))?;
            let first = files
                .first()
                .ok_or_else(|| CliError::Input(format!("{}: no .pgm files", path.display())))?;
            let (frame, depth) = read_one(first, 0.0)?;
            let cam = CameraModel {
                width: frame.width,
                height: frame.height,
                bit_depth: depth,
                ..*base
            };
            Ok((FrameSource::Pgm { files, fps: base.fps }, cam))
        } else if path.is_file() {
            let reader = RawStreamReader::open(path).map_err(|e| input_error(path, e))?;
            let i = &reader.info;
            let cam = CameraModel {
                width: i.width,
                height: i.height,
                bit_depth: i.bit_depth,
                fps: i.fps,
                calibration_um_per_px: i.calibration_um_per_px,
                center_um: i.center_um,
                ..*base
            };
            Ok((FrameSource::Raw(reader), cam))
        } else {
            Err(CliError::Input(format!("no such file or directory: {}", path.display())))
        }
    }

    fn len(&self) -> usize {
        match self {
            FrameSource::Pgm { files, .. } => files.len(),
            FrameSource::Raw(r) => r.info.n_frames,
        }
    }

    fn t0(&self) -> f64 {
        match self {
            FrameSource::Pgm { .. } => 0.0,
            FrameSource::Raw(r) => r.info.t0_s,
        }
    }

    fn chunk(&mut self, start: usize, end: usize) -> Result<Vec<Frame>> {
        match self {
            FrameSource::Pgm { files, fps } => files[start..end]
                .iter()
                .enumerate()
                .map(|(k, f)| read_one(f, (start + k) as f64 / *fps).map(|(fr, _)| fr))
                .collect(),
            FrameSource::Raw(r) => (start..end)
                .map(|_| {
                    r.next()
                        .unwrap_or_else(|| Err(TrackingError::Format("stream ended early".into())))
                        .map_err(|e| CliError::Input(e.to_string()))
                })
                .collect(),
        }
    }
}

fn read_one(path: &Path, t: f64) -> Result<(Frame, u8)> {
    let f = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    read_pgm(BufReader::new(f), t).map_err(|e| input_error(path, e))
}

/// Track every frame, a chunk at a time.
pub fn track_path(path: &Path, base: &CameraModel, min_mass: Option<f64>) -> Result<(TrackedTrajectory, CameraModel, f64)> {
    let (mut src, cam) = FrameSource::open(path, base)?;
    cam.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let min_mass = min_mass.unwrap_or_else(|| cam.default_min_mass());
    let n = src.len();
    let mut points = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let frames = src.chunk(start, end)?;
        if let Some(f) = frames.iter().find(|f| f.width != cam.width || f.height != cam.height) {
            return Err(CliError::Input(format!(
                "frame size {}x{} differs from {}x{}",
                f.width, f.height, cam.width, cam.height
            )));
        }
        points.extend(track_frames(&frames, &cam, min_mass));
        start = end;
    }
    let track = TrackedTrajectory {
        points,
        sample_rate: cam.fps,
        t0: src.t0(),
        fill_policy_applied: false,
    };
    Ok((track, cam, min_mass))
}

pub fn run(loaded: &LoadedConfig, seed: u64, out: &Path, frames: &Path) -> Result<()> {
    let cfg = &loaded.config;
    let manifest = RunManifest::new("track", &loaded.sha256, seed);
    let t = cfg.tracking_or_default();
    let base = cfg.camera_from(&t, [0.0, 0.0]);
    let (track, cam, min_mass) = track_path(frames, &base, t.min_mass_counts)?;
    let n = track.points.len();
    let missing = track.n_missing();
    let filled = match fill_missing(&track) {
        Ok(f) => f,
        Err(TrackingError::AllMissing) => {
            return Err(CliError::Numerical(format!(
                "particle not found in any of {n} frames (min mass {min_mass:.1} counts)"
            )))
        }
        Err(e) => return Err(CliError::Input(e.to_string())),
    };
    let csv = out.join("tracked.csv");
    let traj = filled.to_trajectory();
    write_with(&csv, |w| traj.write_csv(w))?;
    let report = TrackReport {
        n_frames: n,
        n_missing: missing,
        dropout_fraction: missing as f64 / n as f64,
        fill_policy: "mean".into(),
        min_mass_counts: min_mass,
        sample_rate_hz: cam.fps,
        calibration_um_per_px: cam.calibration_um_per_px,
        center_um: cam.center_um,
    };
    let rep = out.join("track_report.json");
    write_json(&rep, &report)?;
    println!("{n} frames tracked, {missing} frames filled");
    manifest.finish(out, &[csv, rep])
}
