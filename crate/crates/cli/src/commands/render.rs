use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use magtrap::dynamics::Trajectory;
use magtrap::tracking::{render_trajectory_frames, write_pgm, RawStreamWriter};

use crate::config::LoadedConfig;
use crate::error::{CliError, Result};
use crate::output::{write_with, RunManifest};

const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    Raw,
    Pgm,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn run(loaded: &LoadedConfig, seed: u64, out: &Path, trajectory: &Path, format: FrameFormat) -> Result<()> {
    let cfg = &loaded.config;
    let manifest = RunManifest::new("render", &loaded.sha256, seed);
    let file = File::open(trajectory).map_err(|e| CliError::Input(format!("{}: {e}", trajectory.display())))?;
    let cols = Trajectory::read_csv_um(BufReader::new(file))
        .map_err(|e| CliError::Input(format!("{}: {e}", trajectory.display())))?;
    if cols.t.len() < 2 || cols.um[1..].iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(CliError::Input(format!(
            "{}: need at least two samples with finite y and z",
            trajectory.display()
        )));
    }
    let t = cfg.tracking_or_default();
    let center = [mean(&cols.um[1]), mean(&cols.um[2])];
    let cam = cfg.camera_from(&t, center);
    cam.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let traj = cols.into_trajectory();
    let mut files = Vec::new();
    let mut writer = match format {
        FrameFormat::Raw => {
            std::fs::create_dir_all(out)?;
            Some(RawStreamWriter::create(&out.join("frames"), &cam, traj.t0).map_err(|e| CliError::Input(e.to_string()))?)
        }
        FrameFormat::Pgm => None,
    };
    let mut start = 0;
    while start < traj.len() {
        let end = (start + CHUNK).min(traj.len());
        let frames = render_trajectory_frames(&cam, &traj, start..end, seed, t.dim_probability, t.dim_factor)
            .map_err(|e| CliError::Input(format!("frames {start}..{end}: {e}")))?;
        for (k, f) in frames.iter().enumerate() {
            match writer.as_mut() {
                Some(w) => w.push(f).map_err(|e| CliError::Input(e.to_string()))?,
                None => {
                    let p = out.join("frames").join(format!("frame_{:06}.pgm", start + k));
                    write_with(&p, |buf| {
                        write_pgm(f, cam.bit_depth, buf).map_err(|e| std::io::Error::other(e.to_string()))
                    })?;
                    files.push(p);
                }
            }
        }
        start = end;
    }
    if let Some(w) = writer {
        let info = w.finish().map_err(|e| CliError::Input(e.to_string()))?;
        files.push(out.join("frames.json"));
        files.push(out.join(&info.data_file));
    }
    println!("{} frames rendered, SNR {:.1}", traj.len(), cam.snr());
    manifest.finish(out, &files)
}
