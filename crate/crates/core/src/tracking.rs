//! Synthetic camera frames and single-particle localisation.
//!
//! Frames image the y–z plane. Pixel `(row, col)` has its centre at integer
//! coordinates; rows follow y and columns follow z, with the camera's
//! `center_um` imaged at the middle of the frame.
//!
//! Localisation follows Crocker & Grier: a spatial bandpass (Gaussian blur
//! minus a boxcar background), the brightest pixel as candidate, and an
//! iterated brightness-weighted centroid over a disc. The integrated
//! bandpassed brightness ("mass") is thresholded to reject dim frames.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Trajectory;
use crate::fieldmodel::Vec3;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("frame must be at least 16x16 pixels, got {width}x{height}")]
    FrameSize { width: usize, height: usize },
    #[error("frame intensities must be finite and non-negative")]
    InvalidPixel,
    #[error("position (y, z) = ({y_um}, {z_um}) um is outside the field of view")]
    OutOfField { y_um: f64, z_um: f64 },
    #[error("particle not found in any frame")]
    AllMissing,
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
    #[error("frame format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub timestamp: f64,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>, timestamp: f64) -> Result<Self, TrackingError> {
        if width < 16 || height < 16 {
            return Err(TrackingError::FrameSize { width, height });
        }
        if data.len() != width * height {
            return Err(TrackingError::Format(format!(
                "expected {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(TrackingError::InvalidPixel);
        }
        Ok(Self {
            width,
            height,
            data,
            timestamp,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub calibration_um_per_px: f64,
    pub psf_sigma_px: f64,
    pub peak_counts: f64,
    pub background_mean: f64,
    pub background_std: f64,
    pub width: usize,
    pub height: usize,
    /// Position (y, z) in µm imaged at the frame centre.
    pub center_um: [f64; 2],
    pub bit_depth: u8,
    pub fps: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            calibration_um_per_px: crate::constants::CAMERA_UM_PER_PX,
            psf_sigma_px: 1.5,
            peak_counts: 200.0,
            background_mean: 20.0,
            background_std: 2.0,
            width: 256,
            height: 64,
            center_um: [0.0, 0.0],
            bit_depth: 16,
            fps: crate::constants::CAMERA_FPS,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), TrackingError> {
        let bad = |m: &str| Err(TrackingError::InvalidCamera(m.into()));
        if !(self.calibration_um_per_px > 0.0 && self.calibration_um_per_px.is_finite()) {
            return bad("calibration must be > 0");
        }
        if !(self.psf_sigma_px > 0.0 && self.psf_sigma_px.is_finite()) {
            return bad("psf_sigma must be > 0");
        }
        if !(self.peak_counts >= 0.0 && self.background_mean >= 0.0 && self.background_std >= 0.0) {
            return bad("counts must be >= 0");
        }
        if self.width < 16 || self.height < 16 {
            return bad("frame must be at least 16x16");
        }
        if self.bit_depth != 8 && self.bit_depth != 16 {
            return bad("bit depth must be 8 or 16");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be > 0");
        }
        Ok(())
    }

    pub fn max_count(&self) -> f64 {
        ((1u32 << self.bit_depth) - 1) as f64
    }

    /// Peak-to-background-noise ratio.
    pub fn snr(&self) -> f64 {
        self.peak_counts / self.background_std
    }

    /// (row, col) pixel coordinates of a (y, z) position in µm.
    pub fn to_pixels(&self, pos_um: (f64, f64)) -> (f64, f64) {
        let c = self.calibration_um_per_px;
        (
            (pos_um.0 - self.center_um[0]) / c + (self.height as f64 - 1.0) / 2.0,
            (pos_um.1 - self.center_um[1]) / c + (self.width as f64 - 1.0) / 2.0,
        )
    }

    /// (y, z) in µm of pixel coordinates (row, col).
    pub fn to_um(&self, px: (f64, f64)) -> (f64, f64) {
        let c = self.calibration_um_per_px;
        (
            (px.0 - (self.height as f64 - 1.0) / 2.0) * c + self.center_um[0],
            (px.1 - (self.width as f64 - 1.0) / 2.0) * c + self.center_um[1],
        )
    }

    fn locator(&self) -> Locator {
        Locator::new(self.psf_sigma_px)
    }

    /// Bandpassed mass of a noiseless spot at the frame centre.
    pub fn expected_mass(&self) -> f64 {
        let quiet = CameraModel {
            background_std: 0.0,
            ..*self
        };
        let centre = self.to_um(((self.height / 2) as f64, (self.width / 2) as f64));
        let frame = render_spot(&quiet, centre, self.peak_counts, 0).expect("centre is in field");
        let loc = self.locator();
        loc.find(&frame).map_or(0.0, |(_, _, m)| m)
    }

    /// Default rejection threshold: 30% of the expected spot mass.
    pub fn default_min_mass(&self) -> f64 {
        0.3 * self.expected_mass()
    }
}

/// Render a spot at `true_pos` (y, z) µm with Gaussian background noise.
pub fn render_frame(cam: &CameraModel, true_pos: (f64, f64), seed: u64) -> Result<Frame, TrackingError> {
    render_spot(cam, true_pos, cam.peak_counts, seed)
}

/// As [`render_frame`] with an explicit peak brightness.
pub fn render_spot(cam: &CameraModel, true_pos: (f64, f64), peak: f64, seed: u64) -> Result<Frame, TrackingError> {
    cam.validate()?;
    let (r0, c0) = cam.to_pixels(true_pos);
    let (h, w) = (cam.height as f64, cam.width as f64);
    if !(r0 >= 0.0 && r0 <= h - 1.0 && c0 >= 0.0 && c0 <= w - 1.0) {
        return Err(TrackingError::OutOfField {
            y_um: true_pos.0,
            z_um: true_pos.1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cam.background_std).map_err(|e| TrackingError::InvalidCamera(e.to_string()))?;
    let inv = 1.0 / (2.0 * cam.psf_sigma_px * cam.psf_sigma_px);
    let reach = (6.0 * cam.psf_sigma_px).ceil();
    let max = cam.max_count();
    let mut data = Vec::with_capacity(cam.width * cam.height);
    for r in 0..cam.height {
        let dr = r as f64 - r0;
        for c in 0..cam.width {
            let dc = c as f64 - c0;
            let mut v = cam.background_mean;
            if dr.abs() <= reach && dc.abs() <= reach {
                v += peak * (-(dr * dr + dc * dc) * inv).exp();
            }
            if cam.background_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v.round().clamp(0.0, max));
        }
    }
    Frame::new(cam.width, cam.height, data, 0.0)
}

struct Locator {
    blur: Vec<f64>,
    box_radius: usize,
    mask_radius: usize,
}

impl Locator {
    fn new(psf_sigma: f64) -> Self {
        let k = 4;
        let mut blur: Vec<f64> = (-(k as i64)..=k as i64).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = blur.iter().sum();
        blur.iter_mut().for_each(|v| *v /= s);
        Self {
            blur,
            box_radius: (4.0 * psf_sigma).ceil() as usize,
            mask_radius: (3.0 * psf_sigma).ceil() as usize,
        }
    }

    /// Gaussian blur minus boxcar mean, clipped at zero. Edges replicate.
    fn bandpass(&self, f: &Frame) -> Vec<f64> {
        let (w, h) = (f.width, f.height);
        let k = self.blur.len() / 2;
        let b = self.box_radius;
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

        // horizontal passes over an edge-replicated row
        let pad = k.max(b + 1);
        let mut padded = vec![0.0; w + 2 * pad];
        let mut tmp = vec![0.0; w * h];
        let mut rows = vec![0.0; w * h];
        for r in 0..h {
            let src = &f.data[r * w..(r + 1) * w];
            for (i, p) in padded.iter_mut().enumerate() {
                *p = src[clamp(i as isize - pad as isize, w)];
            }
            let out = &mut tmp[r * w..(r + 1) * w];
            for (j, g) in self.blur.iter().enumerate() {
                let off = pad - k + j;
                for (o, v) in out.iter_mut().zip(&padded[off..off + w]) {
                    *o += g * v;
                }
            }
            let out = &mut rows[r * w..(r + 1) * w];
            let mut acc: f64 = padded[pad - b..=pad + b].iter().sum();
            out[0] = acc;
            for c in 1..w {
                acc += padded[pad + c + b] - padded[pad + c - 1 - b];
                out[c] = acc;
            }
        }

        // vertical passes, one whole row at a time
        let mut blurred = vec![0.0; w * h];
        for r in 0..h {
            let out = &mut blurred[r * w..(r + 1) * w];
            for (j, g) in self.blur.iter().enumerate() {
                let sr = clamp(r as isize + j as isize - k as isize, h);
                for (o, v) in out.iter_mut().zip(&tmp[sr * w..(sr + 1) * w]) {
                    *o += g * v;
                }
            }
        }
        let bi = b as isize;
        let norm = 1.0 / ((2 * b + 1) as f64).powi(2);
        let mut acc = vec![0.0; w];
        for d in -bi..=bi {
            let sr = clamp(d, h);
            for (a, v) in acc.iter_mut().zip(&rows[sr * w..(sr + 1) * w]) {
                *a += v;
            }
        }
        let mut out = vec![0.0; w * h];
        for r in 0..h {
            if r > 0 {
                let (add, sub) = (clamp(r as isize + bi, h), clamp(r as isize - 1 - bi, h));
                for c in 0..w {
                    acc[c] += rows[add * w + c] - rows[sub * w + c];
                }
            }
            let o = &mut out[r * w..(r + 1) * w];
            for c in 0..w {
                o[c] = (blurred[r * w + c] - acc[c] * norm).max(0.0);
            }
        }
        out
    }

    /// Centroid (row, col) and mass of the brightest feature.
    fn find(&self, f: &Frame) -> Option<(f64, f64, f64)> {
        let img = self.bandpass(f);
        let (w, h) = (f.width, f.height);
        let m = self.mask_radius;
        if w <= 2 * m || h <= 2 * m {
            return None;
        }
        let floor = 1e-9 * f.data.iter().cloned().fold(1.0, f64::max);
        let mut best = None;
        for r in m..h - m {
            for c in m..w - m {
                let v = img[r * w + c];
                if v > floor && best.is_none_or(|(_, _, bv)| v > bv) {
                    best = Some((r, c, v));
                }
            }
        }
        let (mut r0, mut c0, _) = best?;
        let m2 = (m * m) as isize;
        let mi = m as isize;
        let mut result = None;
        for _ in 0..10 {
            let (mut sum, mut sr, mut sc) = (0.0, 0.0, 0.0);
            for dr in -mi..=mi {
                for dc in -mi..=mi {
                    if dr * dr + dc * dc > m2 {
                        continue;
                    }
                    let v = img[(r0 as isize + dr) as usize * w + (c0 as isize + dc) as usize];
                    sum += v;
                    sr += v * dr as f64;
                    sc += v * dc as f64;
                }
            }
            if sum <= 0.0 {
                return None;
            }
            let (or, oc) = (sr / sum, sc / sum);
            result = Some((r0 as f64 + or, c0 as f64 + oc, sum));
            if or.abs() <= 0.5 && oc.abs() <= 0.5 {
                break;
            }
            let nr = (r0 as f64 + or).round() as usize;
            let nc = (c0 as f64 + oc).round() as usize;
            r0 = nr.clamp(m, h - m - 1);
            c0 = nc.clamp(m, w - m - 1);
        }
        result
    }
}

/// Sub-pixel particle position (y, z) in µm, or `None` when the integrated
/// bandpassed brightness is below `min_mass`.
pub fn locate(frame: &Frame, cam: &CameraModel, min_mass: f64) -> Option<(f64, f64)> {
    locate_with_mass(frame, cam, min_mass).map(|(y, z, _)| (y, z))
}

/// As [`locate`], also returning the feature mass.
pub fn locate_with_mass(frame: &Frame, cam: &CameraModel, min_mass: f64) -> Option<(f64, f64, f64)> {
    let (r, c, mass) = cam.locator().find(frame)?;
    if mass < min_mass {
        return None;
    }
    let (y, z) = cam.to_um((r, c));
    Some((y, z, mass))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedPoint {
    pub y_um: f64,
    pub z_um: f64,
    pub found: bool,
}

impl TrackedPoint {
    pub fn missing() -> Self {
        Self {
            y_um: f64::NAN,
            z_um: f64::NAN,
            found: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedTrajectory {
    pub points: Vec<TrackedPoint>,
    pub sample_rate: f64,
    pub t0: f64,
    pub fill_policy_applied: bool,
}

impl TrackedTrajectory {
    pub fn n_missing(&self) -> usize {
        self.points.iter().filter(|p| !p.found).count()
    }

    /// Positions in metres with the untracked x set to NaN.
    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory {
            sample_rate: self.sample_rate,
            t0: self.t0,
            samples: self
                .points
                .iter()
                .map(|p| Vec3::new(f64::NAN, p.y_um * 1e-6, p.z_um * 1e-6))
                .collect(),
        }
    }
}

/// Replace every missing position with the mean of the found positions.
pub fn fill_missing(track: &TrackedTrajectory) -> Result<TrackedTrajectory, TrackingError> {
    let found: Vec<&TrackedPoint> = track.points.iter().filter(|p| p.found).collect();
    if found.is_empty() {
        return Err(TrackingError::AllMissing);
    }
    let n = found.len() as f64;
    let my = found.iter().map(|p| p.y_um).sum::<f64>() / n;
    let mz = found.iter().map(|p| p.z_um).sum::<f64>() / n;
    let points = track
        .points
        .iter()
        .map(|p| {
            if p.found {
                *p
            } else {
                TrackedPoint {
                    y_um: my,
                    z_um: mz,
                    found: false,
                }
            }
        })
        .collect();
    Ok(TrackedTrajectory {
        points,
        fill_policy_applied: true,
        ..track.clone()
    })
}

/// Locate the particle in every frame (in parallel); order is preserved.
pub fn track_frames(frames: &[Frame], cam: &CameraModel, min_mass: f64) -> Vec<TrackedPoint> {
    use rayon::prelude::*;
    frames
        .par_iter()
        .map(|f| match locate(f, cam, min_mass) {
            Some((y, z)) => TrackedPoint {
                y_um: y,
                z_um: z,
                found: true,
            },
            None => TrackedPoint::missing(),
        })
        .collect()
}

/// Render one frame per trajectory sample. Frame `i` uses seed `seed + i`;
/// with probability `dim_probability` a frame is rendered at
/// `dim_factor` of the nominal brightness.
pub fn render_trajectory_frames(
    cam: &CameraModel,
    traj: &Trajectory,
    range: std::ops::Range<usize>,
    seed: u64,
    dim_probability: f64,
    dim_factor: f64,
) -> Result<Vec<Frame>, TrackingError> {
    use rayon::prelude::*;
    range
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x9e37_79b9_7f4a_7c15);
            let peak = if rng.random::<f64>() < dim_probability {
                cam.peak_counts * dim_factor
            } else {
                cam.peak_counts
            };
            let p = traj.samples[i];
            let mut f = render_spot(cam, (p.y * 1e6, p.z * 1e6), peak, s)?;
            f.timestamp = traj.time(i);
            Ok(f)
        })
        .collect()
}

/// Settings for rendering a trajectory to frames and tracking it back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTracking {
    pub min_mass: f64,
    pub dim_probability: f64,
    pub dim_factor: f64,
    pub seed: u64,
}

/// Render every sample of `traj` and locate it again, a chunk at a time so
/// that long runs never hold all frames in memory.
pub fn track_rendered(cam: &CameraModel, traj: &Trajectory, opts: &SyntheticTracking) -> Result<TrackedTrajectory, TrackingError> {
    const CHUNK: usize = 1024;
    let mut points = Vec::with_capacity(traj.len());
    let mut start = 0;
    while start < traj.len() {
        let end = (start + CHUNK).min(traj.len());
        let frames = render_trajectory_frames(cam, traj, start..end, opts.seed, opts.dim_probability, opts.dim_factor)?;
        points.extend(track_frames(&frames, cam, opts.min_mass));
        start = end;
    }
    Ok(TrackedTrajectory {
        points,
        sample_rate: traj.sample_rate,
        t0: traj.t0,
        fill_policy_applied: false,
    })
}

/// Write a binary (P5) PGM with the given bit depth; values are rounded and
/// clamped. 16-bit samples are big-endian.
pub fn write_pgm<W: Write>(frame: &Frame, bit_depth: u8, mut w: W) -> Result<(), TrackingError> {
    let max: u32 = match bit_depth {
        8 => 255,
        16 => 65535,
        _ => return Err(TrackingError::Format(format!("unsupported bit depth {bit_depth}"))),
    };
    write!(w, "P5\n{} {}\n{}\n", frame.width, frame.height, max)?;
    let mut buf = Vec::with_capacity(frame.data.len() * if max > 255 { 2 } else { 1 });
    for v in &frame.data {
        let q = v.round().clamp(0.0, max as f64) as u32;
        if max > 255 {
            buf.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            buf.push(q as u8);
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn pgm_token<R: BufRead>(r: &mut R) -> Result<String, TrackingError> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let ch = byte[0] as char;
        if ch == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(ch);
    }
    if tok.is_empty() {
        return Err(TrackingError::Format("truncated PGM header".into()));
    }
    Ok(tok)
}

/// Read a binary (P5) PGM written at 8 or 16 bits.
pub fn read_pgm<R: BufRead>(mut r: R, timestamp: f64) -> Result<(Frame, u8), TrackingError> {
    if pgm_token(&mut r)? != "P5" {
        return Err(TrackingError::Format("not a binary PGM (P5)".into()));
    }
    let mut num = |what: &str| -> Result<usize, TrackingError> {
        pgm_token(&mut r)?
            .parse()
            .map_err(|_| TrackingError::Format(format!("bad PGM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let max = num("maxval")?;
    let wide = match max {
        1..=255 => false,
        256..=65535 => true,
        _ => return Err(TrackingError::Format(format!("bad PGM maxval {max}"))),
    };
    let n = width * height;
    let mut raw = vec![0u8; n * if wide { 2 } else { 1 }];
    r.read_exact(&mut raw)
        .map_err(|_| TrackingError::Format("truncated PGM data".into()))?;
    let data = if wide {
        raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64).collect()
    } else {
        raw.iter().map(|&b| b as f64).collect()
    };
    Ok((Frame::new(width, height, data, timestamp)?, if wide { 16 } else { 8 }))
}

/// Numbered PGM files in a directory, sorted by name.
pub fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>, TrackingError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Sidecar describing a concatenated little-endian raw frame stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawStreamInfo {
    pub data_file: String,
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub fps: f64,
    pub calibration_um_per_px: f64,
    pub n_frames: usize,
    pub t0_s: f64,
    /// (y, z) in µm at the frame centre.
    #[serde(default)]
    pub center_um: [f64; 2],
}

impl RawStreamInfo {
    fn frame_bytes(&self) -> usize {
        self.width * self.height * if self.bit_depth > 8 { 2 } else { 1 }
    }
}

pub struct RawStreamWriter {
    out: BufWriter<File>,
    sidecar: PathBuf,
    info: RawStreamInfo,
}

impl RawStreamWriter {
    /// Create `<stem>.raw` and, on [`finish`](Self::finish), `<stem>.json`.
    pub fn create(stem: &Path, cam: &CameraModel, t0_s: f64) -> Result<Self, TrackingError> {
        cam.validate()?;
        let data = stem.with_extension("raw");
        let info = RawStreamInfo {
            data_file: data
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            width: cam.width,
            height: cam.height,
            bit_depth: cam.bit_depth,
            fps: cam.fps,
            calibration_um_per_px: cam.calibration_um_per_px,
            n_frames: 0,
            t0_s,
            center_um: cam.center_um,
        };
        Ok(Self {
            out: BufWriter::new(File::create(&data)?),
            sidecar: stem.with_extension("json"),
            info,
        })
    }

    pub fn push(&mut self, frame: &Frame) -> Result<(), TrackingError> {
        if frame.width != self.info.width || frame.height != self.info.height {
            return Err(TrackingError::Format("frame size differs from stream".into()));
        }
        let max = if self.info.bit_depth > 8 { 65535.0 } else { 255.0 };
        let mut buf = Vec::with_capacity(self.info.frame_bytes());
        for v in &frame.data {
            let q = v.round().clamp(0.0, max);
            if self.info.bit_depth > 8 {
                buf.extend_from_slice(&(q as u16).to_le_bytes());
            } else {
                buf.push(q as u8);
            }
        }
        self.out.write_all(&buf)?;
        self.info.n_frames += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<RawStreamInfo, TrackingError> {
        self.out.flush()?;
        let json = serde_json::to_string_pretty(&self.info).map_err(|e| TrackingError::Format(e.to_string()))?;
        std::fs::write(&self.sidecar, json + "\n")?;
        Ok(self.info)
    }
}

pub struct RawStreamReader {
    pub info: RawStreamInfo,
    input: BufReader<File>,
    next: usize,
}

impl RawStreamReader {
    /// Open a stream from its JSON sidecar.
    pub fn open(sidecar: &Path) -> Result<Self, TrackingError> {
        let text = std::fs::read_to_string(sidecar)?;
        let info: RawStreamInfo = serde_json::from_str(&text).map_err(|e| TrackingError::Format(e.to_string()))?;
        if info.bit_depth != 8 && info.bit_depth != 16 {
            return Err(TrackingError::Format(format!("unsupported bit depth {}", info.bit_depth)));
        }
        let data = sidecar.parent().unwrap_or(Path::new(".")).join(&info.data_file);
        let file = File::open(&data)?;
        let len = file.metadata()?.len() as usize;
        if len != info.n_frames * info.frame_bytes() {
            return Err(TrackingError::Format(format!(
                "raw stream has {len} bytes, sidecar implies {}",
                info.n_frames * info.frame_bytes()
            )));
        }
        Ok(Self {
            info,
            input: BufReader::new(file),
            next: 0,
        })
    }
}

impl Iterator for RawStreamReader {
    type Item = Result<Frame, TrackingError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.info.n_frames {
            return None;
        }
        let mut raw = vec![0u8; self.info.frame_bytes()];
        if let Err(e) = self.input.read_exact(&mut raw) {
            return Some(Err(e.into()));
        }
        let data = if self.info.bit_depth > 8 {
            raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]]) as f64).collect()
        } else {
            raw.iter().map(|&b| b as f64).collect()
        };
        let t = self.info.t0_s + self.next as f64 / self.info.fps;
        self.next += 1;
        Some(Frame::new(self.info.width, self.info.height, data, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn quiet() -> CameraModel {
        CameraModel {
            background_std: 0.0,
            peak_counts: 1000.0,
            ..CameraModel::default()
        }
    }

    fn px_error(cam: &CameraModel, truth: (f64, f64), found: (f64, f64)) -> f64 {
        let c = cam.calibration_um_per_px;
        ((found.0 - truth.0).powi(2) + (found.1 - truth.1).powi(2)).sqrt() / c
    }

    #[test]
    fn spot_at_pixel_centre_is_symmetric() {
        let cam = quiet();
        let pos = cam.to_um((30.0, 100.0));
        let f = render_frame(&cam, pos, 0).unwrap();
        let (imax, _) = f
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!((imax / f.width, imax % f.width), (30, 100));
        for d in 1..5 {
            assert_eq!(f.at(30 + d, 100), f.at(30 - d, 100));
            assert_eq!(f.at(30, 100 + d), f.at(30, 100 - d));
            assert_eq!(f.at(30 + d, 100), f.at(30, 100 + d));
        }
    }

    #[test]
    fn integrated_intensity() {
        let cam = CameraModel {
            peak_counts: 5000.0,
            ..quiet()
        };
        let f = render_frame(&cam, (0.3, -1.1), 0).unwrap();
        let expect = 2.0 * PI * cam.psf_sigma_px.powi(2) * cam.peak_counts
            + cam.background_mean * (cam.width * cam.height) as f64;
        assert!((f.sum() - expect).abs() < 1e-3 * expect, "{} vs {expect}", f.sum());
    }

    #[test]
    fn calibration_shift_is_one_pixel() {
        let cam = quiet();
        let a = render_frame(&cam, (0.1, 0.2), 0).unwrap();
        let b = render_frame(&cam, (0.1, 0.2 + cam.calibration_um_per_px), 0).unwrap();
        for r in 0..cam.height {
            for c in 1..cam.width {
                assert_eq!(b.at(r, c), a.at(r, c - 1));
            }
        }
    }

    #[test]
    fn out_of_field() {
        let cam = CameraModel::default();
        let half_w = cam.width as f64 / 2.0 * cam.calibration_um_per_px;
        assert!(matches!(
            render_frame(&cam, (0.0, half_w + 1.0), 0),
            Err(TrackingError::OutOfField { .. })
        ));
    }

    #[test]
    fn noiseless_subpixel_recovery() {
        let cam = quiet();
        for (i, (dr, dc)) in [(0.0, 0.0), (0.25, -0.4), (0.5, 0.5), (-0.37, 0.13), (0.49, -0.01)].iter().enumerate() {
            let truth = cam.to_um((31.0 + dr, 120.0 + dc + i as f64 * 7.0));
            let f = render_frame(&cam, truth, 0).unwrap();
            let found = locate(&f, &cam, 0.0).unwrap();
            let err = px_error(&cam, truth, found);
            assert!(err < 0.05, "offset ({dr}, {dc}): error {err} px");
        }
    }

    #[test]
    fn translation_equivariance() {
        let cam = quiet();
        let base = (0.07, -3.3);
        let a = locate(&render_frame(&cam, base, 0).unwrap(), &cam, 0.0).unwrap();
        for delta in [(0.5, 1.7), (-1.1, 9.3), (0.03, -12.4)] {
            let moved = (base.0 + delta.0, base.1 + delta.1);
            let b = locate(&render_frame(&cam, moved, 0).unwrap(), &cam, 0.0).unwrap();
            let shift = ((b.0 - a.0 - delta.0).powi(2) + (b.1 - a.1 - delta.1).powi(2)).sqrt();
            assert!(shift / cam.calibration_um_per_px < 0.05);
        }
    }

    #[test]
    fn background_only_is_not_found() {
        let cam = CameraModel {
            background_mean: 100.0,
            background_std: 20.0,
            ..CameraModel::default()
        };
        let min_mass = cam.default_min_mass();
        for seed in 0..20 {
            let f = render_spot(&cam, (0.0, 0.0), 0.0, seed).unwrap();
            assert_eq!(locate(&f, &cam, min_mass), None);
        }
        let flat = Frame::new(32, 32, vec![7.0; 1024], 0.0).unwrap();
        assert_eq!(locate(&flat, &cam, 0.0), None);
    }

    #[test]
    fn rms_error_at_snr_10() {
        let cam = CameraModel {
            background_mean: 100.0,
            background_std: 20.0,
            peak_counts: 200.0,
            ..CameraModel::default()
        };
        assert!((cam.snr() - 10.0).abs() < 1e-12);
        let min_mass = cam.default_min_mass();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ss = 0.0;
        let n = 1000;
        for i in 0..n {
            let truth = (rng.random_range(-3.0..3.0), rng.random_range(-20.0..20.0));
            let f = render_frame(&cam, truth, 1000 + i).unwrap();
            let found = locate(&f, &cam, min_mass).expect("bright spot found");
            ss += px_error(&cam, truth, found).powi(2);
        }
        let rms = (ss / n as f64).sqrt();
        assert!(rms < 0.2, "rms {rms} px");
    }

    #[test]
    fn fill_missing_rules() {
        let p = |y, z| TrackedPoint { y_um: y, z_um: z, found: true };
        let t = TrackedTrajectory {
            points: vec![p(0.0, 0.0), TrackedPoint::missing(), p(2.0, 2.0)],
            sample_rate: 496.0,
            t0: 0.0,
            fill_policy_applied: false,
        };
        let f = fill_missing(&t).unwrap();
        assert_eq!((f.points[1].y_um, f.points[1].z_um), (1.0, 1.0));
        assert!(!f.points[1].found);
        assert_eq!(f.points[0], t.points[0]);
        assert_eq!(f.points[2], t.points[2]);
        assert!(f.fill_policy_applied);

        let full = TrackedTrajectory {
            points: vec![p(1.0, 2.0), p(3.0, 4.0)],
            ..t.clone()
        };
        assert_eq!(fill_missing(&full).unwrap().points, full.points);

        let none = TrackedTrajectory {
            points: vec![TrackedPoint::missing(); 3],
            ..t
        };
        assert!(matches!(fill_missing(&none), Err(TrackingError::AllMissing)));
    }

    #[test]
    fn frame_validation() {
        assert!(matches!(Frame::new(8, 32, vec![0.0; 256], 0.0), Err(TrackingError::FrameSize { .. })));
        let mut d = vec![0.0; 256];
        d[3] = -1.0;
        assert!(matches!(Frame::new(16, 16, d, 0.0), Err(TrackingError::InvalidPixel)));
    }

    #[test]
    fn pgm_round_trip() {
        for depth in [8u8, 16] {
            let cam = CameraModel {
                bit_depth: depth,
                background_std: 3.0,
                ..CameraModel::default()
            };
            let f = render_frame(&cam, (0.5, 4.0), 9).unwrap();
            let mut buf = Vec::new();
            write_pgm(&f, depth, &mut buf).unwrap();
            let (g, d) = read_pgm(&buf[..], 0.0).unwrap();
            assert_eq!(d, depth);
            assert_eq!(f.data, g.data);
        }
        let with_comment = b"P5\n# made by hand\n16 16\n255\n".iter().copied().chain(std::iter::repeat_n(9u8, 256)).collect::<Vec<u8>>();
        let (g, _) = read_pgm(&with_comment[..], 0.0).unwrap();
        assert!(g.data.iter().all(|v| *v == 9.0));
        assert!(read_pgm(&b"P2\n16 16\n255\n"[..], 0.0).is_err());
    }

    #[test]
    fn raw_stream_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cam = CameraModel {
            background_std: 3.0,
            ..CameraModel::default()
        };
        let frames: Vec<Frame> = (0..5).map(|i| render_frame(&cam, (0.0, i as f64), i).unwrap()).collect();
        let mut w = RawStreamWriter::create(&dir.path().join("frames"), &cam, 0.0).unwrap();
        for f in &frames {
            w.push(f).unwrap();
        }
        let info = w.finish().unwrap();
        assert_eq!(info.n_frames, 5);
        let back: Vec<Frame> = RawStreamReader::open(&dir.path().join("frames.json"))
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in frames.iter().zip(&back) {
            assert_eq!(a.data, b.data);
        }
        assert!((back[2].timestamp - 2.0 / cam.fps).abs() < 1e-15);
    }
}
