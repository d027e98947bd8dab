//! Potential energy with gravity, levitation equilibrium, normal modes and the
//! inverse fit of multipole coefficients to measured trap frequencies.
//!
//! Everything here is per unit mass where possible: for a particle of uniform
//! density the levitation height and the mode frequencies depend only on the
//! material (`χ`, `ρ`) and the field, not on the particle size.

use std::f64::consts::PI;

use nalgebra::{DVector, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{DIAMOND_CHI, DIAMOND_RHO, G, MU0};
use crate::fieldmodel::{MultipoleCoefficients, Vec3};
use crate::lm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StaticsError {
    #[error("no levitation equilibrium in the search interval")]
    NoEquilibrium,
    #[error("equilibrium at y = {y_eq:e} m is unstable (curvatures {curvatures:?})")]
    Unstable { y_eq: f64, curvatures: [f64; 3] },
    #[error("imaginary or zero frequency along {axis} (curvature {curvature:e} s^-2)")]
    ImaginaryFrequency { axis: char, curvature: f64 },
    #[error("equilibrium Hessian is not axis-aligned (off-diagonal ratio {ratio:e})")]
    NotSeparable { ratio: f64 },
    #[error("coefficient fit did not converge (best residual {best_residual:e})")]
    NoConvergence { best_residual: f64 },
    #[error("ambiguous coefficient fit: {first:?} vs {second:?}")]
    AmbiguousSolution {
        first: Box<CoefficientFit>,
        second: Box<CoefficientFit>,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    /// Volume magnetic susceptibility (SI); negative for diamagnets.
    pub chi: f64,
    /// Mass density, kg/m³.
    pub rho: f64,
}

impl Material {
    pub fn diamond() -> Self {
        Self {
            chi: DIAMOND_CHI,
            rho: DIAMOND_RHO,
        }
    }

    pub fn validate(&self) -> Result<(), StaticsError> {
        if !self.chi.is_finite() || !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(StaticsError::InvalidInput(format!("bad material {self:?}")));
        }
        Ok(())
    }

    /// `χ/(2ρμ0)`: converts `∇B²` into force per unit mass.
    fn magnetic_factor(&self) -> f64 {
        self.chi / (2.0 * self.rho * MU0)
    }
}

impl Default for Material {
    fn default() -> Self {
        Self::diamond()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub material: Material,
    /// Mass, kg.
    pub mass: f64,
}

impl Particle {
    pub fn new(material: Material, mass: f64) -> Result<Self, StaticsError> {
        material.validate()?;
        if !(mass.is_finite() && mass > 0.0) {
            return Err(StaticsError::InvalidInput(format!("mass must be positive, got {mass}")));
        }
        Ok(Self { material, mass })
    }

    pub fn volume(&self) -> f64 {
        self.mass / self.material.rho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapModel {
    pub coeffs: MultipoleCoefficients,
    pub material: Material,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeFrequencies {
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
}

impl ModeFrequencies {
    pub fn new(fx: f64, fy: f64, fz: f64) -> Self {
        Self { fx, fy, fz }
    }

    /// Frequencies measured for the experimental trap.
    pub fn reported() -> Self {
        Self::new(104.0, 130.0, 9.6)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.fx, self.fy, self.fz]
    }

    pub fn max(&self) -> f64 {
        self.fx.max(self.fy).max(self.fz)
    }
}

/// Converged result of [`fit_coefficients`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientFit {
    pub coeffs: MultipoleCoefficients,
    pub y_eq: f64,
    pub residual_norm: f64,
    /// Other distinct stable solutions found by the multistart, if any.
    pub alternatives: Vec<(MultipoleCoefficients, f64)>,
}

const AXES: [char; 3] = ['x', 'y', 'z'];

impl TrapModel {
    pub fn new(coeffs: MultipoleCoefficients, material: Material) -> Self {
        Self { coeffs, material }
    }

    /// Total potential energy `U = −χB²V/(2μ0) + m·g·y` in joules.
    pub fn potential_energy(&self, particle: &Particle, pos: &Vec3) -> f64 {
        -particle.material.chi * self.coeffs.b_squared(pos) * particle.volume() / (2.0 * MU0)
            + particle.mass * G * pos.y
    }

    /// Net force per unit mass `−∇U/m` (m/s²) at `pos`.
    pub fn acceleration(&self, pos: &Vec3) -> Vec3 {
        let mut a = self.material.magnetic_factor() * self.coeffs.grad_b_squared(pos);
        a.y -= G;
        a
    }

    /// Hessian of `U/m` (s⁻²) at `pos`.
    pub fn curvature(&self, pos: &Vec3) -> Matrix3<f64> {
        -self.material.magnetic_factor() * self.coeffs.hess_b_squared(pos)
    }

    /// `g − (χ/(2ρμ0))·∂B²/∂y` on the vertical axis; zero at levitation.
    pub fn levitation_residual(&self, y: f64) -> f64 {
        let grad = self.coeffs.grad_b_squared(&Vec3::new(0.0, y, 0.0));
        G - self.material.magnetic_factor() * grad.y
    }

    /// Stable levitation height on the vertical axis.
    ///
    /// Scans downward from just below the centre for the first
    /// positive-to-negative crossing of the levitation residual, then bisects.
    pub fn find_equilibrium(&self) -> Result<f64, StaticsError> {
        self.coeffs
            .validate()
            .map_err(|e| StaticsError::InvalidInput(e.to_string()))?;
        self.material.validate()?;
        if self.material.chi >= 0.0 {
            return Err(StaticsError::NoEquilibrium);
        }

        let top = -1e-9;
        let bottom = -0.9 * self.coeffs.y0;
        const N: usize = 512;
        let mut hi = top;
        let mut r_hi = self.levitation_residual(hi);
        let mut bracket = None;
        for i in 1..=N {
            let y = top + (bottom - top) * i as f64 / N as f64;
            let r = self.levitation_residual(y);
            if r_hi > 0.0 && r <= 0.0 {
                bracket = Some((y, hi));
                break;
            }
            hi = y;
            r_hi = r;
        }
        let (mut lo, mut hi) = bracket.ok_or(StaticsError::NoEquilibrium)?;

        // residual is positive above the root and non-positive below it
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            let r = self.levitation_residual(mid);
            if r == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            if r > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let y_eq = if self.levitation_residual(lo).abs() < self.levitation_residual(hi).abs() {
            lo
        } else {
            hi
        };

        let pos = Vec3::new(0.0, y_eq, 0.0);
        let acc = self.acceleration(&pos);
        if acc.norm() > 1e-6 * G {
            return Err(StaticsError::NoEquilibrium);
        }

        let h = self.curvature(&pos);
        let eig = h.symmetric_eigenvalues();
        let scale = eig.amax();
        if eig.iter().any(|&e| e < -1e-9 * scale) {
            return Err(StaticsError::Unstable {
                y_eq,
                curvatures: [h[(0, 0)], h[(1, 1)], h[(2, 2)]],
            });
        }
        Ok(y_eq)
    }

    /// Normal-mode frequencies at a given levitation height (no root finding).
    pub fn mode_frequencies_at(&self, y_eq: f64) -> Result<ModeFrequencies, StaticsError> {
        let h = self.curvature(&Vec3::new(0.0, y_eq, 0.0));
        let diag_scale = h.diagonal().amax();
        let off = h[(0, 1)].abs().max(h[(0, 2)].abs()).max(h[(1, 2)].abs());
        if diag_scale > 0.0 && off > 1e-6 * diag_scale {
            return Err(StaticsError::NotSeparable { ratio: off / diag_scale });
        }
        let mut f = [0.0; 3];
        for i in 0..3 {
            let k = h[(i, i)];
            if k <= 0.0 || !k.is_finite() {
                return Err(StaticsError::ImaginaryFrequency {
                    axis: AXES[i],
                    curvature: k,
                });
            }
            f[i] = k.sqrt() / (2.0 * PI);
        }
        Ok(ModeFrequencies::new(f[0], f[1], f[2]))
    }

    pub fn mode_frequencies(&self) -> Result<ModeFrequencies, StaticsError> {
        let y_eq = self.find_equilibrium()?;
        self.mode_frequencies_at(y_eq)
    }

    /// Stiffness matrix `∂²U/∂r_i∂r_j` (N/m) for a specific particle.
    pub fn stiffness(&self, particle: &Particle, pos: &Vec3) -> Matrix3<f64> {
        -particle.material.chi * particle.volume() / (2.0 * MU0) * self.coeffs.hess_b_squared(pos)
    }

    /// Mode frequencies from the particle's own stiffness and mass.
    pub fn particle_mode_frequencies(&self, particle: &Particle) -> Result<ModeFrequencies, StaticsError> {
        let trap = TrapModel::new(self.coeffs, particle.material);
        let y_eq = trap.find_equilibrium()?;
        let k = trap.stiffness(particle, &Vec3::new(0.0, y_eq, 0.0));
        let mut f = [0.0; 3];
        for i in 0..3 {
            let w2 = k[(i, i)] / particle.mass;
            if w2 <= 0.0 || !w2.is_finite() {
                return Err(StaticsError::ImaginaryFrequency {
                    axis: AXES[i],
                    curvature: w2,
                });
            }
            f[i] = w2.sqrt() / (2.0 * PI);
        }
        Ok(ModeFrequencies::new(f[0], f[1], f[2]))
    }
}

struct FitProblem {
    material: Material,
    y0: f64,
    omega2: [f64; 3],
}

impl FitProblem {
    fn model(&self, p: &DVector<f64>) -> TrapModel {
        TrapModel::new(
            MultipoleCoefficients {
                a2: p[0],
                a3: p[1],
                a4: p[2],
                y0: self.y0,
            },
            self.material,
        )
    }
}

impl lm::Problem for FitProblem {
    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let t = self.model(p);
        let y = p[3] * self.y0;
        let h = t.curvature(&Vec3::new(0.0, y, 0.0));
        let mut r = DVector::zeros(4);
        r[0] = t.levitation_residual(y) / G;
        for i in 0..3 {
            r[i + 1] = h[(i, i)] / self.omega2[i] - 1.0;
        }
        r.iter().all(|v| v.is_finite()).then_some(r)
    }
}

fn canonical(mut c: MultipoleCoefficients) -> MultipoleCoefficients {
    // B² is invariant under a global sign flip of Φ_M; report a2 ≤ 0
    if c.a2 > 0.0 {
        c.a2 = -c.a2;
        c.a3 = -c.a3;
        c.a4 = -c.a4;
    }
    c
}

fn same_solution(a: &(MultipoleCoefficients, f64), b: &(MultipoleCoefficients, f64)) -> bool {
    let close = |u: f64, v: f64, s: f64| (u - v).abs() <= 1e-6 * s;
    let s = a.0.a2.abs().max(b.0.a2.abs());
    close(a.0.a2, b.0.a2, s)
        && close(a.0.a3, b.0.a3, s)
        && close(a.0.a4, b.0.a4, s)
        && close(a.1, b.1, a.1.abs().max(b.1.abs()))
}

/// Solve for `(a2, a3, a4, y_eq)` from three measured mode frequencies.
///
/// The four equations are force balance on the vertical axis plus one
/// curvature match per axis. A damped least-squares solve is started from the
/// pure-quadrupole estimate and eight sign/scale perturbations of the
/// higher-order terms; the stable solution with the smallest `|y_eq|` wins.
pub fn fit_coefficients(
    measured: &ModeFrequencies,
    material: &Material,
    y0: f64,
) -> Result<CoefficientFit, StaticsError> {
    material.validate()?;
    let freqs = measured.as_array();
    if freqs.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(StaticsError::InvalidInput(format!(
            "trap frequencies must be positive, got {freqs:?}"
        )));
    }
    if !(y0.is_finite() && y0 > 0.0) {
        return Err(StaticsError::InvalidInput(format!("y0 must be positive, got {y0}")));
    }
    if material.chi >= 0.0 {
        return Err(StaticsError::NoEquilibrium);
    }

    let omega2 = freqs.map(|f| (2.0 * PI * f).powi(2));
    let problem = FitProblem {
        material: *material,
        y0,
        omega2,
    };

    // pure quadrupole: ω_y² = −χ/(ρμ0)·K², y_eq = ρgμ0/(χK²)
    let k2 = omega2[1] * material.rho * MU0 / (-material.chi);
    let k = -k2.sqrt();
    let a2 = 2.0 * y0 * k / crate::fieldmodel::Harmonic::Y2m2.norm();
    let y_init = material.rho * G * MU0 / (material.chi * k2);

    let mut starts = Vec::with_capacity(8);
    for scale in [1.0, 0.25] {
        for s3 in [1.0, -1.0] {
            for s4 in [1.0, -1.0] {
                starts.push(DVector::from_vec(vec![
                    a2,
                    s3 * 0.01 * a2.abs() * scale,
                    s4 * 0.5 * a2.abs() * scale,
                    (y_init / y0).max(-0.9),
                ]));
            }
        }
    }

    let opts = lm::Options {
        max_iter: 500,
        gtol: 0.0,
        xtol: 1e-15,
        ftol_abs: 1e-13,
    };
    let mut best_residual = f64::INFINITY;
    let mut found: Vec<(MultipoleCoefficients, f64, f64)> = Vec::new();
    for x0 in starts {
        let Some(rep) = lm::minimize(&problem, x0, opts) else {
            continue;
        };
        best_residual = best_residual.min(rep.residual_norm);
        if rep.residual_norm >= 1e-10 {
            continue;
        }
        let p = &rep.params;
        let coeffs = canonical(MultipoleCoefficients {
            a2: p[0],
            a3: p[1],
            a4: p[2],
            y0,
        });
        let y_eq = p[3] * y0;
        // must be the equilibrium the forward model actually selects
        let model = TrapModel::new(coeffs, *material);
        match model.find_equilibrium() {
            Ok(y) if (y - y_eq).abs() <= 1e-9 * y0 => {}
            _ => continue,
        }
        let cand = (coeffs, y_eq);
        if !found.iter().any(|(c, y, _)| same_solution(&(*c, *y), &cand)) {
            found.push((coeffs, y_eq, rep.residual_norm));
        }
    }

    if found.is_empty() {
        return Err(StaticsError::NoConvergence { best_residual });
    }
    found.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
    let to_fit = |s: &(MultipoleCoefficients, f64, f64), alts: Vec<(MultipoleCoefficients, f64)>| CoefficientFit {
        coeffs: s.0,
        y_eq: s.1,
        residual_norm: s.2,
        alternatives: alts,
    };
    if found.len() > 1 && (found[0].1.abs() - found[1].1.abs()).abs() <= 1e-9 * found[0].1.abs() {
        return Err(StaticsError::AmbiguousSolution {
            first: Box::new(to_fit(&found[0], vec![])),
            second: Box::new(to_fit(&found[1], vec![])),
        });
    }
    let alternatives = found[1..].iter().map(|s| (s.0, s.1)).collect();
    Ok(to_fit(&found[0], alternatives))
}
