//! Truncated multipole model of the trap field.
//!
//! The magnetic scalar potential keeps three real solid harmonics: a linear
//! quadrupole (`Y2,-2`), a hexapole (`Y3,1`) and a linear octopole (`Y4,-4`).
//! Each term is a homogeneous Cartesian polynomial, so the field and every
//! derivative of `B²` used by the statics are evaluated in closed form.
//!
//! Coordinates follow the trap frame: `x` transverse, `y` vertical (gravity
//! along `-y`), `z` axial.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::MU0;

/// Position or field vector in the trap frame.
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("pole-piece half-gap y0 must be positive and finite, got {0}")]
    InvalidY0(f64),
    #[error("multipole coefficient {name} is not finite")]
    NonFinite { name: &'static str },
}

/// Which of the three retained real spherical harmonics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Harmonic {
    Y2m2,
    Y31,
    Y4m4,
}

impl Harmonic {
    pub fn degree(self) -> i32 {
        match self {
            Harmonic::Y2m2 => 2,
            Harmonic::Y31 => 3,
            Harmonic::Y4m4 => 4,
        }
    }

    /// Normalisation constant in front of the Cartesian polynomial.
    pub fn norm(self) -> f64 {
        match self {
            Harmonic::Y2m2 => 0.5 * (15.0 / PI).sqrt(),
            Harmonic::Y31 => 0.25 * (21.0 / (2.0 * PI)).sqrt(),
            Harmonic::Y4m4 => 0.75 * (35.0 / PI).sqrt(),
        }
    }

    /// Solid harmonic `r^l · Y`, a homogeneous polynomial of degree `l`.
    pub fn solid(self, pos: &Vec3) -> f64 {
        let (x, y, z) = (pos.x, pos.y, pos.z);
        let p = match self {
            Harmonic::Y2m2 => x * y,
            Harmonic::Y31 => x * (4.0 * z * z - x * x - y * y),
            Harmonic::Y4m4 => x * y * (x * x - y * y),
        };
        self.norm() * p
    }
}

/// Angular value of the real harmonic at `pos`.
///
/// Computed as the solid harmonic divided by `r^l`. The angular part has no
/// limit at the origin; `0.0` is returned there.
pub fn real_harmonic(kind: Harmonic, pos: &Vec3) -> f64 {
    let r2 = pos.norm_squared();
    if r2 == 0.0 {
        return 0.0;
    }
    kind.solid(pos) / r2.powf(kind.degree() as f64 / 2.0)
}

/// Trap field parameters. `a2`, `a3`, `a4` are in tesla, `y0` in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultipoleCoefficients {
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub y0: f64,
}

/// Value, gradient, Hessian and third-derivative tensor of `μ0·Φ_M` (T·m).
#[derive(Debug, Clone, Copy)]
struct PotentialJet {
    grad: Vector3<f64>,
    hess: Matrix3<f64>,
    third: [[[f64; 3]; 3]; 3],
}

impl MultipoleCoefficients {
    pub fn new(a2: f64, a3: f64, a4: f64, y0: f64) -> Result<Self, FieldError> {
        let c = Self { a2, a3, a4, y0 };
        c.validate()?;
        Ok(c)
    }

    /// Coefficients reported for the experimental trap (y0 = 75 µm).
    pub fn reported() -> Self {
        Self {
            a2: -1.3,
            a3: 0.018,
            a4: 0.72,
            y0: crate::constants::TRAP_Y0,
        }
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        for (name, v) in [("a2", self.a2), ("a3", self.a3), ("a4", self.a4)] {
            if !v.is_finite() {
                return Err(FieldError::NonFinite { name });
            }
        }
        if !(self.y0.is_finite() && self.y0 > 0.0) {
            return Err(FieldError::InvalidY0(self.y0));
        }
        Ok(())
    }

    /// Polynomial prefactors (k2, k3, k4) of `μ0·Φ_M`:
    /// `k2·xy + k3·x(4z²−x²−y²) + k4·xy(x²−y²)`.
    fn prefactors(&self) -> (f64, f64, f64) {
        let y0 = self.y0;
        (
            self.a2 * Harmonic::Y2m2.norm() / (2.0 * y0),
            self.a3 * Harmonic::Y31.norm() / (3.0 * y0 * y0),
            self.a4 * Harmonic::Y4m4.norm() / (4.0 * y0 * y0 * y0),
        )
    }

    /// Magnetic scalar potential Φ_M in amperes.
    pub fn scalar_potential(&self, pos: &Vec3) -> f64 {
        let (x, y, z) = (pos.x, pos.y, pos.z);
        let (k2, k3, k4) = self.prefactors();
        let psi = k2 * x * y + k3 * x * (4.0 * z * z - x * x - y * y) + k4 * x * y * (x * x - y * y);
        psi / MU0
    }

    fn jet(&self, pos: &Vec3) -> PotentialJet {
        let (x, y, z) = (pos.x, pos.y, pos.z);
        let (k2, k3, k4) = self.prefactors();

        let grad = Vector3::new(
            k2 * y + k3 * (4.0 * z * z - 3.0 * x * x - y * y) + k4 * (3.0 * x * x * y - y * y * y),
            k2 * x - 2.0 * k3 * x * y + k4 * (x * x * x - 3.0 * x * y * y),
            8.0 * k3 * x * z,
        );

        let hxx = -6.0 * k3 * x + 6.0 * k4 * x * y;
        let hxy = k2 - 2.0 * k3 * y + 3.0 * k4 * (x * x - y * y);
        let hxz = 8.0 * k3 * z;
        let hyy = -2.0 * k3 * x - 6.0 * k4 * x * y;
        let hzz = 8.0 * k3 * x;
        #[rustfmt::skip]
        let hess = Matrix3::new(
            hxx, hxy, hxz,
            hxy, hyy, 0.0,
            hxz, 0.0, hzz,
        );

        // Fully symmetric third-derivative tensor; fill from the independent
        // components.
        let txxx = -6.0 * k3 + 6.0 * k4 * y;
        let txxy = 6.0 * k4 * x;
        let txyy = -2.0 * k3 - 6.0 * k4 * y;
        let tyyy = -6.0 * k4 * x;
        let txzz = 8.0 * k3;
        let mut third = [[[0.0; 3]; 3]; 3];
        let mut set = |i: usize, j: usize, k: usize, v: f64| {
            for (a, b, c) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                third[a][b][c] = v;
            }
        };
        set(0, 0, 0, txxx);
        set(0, 0, 1, txxy);
        set(0, 1, 1, txyy);
        set(1, 1, 1, tyyy);
        set(0, 2, 2, txzz);

        PotentialJet { grad, hess, third }
    }

    /// Magnetic field `B = −μ0 ∇Φ_M` in tesla.
    pub fn field_b(&self, pos: &Vec3) -> Vec3 {
        -self.jet(pos).grad
    }

    /// Jacobian `∂B_i/∂x_j` in T/m (symmetric, traceless).
    pub fn field_jacobian(&self, pos: &Vec3) -> Matrix3<f64> {
        -self.jet(pos).hess
    }

    pub fn b_squared(&self, pos: &Vec3) -> f64 {
        self.jet(pos).grad.norm_squared()
    }

    /// `∇(B²)` in T²/m.
    pub fn grad_b_squared(&self, pos: &Vec3) -> Vec3 {
        let j = self.jet(pos);
        2.0 * j.hess * j.grad
    }

    /// Hessian of `B²` in T²/m².
    pub fn hess_b_squared(&self, pos: &Vec3) -> Matrix3<f64> {
        let j = self.jet(pos);
        let mut h = j.hess * j.hess;
        for i in 0..3 {
            for a in 0..3 {
                for b in 0..3 {
                    h[(a, b)] += j.grad[i] * j.third[i][a][b];
                }
            }
        }
        2.0 * h
    }

    /// `B²` together with its gradient, sharing one polynomial evaluation.
    pub fn b_squared_with_grad(&self, pos: &Vec3) -> (f64, Vec3) {
        let j = self.jet(pos);
        (j.grad.norm_squared(), 2.0 * j.hess * j.grad)
    }

    /// Field-gradient scale `K = a2·c2/(2·y0)` of the quadrupole term (T/m).
    pub fn quadrupole_gradient(&self) -> f64 {
        self.prefactors().0
    }
}
