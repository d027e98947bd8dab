//! Shared physical constants (SI).

/// Vacuum permeability, T·m/A.
pub const MU0: f64 = 1.256_637_062_12e-6;
/// Standard gravity, m/s².
pub const G: f64 = 9.806_65;
/// Boltzmann constant, J/K.
pub const KB: f64 = 1.380_649e-23;

/// Ambient temperature assumed for thermalised rough-vacuum data, K.
pub const AMBIENT_K: f64 = 295.0;

/// Diamond volume susceptibility (SI, dimensionless).
pub const DIAMOND_CHI: f64 = -2.2e-5;
/// Diamond mass density, kg/m³.
pub const DIAMOND_RHO: f64 = 3500.0;

/// Half-gap between the trap centre and the top/bottom pole pieces, m.
pub const TRAP_Y0: f64 = 75e-6;

/// Camera calibration, µm per pixel.
pub const CAMERA_UM_PER_PX: f64 = 0.259;
/// Camera frame rate, frames per second.
pub const CAMERA_FPS: f64 = 496.0;
