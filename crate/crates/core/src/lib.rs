//! Simulation and analysis toolkit for a magneto-gravitational diamagnetic trap.
//!
//! The trap field is a truncated multipole expansion (quadrupole, hexapole and
//! octopole terms). On top of it sit the statics (levitation, normal modes and
//! the inverse coefficient fit), a Langevin integrator with cold-damping
//! feedback, PSD-based mass/temperature calibration, and a centroid tracker
//! for synthetic camera frames.

pub mod constants;
pub mod dynamics;
pub mod fieldmodel;
pub mod lm;
pub mod spectra;
pub mod tracking;
pub mod trapstatics;

pub use fieldmodel::{Harmonic, MultipoleCoefficients, Vec3};
pub use trapstatics::{Material, ModeFrequencies, Particle, TrapModel};
