pub mod fit_trap;
pub mod simulate;
pub mod analyze;
pub mod render;
pub mod track;
pub mod reproduce;
