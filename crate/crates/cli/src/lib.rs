//! Command-line front end for the `magtrap` toolkit.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;
pub mod svg;
