//! Configuration and stage drivers behind the `petseg` binary.

pub mod commands;
pub mod config;

pub use config::{Overrides, RunConfig};
