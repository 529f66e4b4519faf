//! Experiment drivers and command implementations behind the `anomseg` binary.

pub mod artifacts;
pub mod commands;
pub mod experiment;
