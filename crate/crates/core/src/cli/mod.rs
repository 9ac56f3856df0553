//! File formats, corpus generation and the command-line front end.

pub mod commands;
pub mod embfile;
pub mod manifest;
pub mod modelfile;
pub mod pipeline;
pub mod synth;

pub use commands::{run, Cli, Command};
