//! Library surface of the command-line pipeline: run configuration and the
//! train / infer / eval / flops / route-slide commands.

pub mod commands;
pub mod config;

pub use config::RunConfig;
