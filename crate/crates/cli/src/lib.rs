//! Command-line entry points and the HTTP service for the empathy models.

pub mod commands;
pub mod config;
pub mod service;

pub use commands::{run, Cli, Command};
pub use service::{router, AppState, Predictor, ServiceConfig};
