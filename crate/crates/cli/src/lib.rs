//! Command-line tools, run manifests and the HTTP service.

pub mod cli;
pub mod commands;
pub mod config;
pub mod imageio;
pub mod manifest;
pub mod plot;
pub mod run;
pub mod service;

pub use cli::Cli;
pub use commands::dispatch;
pub use run::Invocation;
