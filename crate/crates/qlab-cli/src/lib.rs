//! Config-driven experiment runner for qlab.

pub mod config;
pub mod presets;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
pub use report::RunReport;
pub use run::{run, RunOptions};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] qlab::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}
