//! Library side of the `splitmpc` command: scenario parsing, the four
//! commands and their CSV/JSON artifacts.

pub mod commands;
pub mod config;
pub mod output;

pub use config::ScenarioConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("certificate failure: {0}")]
    Certificate(String),
    #[error("{0}")]
    Run(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Certificate(_) => 3,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<splitmpc::Error> for CliError {
    fn from(e: splitmpc::Error) -> Self {
        match e {
            splitmpc::Error::Slater(_) | splitmpc::Error::Certificate(_) => CliError::Certificate(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Run(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(format!("json: {e}"))
    }
}
