use std::process::ExitCode;

use serde::Serialize;

/// Validation failures exit with 2, runtime failures with 3.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            status: &'static str,
            kind: &'static str,
            exit_code: u8,
            message: &'a str,
        }
        let kind = match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        };
        serde_json::to_string(&Report {
            status: "error",
            kind,
            exit_code: self.code(),
            message: self.message(),
        })
        .expect("error report serializes")
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl From<pjx_core::Error> for CliError {
    fn from(e: pjx_core::Error) -> Self {
        use pjx_core::Error as E;
        match e {
            E::Io { .. } | E::Contract(_) => CliError::Runtime(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}
