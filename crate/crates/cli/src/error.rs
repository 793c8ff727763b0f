use optomech_entangle::Error as CoreError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type CliResult<T> = Result<T, CliError>;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_STATISTICAL: i32 = 4;

impl CliError {
    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: e.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                CoreError::InvalidParameter(_) => "invalid_parameter",
                CoreError::InvalidBath(_) => "invalid_bath",
                CoreError::HeatingRegime { .. } => "heating_regime",
                CoreError::Asymmetric(_) => "asymmetric",
                CoreError::Undefined(_) => "undefined",
                CoreError::Degenerate { .. } => "degenerate",
                CoreError::BlindSpot { .. } => "blind_spot",
                CoreError::NoViolationPossible { .. } => "no_violation_possible",
                CoreError::RateInconsistency(_) => "rate_inconsistency",
                CoreError::TruncationExceeded { .. } => "truncation_exceeded",
                CoreError::InsufficientClicks { .. } => "insufficient_clicks",
                CoreError::EmptyChannel(_) => "empty_channel",
                CoreError::Aliasing(_) => "aliasing",
                CoreError::FloorFitFailed(_) => "floor_fit_failed",
                CoreError::Format(_) => "format",
                CoreError::Io(_) => "io",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Core(e) => match e {
                CoreError::InvalidParameter(_)
                | CoreError::InvalidBath(_)
                | CoreError::HeatingRegime { .. }
                | CoreError::Asymmetric(_)
                | CoreError::NoViolationPossible { .. }
                | CoreError::Format(_)
                | CoreError::Io(_) => EXIT_CONFIG,
                CoreError::InsufficientClicks { .. } | CoreError::EmptyChannel(_) | CoreError::Degenerate { .. } => {
                    EXIT_STATISTICAL
                }
                CoreError::Undefined(_)
                | CoreError::BlindSpot { .. }
                | CoreError::RateInconsistency(_)
                | CoreError::TruncationExceeded { .. }
                | CoreError::Aliasing(_)
                | CoreError::FloorFitFailed(_) => EXIT_NUMERICAL,
            },
        }
    }

    /// One-line machine-readable report.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: Body<'a>,
        }
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            exit_code: i32,
            message: String,
        }
        let r = Report { error: Body { kind: self.kind(), exit_code: self.exit_code(), message: self.to_string() } };
        serde_json::to_string(&r).expect("plain struct serializes")
    }
}
