use thiserror::Error;

/// Errors raised by the physics, simulation and estimation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid bath: {0}")]
    InvalidBath(String),
    #[error("heating regime: optical damping {gamma_opt:.6e} rad/s is not positive")]
    HeatingRegime { gamma_opt: f64 },
    #[error("asymmetric setup: {0}")]
    Asymmetric(String),
    #[error("undefined correlator: {0}")]
    Undefined(String),
    #[error("degenerate witness: g2 values {g2_aa} and {g2_ba} are indistinguishable")]
    Degenerate { g2_aa: f64, g2_ba: f64 },
    #[error("blind spot: cos^2(delta*tau + 2 phi) = {cos2:.3e} is below tolerance")]
    BlindSpot { cos2: f64 },
    #[error("no violation possible: n_M = {n_m} is not below {n_max}")]
    NoViolationPossible { n_m: f64, n_max: f64 },
    #[error("rate inconsistency: {0}")]
    RateInconsistency(String),
    #[error("truncation exceeded: time-averaged top-level population {population:.3e} > {tolerance:.1e}")]
    TruncationExceeded { population: f64, tolerance: f64 },
    #[error("insufficient clicks: {found} conditioning events, need {required}")]
    InsufficientClicks { found: usize, required: usize },
    #[error("empty channel: {0}")]
    EmptyChannel(String),
    #[error("aliasing: {0}")]
    Aliasing(String),
    #[error("floor fit failed: {0}")]
    FloorFitFailed(String),
    #[error("record format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
