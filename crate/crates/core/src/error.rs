use thiserror::Error;

/// Errors raised by the solvers, the simulator and the file front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    Validation(String),

    #[error("time {t} outside [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("closed-loop not solvable (blow-up at t = {t})")]
    BlowUp { t: f64 },

    #[error("non-finite value at t = {t}")]
    NonFinite { t: f64 },

    #[error("non-finite state on path {path} at t = {t}")]
    PathDiverged { path: usize, t: f64 },

    #[error("R11 + D1'P1 D1 is near-singular at t = {t} (condition {cond:.3e})")]
    SingularRhat { t: f64, cond: f64 },

    #[error("{which} is near-singular at t = {t} (condition {cond:.3e})")]
    SingularFactor { which: &'static str, t: f64, cond: f64 },

    #[error("certificate failure: {0}")]
    Certificate(String),

    #[error("leader value formula needs a homogeneous problem: {0} is nonzero")]
    NotHomogeneous(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv parse error: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for outcomes that mean "this game has no closed-loop solution",
    /// as opposed to bad input or I/O trouble.
    pub fn is_unsolvable(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. }
                | Error::SingularRhat { .. }
                | Error::SingularFactor { .. }
                | Error::Certificate(_)
        )
    }
}
