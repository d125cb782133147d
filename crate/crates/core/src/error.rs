use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty history")]
    EmptyHistory,
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("steering out of range: {0} rad")]
    SteeringOutOfRange(f64),
    #[error("invalid vehicle spec: {0}")]
    InvalidSpec(String),
    #[error("invalid history: {0}")]
    InvalidHistory(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("length mismatch: predicted {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("time step mismatch: {pred} vs {gt}")]
    DtMismatch { pred: f64, gt: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("too few points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("unstable time step {dt}: must be below 2/omega_n = {bound}")]
    UnstableStep { dt: f64, bound: f64 },
    #[error("group size {0} below minimum of 2")]
    GroupTooSmall(usize),
}
