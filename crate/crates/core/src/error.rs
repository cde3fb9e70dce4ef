use std::path::PathBuf;

use thiserror::Error;

/// Failures surfaced by the numerical routines and the report layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension d = {0} (only 2 and 3 are available)")]
    UnsupportedDimension(usize),

    #[error("max degree L = {got} is too small (need at least {min})")]
    DegreeTooSmall { got: usize, min: usize },

    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("traces live on different bases")]
    BasisMismatch,

    #[error("invalid exponent {0}: radial exponents must be non-negative")]
    NegativeExponent(f64),

    #[error("radial grid too coarse: {got} radial nodes, need at least {min}")]
    GridTooCoarse { got: usize, min: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory covers [0, {available}] but T = {requested} was requested")]
    TrajectoryTooShort { requested: f64, available: f64 },

    #[error("time step {dt} exceeds the stability limit {limit}")]
    StepTooLarge { dt: f64, limit: f64 },

    #[error("trace is negative at a node (min value {0})")]
    NegativeTrace(f64),

    #[error("energy {value} is below the critical level {floor} beyond tolerance")]
    EnergyBelowCritical { value: f64, floor: f64 },

    #[error("fixed-point iteration for kappa did not converge in {0} iterations")]
    KappaDivergence(usize),

    #[error("the two reparametrized energy forms disagree: {first} vs {second}")]
    FormMismatch { first: f64, second: f64 },

    #[error("peak sits too close to the patch boundary for the ball of radius {0}")]
    PeakOnBoundary(f64),

    #[error("ball of radius {r} around ({x0}, {y0}) leaves the grid or is below 4h")]
    BallOutsideGrid { x0: f64, y0: f64, r: f64 },

    #[error("solver did not converge within {0} sweeps")]
    NoConvergence(usize),

    #[error("need at least {min} scales, got {got}")]
    TooFewScales { got: usize, min: usize },

    #[error("rejection sampling failed: {accepted} accepted out of {tried} draws")]
    CorpusInfeasible { accepted: usize, tried: usize },

    #[error("precondition violated for {what}: {detail}")]
    Precondition { what: String, detail: String },

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("invalid input {path}: {detail}")]
    InvalidInput { path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Bad configuration or input data, as opposed to a failed check.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::InvalidInput { .. }
                | Error::Io(_)
                | Error::Json(_)
                | Error::CorpusInfeasible { .. }
                | Error::UnsupportedDimension(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
