use thiserror::Error;

use crate::drbsde::IjState;
use crate::lattice::NodeId;
use crate::rbsde::PicardDiagnostics;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid probabilities at node {node}: {reason}")]
    InvalidProbabilities { node: NodeId, reason: String },

    #[error("invalid tree structure: {0}")]
    InvalidTree(String),

    #[error("level mismatch: {0}")]
    LevelMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("enumeration needs {count} items, cap is {cap}")]
    TooLarge { count: u128, cap: u128 },

    #[error("not a martingale: drift {drift:e} at node {node}")]
    NotAMartingale { node: NodeId, drift: f64 },

    #[error("bad covariance at node {node}: {reason}")]
    BadCovariance { node: NodeId, reason: String },

    #[error("predictable representation fails at node {node}: residual {residual:e} exceeds {tolerance:e}")]
    PrpViolation {
        node: NodeId,
        residual: f64,
        tolerance: f64,
    },

    #[error("lower obstacle {xi} exceeds terminal value {eta} at leaf {node}")]
    ObstacleAboveTerminal { node: NodeId, xi: f64, eta: f64 },

    #[error("obstacles out of order at node {node}: lower {lower} > upper {upper}")]
    ObstacleOrderViolation { node: NodeId, lower: f64, upper: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("Picard iteration did not converge after {} iterations (last diff {:e})", .0.iterations, .0.diffs.last().copied().unwrap_or(f64::NAN))]
    NotConverged(Box<PicardDiagnostics>),

    #[error("I/J iteration did not converge after {} steps (sup delta {:e})", .0.k, .0.sup_delta)]
    IjNotConverged(Box<IjState>),

    #[error("I/J iterates decreased by {amount:e} at node {node}")]
    MonotonicityViolation { node: NodeId, amount: f64 },

    #[error("bad estimate parameters: {0}")]
    BadParameters(String),

    #[error("intensity {lambda} too large for step {dq}: lambda * dQ must be < 1")]
    IntensityTooLarge { lambda: f64, dq: f64 },

    #[error("grid mismatch between product factors")]
    GridMismatch,

    #[error("unknown payoff family `{0}`")]
    UnknownPayoff(String),

    #[error("invalid payoff: {0}")]
    InvalidPayoff(String),

    #[error("unknown generator family `{0}`")]
    UnknownGenerator(String),

    #[error("invalid generator: {0}")]
    InvalidGenerator(String),

    #[error("expression error at offset {offset}: {message}")]
    Expression { offset: usize, message: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
