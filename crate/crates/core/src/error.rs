use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector is not tangent at the base point (|<v, base>| = {deviation:e})")]
    InvalidTangent { deviation: f64 },

    #[error("parallel transport between antipodal points is not unique")]
    DegenerateTransport,

    #[error("quaternion lies outside the attractor half-sphere (angle {angle} rad)")]
    ProjectionDomain { angle: f64 },

    #[error("reduced point leaves the chart (norm {norm} >= pi/2)")]
    OutOfChart { norm: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("optimization failed after {iterations} iterations: {detail}")]
    OptimizationFailed { iterations: usize, detail: String },

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("conflicting constraints: {0}")]
    ConstraintConflict(String),

    #[error("degenerate joint chain: {0}")]
    DegenerateChain(String),

    #[error("rollout diverged at step {step} (distance {distance})")]
    Divergence { step: usize, distance: f64 },

    #[error("state penetrates obstacle {index} (signed distance {distance})")]
    Penetration { index: usize, distance: f64 },

    #[error("invalid segment boundaries: {0}")]
    InvalidBoundaries(String),

    #[error("failed to ingest motion {motion}: {detail}")]
    Ingestion { motion: String, detail: String },

    #[error("grid of {cells} cells exceeds the limit of {limit}")]
    GridLimit { cells: usize, limit: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
