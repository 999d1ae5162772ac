use std::path::PathBuf;

use crate::spd::SpdMatrix;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}, column `{column}`: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        message: String,
    },
    #[error("duplicate location ({lat}, {lon})")]
    DuplicateLocation { lat: f64, lon: f64 },
    #[error("invalid location ({lat}, {lon})")]
    InvalidLocation { lat: f64, lon: f64 },
    #[error("degenerate series: need at least two distinct years")]
    DegenerateSeries,
    #[error("cannot split {n} points into {n_train} training points and a non-empty test set")]
    BadSplit { n: usize, n_train: usize },
    #[error("dataset is malformed: {0}")]
    BadDataset(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("Karcher mean did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NonConvergence {
        best: SpdMatrix,
        iterations: usize,
        gradient_norm: f64,
    },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("degenerate rotation: u and v are both (near) zero")]
    DegenerateRotation,
    #[error("requested {requested} neighbors but only {available} points are available")]
    InsufficientNeighbors { requested: usize, available: usize },
    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("acceptance rate {rate:.3} during burn-in is below 1%")]
    AllProposalsRejected { rate: f64 },
    #[error("chain is empty")]
    EmptyChain,
    #[error("observed values have zero variance")]
    ZeroVariance,
    #[error("regions {first} and {second} overlap")]
    OverlappingRegions { first: usize, second: usize },
    #[error("location ({lat}, {lon}) has no match")]
    LocationMismatch { lat: f64, lon: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
