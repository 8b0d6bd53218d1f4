use thiserror::Error;

use crate::graph::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Graph construction or graph query arguments are inconsistent.
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("covariance submatrix is singular ({0})")]
    Singular(String),

    #[error("joint covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("insufficient samples: n = {n}, conditioning size = {z_size}")]
    InsufficientSamples { n: usize, z_size: usize },

    #[error("backend {backend} needs {needs} in the CI context")]
    BackendMismatch {
        backend: &'static str,
        needs: &'static str,
    },

    #[error("CI query (k={k}, v={v}, i={i}) failed: {source}")]
    Query {
        k: usize,
        v: usize,
        i: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("could not draw a well-conditioned invertible matrix after {0} attempts")]
    SingularDraw(usize),

    #[error("unmixing collapsed (|det Q| < 1e-12) after {0} restarts")]
    DetCollapse(usize),

    #[error("missing variables: {0}")]
    MissingVariables(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        match self {
            Error::InvalidGraph(_)
            | Error::InvalidArgument(_)
            | Error::UnknownNode(_)
            | Error::BackendMismatch { .. }
            | Error::MissingVariables(_)
            | Error::Parse(_)
            | Error::Json(_)
            | Error::InsufficientSamples { .. } => true,
            Error::Query { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
