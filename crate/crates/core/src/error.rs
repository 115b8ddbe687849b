use thiserror::Error;

use crate::graph::VertexId;
use crate::runtime::CommunicationLedger;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vertex {0} is not part of the graph")]
    UnknownVertex(VertexId),
    #[error("no estimate for vertex {0}")]
    MissingEstimate(VertexId),
    #[error("invalid edge {index}: {reason}")]
    InvalidEdge { index: usize, reason: String },
    #[error("graph is disconnected: {unreachable} vertices cannot be reached from the anchor")]
    Disconnected { unreachable: usize },
    #[error("graph has no edges")]
    EmptyGraph,
    #[error("invalid anchor: {0}")]
    InvalidAnchor(String),
    #[error("linear system is singular ({0})")]
    Singular(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{phase} iterations diverged after {iterations} iterations")]
    Diverged {
        phase: String,
        iterations: usize,
        ledger: Box<CommunicationLedger>,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownVertex(_) => "unknown_vertex",
            Error::MissingEstimate(_) => "missing_estimate",
            Error::InvalidEdge { .. } => "invalid_edge",
            Error::Disconnected { .. } => "disconnected",
            Error::EmptyGraph => "empty_graph",
            Error::InvalidAnchor(_) => "invalid_anchor",
            Error::Singular(_) => "singular",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidScenario(_) => "invalid_scenario",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Diverged { .. } => "diverged",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
