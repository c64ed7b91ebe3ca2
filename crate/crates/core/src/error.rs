use std::fmt;

use thiserror::Error;

/// A message that never completed, identified by its routing triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PendingMessage {
    pub source: usize,
    pub dest: usize,
    pub tag: u64,
}

impl fmt::Display for PendingMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} -> {}, tag {})", self.source, self.dest, self.tag)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {coord:?} is outside the interior 1..={dims:?}")]
    OutOfRange { coord: [usize; 3], dims: [usize; 3] },

    #[error("density is zero at site {0:?}; velocity undefined")]
    ZeroDensity([usize; 3]),

    #[error("non-finite value {value} at site {site:?}, component {component}")]
    NonFinite {
        site: [usize; 3],
        component: usize,
        value: f64,
    },

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error("coordinate {coord} leaves non-periodic dimension {dim} of extent {extent}")]
    Boundary { dim: usize, coord: i64, extent: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid rank {rank}; world has {nranks} ranks")]
    InvalidRank { rank: usize, nranks: usize },

    #[error("message from {sender} tag {tag} is {len} bytes but the receive holds {capacity}")]
    Truncated {
        sender: usize,
        tag: u64,
        len: usize,
        capacity: usize,
    },

    #[error("deadlock ({context}): pending {}", list_pending(.pending))]
    Deadlock {
        context: String,
        pending: Vec<PendingMessage>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("workload touched halo site {0:?}")]
    ContractViolation([usize; 3]),

    #[error("rank context panicked: {0}")]
    RankPanic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn list_pending(pending: &[PendingMessage]) -> String {
    let items: Vec<String> = pending.iter().map(ToString::to_string).collect();
    items.join(", ")
}

impl Error {
    /// Re-labels a deadlock with the phase in which it was observed.
    pub fn in_context(self, context: impl Into<String>) -> Self {
        match self {
            Error::Deadlock { pending, .. } => Error::Deadlock {
                context: context.into(),
                pending,
            },
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Boundary { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
