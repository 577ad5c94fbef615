use std::path::PathBuf;

use thiserror::Error;

use crate::replica::ReplicaId;
use crate::sim::SimTime;
use crate::workload::RequestId;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event at {event} scheduled before current clock {now}")]
    Causality { now: SimTime, event: SimTime },

    #[error("event cap of {0} exceeded; the run does not terminate")]
    EventCapExceeded(u64),

    #[error("unknown rng substream `{0}`")]
    UnknownSubstream(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid workload: {0}")]
    InvalidWorkload(String),

    #[error("request {0} is already on replica {1}")]
    DuplicateDispatch(RequestId, ReplicaId),

    #[error(
        "request {request} needs {needed} blocks but replica {replica} only has {capacity}; \
         capacity is misconfigured for this workload"
    )]
    CapacityExceeded {
        replica: ReplicaId,
        request: RequestId,
        needed: u64,
        capacity: u64,
    },

    #[error("routing contract violated: {0}")]
    Contract(String),

    #[error("autoscaler: {0}")]
    Scaler(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("statistics: {0}")]
    Stats(String),

    #[error("plot: {0}")]
    Plot(String),
}

impl SimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }
}
