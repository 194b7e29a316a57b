use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value produced by {op}")]
    NumericDomain { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "FAST budget exceeded: live {live} bytes (peak {peak}) over budget {budget}; \
         minimum feasible budget {}",
        .advisory_min.map_or_else(|| "unknown".to_string(), |m| format!("{m} bytes"))
    )]
    Budget {
        live: u64,
        peak: u64,
        budget: u64,
        advisory_min: Option<u64>,
    },

    #[error("non-deterministic function: evaluations gave {first:e} and {second:e}")]
    Determinism { first: f64, second: f64 },

    #[error("corrupt payload {path}: {reason}")]
    CorruptPayload { path: PathBuf, reason: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
