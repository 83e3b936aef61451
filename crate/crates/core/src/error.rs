use thiserror::Error;

pub type Result<T, E = RelayError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RelayError {
    #[error("{op}: shape mismatch, expected {expected:?} got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("rotary embedding requires an even head dimension, got {0}")]
    OddHeadDim(usize),

    #[error("position {position} exceeds max_positions {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("trace is missing captured field `{0}`")]
    MissingCapture(&'static str),

    #[error("empty segment")]
    EmptySegment,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("origin marks count {marks} recomputed cells, stats report {reported}, schedule gives {expected}")]
    MarkMismatch {
        marks: usize,
        reported: usize,
        expected: usize,
    },

    #[error("invalid workflow: {0}")]
    InvalidWorkflow(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("instance {index}: {source}")]
    Instance {
        index: usize,
        #[source]
        source: Box<RelayError>,
    },

    #[error("agent {index}: {source}")]
    Agent {
        index: usize,
        #[source]
        source: Box<RelayError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RelayError {
    pub(crate) fn in_instance(self, index: usize) -> Self {
        RelayError::Instance {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_agent(self, index: usize) -> Self {
        RelayError::Agent {
            index,
            source: Box::new(self),
        }
    }

    /// True when the error stems from malformed input data rather than I/O.
    pub fn is_schema_error(&self) -> bool {
        match self {
            RelayError::Json(_)
            | RelayError::Format(_)
            | RelayError::VersionMismatch { .. }
            | RelayError::ChecksumMismatch { .. }
            | RelayError::InvalidSpec(_)
            | RelayError::InvalidWeights(_)
            | RelayError::InvalidProfile(_)
            | RelayError::InvalidParams(_)
            | RelayError::InvalidWorkflow(_) => true,
            RelayError::Instance { source, .. } | RelayError::Agent { source, .. } => {
                source.is_schema_error()
            }
            _ => false,
        }
    }
}
