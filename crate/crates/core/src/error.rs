use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid neighbour count k={k} for n={n}")]
    InvalidK { k: usize, n: usize },
    #[error("eigensolver did not converge: {0}")]
    ConvergenceFailure(String),
    #[error("loss is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("loss is not recorded on this tape")]
    DisconnectedLoss,
    #[error("no spike observations recorded")]
    NoObservations,
    #[error("gate has {gate} entries but adjacency stores {edges} edges")]
    GateMisaligned { gate: usize, edges: usize },
    #[error("operation requires mode {0}")]
    WrongMode(&'static str),
    #[error("spike report is missing component {0}")]
    MissingComponent(&'static str),
    #[error("truth channel {0} has zero norm")]
    ZeroNormChannel(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset split is empty")]
    EmptyDataset,
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("format error in {file}: {detail}")]
    Format { file: String, detail: String },
    #[error("checksum mismatch for {file}: expected {expected}, found {found}")]
    ChecksumMismatch { file: String, expected: String, found: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(file: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
