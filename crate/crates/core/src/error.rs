use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingest error at row {row}, column {column}: {message}")]
    Ingest {
        row: usize,
        column: String,
        message: String,
    },
    #[error("variable `{name}` is constant over the train range")]
    ConstantVariable { name: String },
    #[error("window of length {needed} does not fit in range of length {available}")]
    WindowTooLong { needed: usize, available: usize },
    #[error("frequency count {k} out of range 1..={bins}")]
    FrequencyCount { k: usize, bins: usize },
    #[error("moving-average window {window} exceeds series length {len}")]
    WindowSize { window: usize, len: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{which} rows must be L2-normalized (row {row} has norm {norm})")]
    Normalization {
        which: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("singular system; use alpha > 0")]
    SingularMatrix,
    #[error("probe error: {0}")]
    Probe(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ingest { .. } => "IngestError",
            Error::ConstantVariable { .. } => "ConstantVariableError",
            Error::WindowTooLong { .. } => "WindowTooLongError",
            Error::FrequencyCount { .. } => "FrequencyCountError",
            Error::WindowSize { .. } => "WindowSizeError",
            Error::Shape(_) => "ShapeError",
            Error::Axis { .. } => "AxisError",
            Error::NonFinite(_) => "NonFiniteError",
            Error::Config(_) => "ConfigError",
            Error::Normalization { .. } => "NormalizationError",
            Error::Divergence { .. } => "DivergenceError",
            Error::SingularMatrix => "SingularMatrixError",
            Error::Probe(_) => "ProbeError",
            Error::CheckpointMismatch(_) => "CheckpointMismatchError",
            Error::Usage(_) => "UsageError",
            Error::Io { .. } => "IoError",
            Error::Format { .. } => "FormatError",
        }
    }
}
