use std::path::PathBuf;

/// Errors produced anywhere in the training and evaluation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor belongs to a different tape")]
    ForeignTensor,

    #[error("mel filter {row} has no positive weight (n_mels too large for n_fft)")]
    FilterbankDegenerate { row: usize },
    #[error("waveform has {samples} samples, fewer than one frame ({frame})")]
    TooShort { samples: usize, frame: usize },
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedSampleRate(u32),

    #[error("input has {frames} frames, the trunk needs at least {min}")]
    InputTooShort { frames: usize, min: usize },

    #[error("label of length {label_len} needs {required} frames, lattice has {frames}")]
    InfeasibleLabel {
        label_len: usize,
        required: usize,
        frames: usize,
    },
    #[error("brute-force search space {0} exceeds the oracle limit")]
    OracleTooLarge(u128),

    #[error("numerical fault: {0}")]
    NumericalFault(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("data fault: {0}")]
    DataFault(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("config fault: {0}")]
    Config(String),

    #[error("parse fault at line {line}: {msg}")]
    ParseFault { line: usize, msg: String },
    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),
    #[error("empty test set")]
    EmptyTestSet,

    #[error("i/o fault on {path}: {source}")]
    IoFault {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav fault on {path}: {msg}")]
    Wav { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFault {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    /// True for faults that come from arithmetic (NaN, divergence) rather
    /// than from bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalFault(_))
    }
}
