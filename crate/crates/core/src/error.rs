use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("conversation has no utterances")]
    EmptyConversation,
    #[error("utterance {0} has a feature dimension different from utterance 0")]
    FeatureDimMismatch(usize),
    #[error("utterance {0} carries a label outside the label space")]
    LabelOutOfRange(usize),
    #[error("utterance {0} has an empty speaker identifier")]
    EmptySpeaker(usize),
    #[error("utterance {0} has no gold label")]
    MissingGoldLabel(usize),
    #[error("index {index} is out of range for a conversation of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("row {0} of the attention mask allows no position")]
    FullyMaskedRow(usize),
    #[error("predecessor index {prev} is not before {t}")]
    InvalidGap { t: usize, prev: usize },
    #[error("conversation of length {len} exceeds the position table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("gold and predicted sequences differ in length ({golds} vs {preds})")]
    LengthMismatch { golds: usize, preds: usize },
    #[error("no samples remain after excluding the majority label")]
    ExcludedOnlyData,
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("conversation {id}: {cause}")]
    ValidationError { id: String, cause: Box<Error> },
    #[error("label {0:?} is not in the label space")]
    UnknownLabel(String),
    #[error("checkpoint is missing")]
    MissingCheckpoint,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable kind used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyConversation => "EmptyConversation",
            Error::FeatureDimMismatch(_) => "FeatureDimMismatch",
            Error::LabelOutOfRange(_) => "LabelOutOfRange",
            Error::EmptySpeaker(_) => "EmptySpeaker",
            Error::MissingGoldLabel(_) => "MissingGoldLabel",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::EmptyInput => "EmptyInput",
            Error::FullyMaskedRow(_) => "FullyMaskedRow",
            Error::InvalidGap { .. } => "InvalidGap",
            Error::SequenceTooLong { .. } => "SequenceTooLong",
            Error::EmptyDataset => "EmptyDataset",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::ExcludedOnlyData => "ExcludedOnlyData",
            Error::ParseError { .. } => "ParseError",
            Error::ValidationError { .. } => "ValidationError",
            Error::UnknownLabel(_) => "UnknownLabel",
            Error::MissingCheckpoint => "MissingCheckpoint",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Io(_) => "IoError",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
