use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaclError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate user `{user}`")]
    DuplicateUser { line: usize, user: String },

    #[error("filtering produced an empty corpus (min_count = {min_count})")]
    EmptyCorpus { min_count: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("item index {item} is outside the vocabulary of size {vocab_size}")]
    OutOfVocabulary { item: u32, vocab_size: usize },

    #[error("non-finite values in `{tensor}`")]
    NonFinite { tensor: String },

    #[error("zero-norm representation at row {row}; cosine similarity is undefined")]
    ZeroNorm { row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(String),
}

impl FaclError {
    /// Short stable code used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            FaclError::Parse { .. } | FaclError::DuplicateUser { .. } => "E_PARSE",
            FaclError::EmptyCorpus { .. } => "E_EMPTY",
            FaclError::Config(_) => "E_CONFIG",
            FaclError::OutOfVocabulary { .. } => "E_OOV",
            FaclError::NonFinite { .. } | FaclError::ZeroNorm { .. } => "E_NUMERIC",
            FaclError::Shape(_) => "E_SHAPE",
            FaclError::Checkpoint(_) => "E_CHECKPOINT",
            FaclError::Io(_) => "E_IO",
        }
    }
}

impl From<std::io::Error> for FaclError {
    fn from(e: std::io::Error) -> Self {
        FaclError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FaclError>;
