use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vocabulary")]
    EmptyVocabulary,

    #[error("duplicate surface: {0:?}")]
    DuplicateSurface(String),

    #[error("surface contains whitespace: {0:?}")]
    WhitespaceSurface(String),

    #[error("empty surface")]
    EmptySurface,

    #[error("unknown surface: {0:?}")]
    UnknownSurface(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("context length {len} exceeds maximum {max}")]
    ContextTooLong { len: usize, max: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("distributions have mismatched vocabulary sizes ({0} vs {1})")]
    VocabularyMismatch(usize, usize),

    #[error("unseen context suffix: {0:?}")]
    UnseenContext(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("sequence does not end with <eos>")]
    MissingEos,

    #[error("sequence contains <pad>")]
    PadInSequence,

    #[error("non-positive temperature: {0}")]
    NonPositiveTemperature(f64),

    #[error("invalid language spec: {0}")]
    InvalidSpec(String),

    #[error("generation infeasible: {0}")]
    Infeasible(String),

    #[error("cannot parse sequence: {0}")]
    ParseError(String),

    #[error("invalid transformation: {0}")]
    InvalidTransformation(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty context")]
    EmptyContext,

    #[error("training diverged (non-finite loss) at step {0}")]
    Diverged(usize),

    #[error("invalid model file: {0}")]
    InvalidModelFile(String),

    #[error("invalid kernel file: {0}")]
    InvalidKernelFile(String),

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
