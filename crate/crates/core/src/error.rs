use thiserror::Error;

/// Errors raised across the pipeline.
///
/// The variants double as exit-code categories for the command-line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("out-of-vocabulary token `{0}`")]
    Vocab(String),
    #[error("too few instances: need at least 2, got {0}")]
    TooFewInstances(usize),
    #[error("corrupt corpus: {0}")]
    CorruptCorpus(String),
    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::CorruptCorpus(_)
            | Error::Version { .. }
            | Error::Vocab(_)
            | Error::TooFewInstances(_)
            | Error::EmptyInput(_) => 3,
            Error::Numeric(_) => 4,
            Error::Contract(_) => 5,
            Error::Io(_) | Error::Json(_) => 6,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
