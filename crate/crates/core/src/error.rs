use std::path::PathBuf;

/// Library-wide error type. Variants are grouped by the CLI exit code they
/// map to: `Config` and `Usage` are caller mistakes, `Io`/`Malformed*` are
/// data problems, the rest are runtime failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("record {qid}: missing or invalid field `{field}`")]
    MalformedRecord { qid: String, field: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("answer `{answer}` not found in passage")]
    AnswerNotFound { answer: String },

    #[error("answer span survives only partially under the token budget")]
    TruncatedAnswer,

    #[error("question alone exceeds the token budget ({needed} tokens, budget {budget})")]
    BudgetTooSmall { needed: usize, budget: usize },

    #[error("instance has no answer sentence to seed extraction")]
    NoAnswerSentence,

    #[error("passage has {n} sentences; exhaustive extraction is capped at {max}")]
    PassageTooLarge { n: usize, max: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Exit code the CLI reports for this error: 1 usage, 2 data, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Io { .. } | Error::Json { .. } | Error::MalformedRecord { .. } => 2,
            _ => 3,
        }
    }
}
