//! Crate-wide error type and result alias.
//!
//! Errors are split along one line that matters at the process boundary:
//! [`Error::is_user_error`] distinguishes problems a caller can fix
//! (bad flags, invalid plans, missing credentials) from internal
//! failures (I/O, corrupt stores, arithmetic bugs). The CLI maps the
//! former to exit code 1 and the latter to exit code 2.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: plan files, endpoint definitions,
    /// templates, CLI flag values.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A lexicon failed validation (wrong list sizes, duplicates,
    /// whitespace in tokens).
    #[error("invalid lexicon: {0}")]
    Lexicon(String),

    /// Requested more unique persons than the name pool can produce.
    #[error("requested {requested} rows but the name pool caps out at {capacity} unique names")]
    Capacity { requested: usize, capacity: usize },

    /// Domain-level validation failure on operation inputs.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A fact-row sentence did not conform to the rendered grammar.
    #[error("row parse error at byte {position}: {message}")]
    RowParse { position: usize, message: String },

    /// An oracle precondition was violated (e.g. a person name matching
    /// zero or several rows).
    #[error("oracle integrity violation: {0}")]
    OracleIntegrity(String),

    /// Statistics requested on input with no information in it
    /// (single outcome class, zero token variance, too few points).
    #[error("degenerate statistical input: {0}")]
    DegenerateInput(String),

    /// Not enough cleaned buckets to estimate a window boundary.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A credential environment variable is unset or empty.
    #[error("credential environment variable {env_var} is not set")]
    MissingCredential { env_var: String },

    /// Attempt to create a run id that already exists in the store.
    #[error("run {run_id} already exists")]
    RunExists { run_id: String },

    /// A run id that the store does not contain.
    #[error("run {run_id} not found")]
    RunNotFound { run_id: String },

    /// A required artifact is missing (e.g. reporting before analyzing).
    #[error("{0}")]
    MissingArtifact(String),

    /// A stored record failed to decode in strict mode.
    #[error("corrupt record in {path} at line {line}: {message}")]
    Corrupt {
        path: String,
        line: u64,
        message: String,
    },

    /// HTTP client construction or other transport-layer setup failure.
    /// Per-request failures are data, not errors — see
    /// `modelio::CompletionResult`.
    #[error("transport setup failed: {0}")]
    Transport(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML parse error: {0}")]
    TomlDecode(#[from] toml::de::Error),

    /// Invariant violations that indicate a bug in this crate.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// True when the error is actionable by the caller (bad input,
    /// missing file, unset credential) rather than a fault inside the
    /// harness or its storage.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Lexicon(_)
            | Error::Capacity { .. }
            | Error::Validation(_)
            | Error::RowParse { .. }
            | Error::DegenerateInput(_)
            | Error::InsufficientData(_)
            | Error::MissingCredential { .. }
            | Error::RunExists { .. }
            | Error::RunNotFound { .. }
            | Error::MissingArtifact(_)
            | Error::TomlDecode(_) => true,
            Error::OracleIntegrity(_)
            | Error::Corrupt { .. }
            | Error::Transport(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Internal(_) => false,
        }
    }

    /// Process exit code this error maps to: 1 for user errors, 2 for
    /// internal failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_user_error() {
            1
        } else {
            2
        }
    }
}
