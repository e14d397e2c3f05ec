use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration for `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic bytes, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u16, expected: u16 },

    #[error("{path}: truncated payload, expected {expected} bytes after header but found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },

    #[error("unknown label code {0}")]
    UnknownLabelCode(i8),

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite input reaching {0}")]
    NonFiniteInput(String),

    #[error("backward called on `{0}` without a cached forward pass")]
    MissingForwardCache(String),

    #[error("non-finite gradient in parameter `{0}`; optimizer step aborted")]
    NonFiniteGradient(String),

    #[error("optimizer step targets frozen parameter `{0}`")]
    FrozenParameter(String),

    #[error("frozen module for task {task} changed after freezing")]
    IsolationViolated { task: usize },

    #[error("invalid adapter: {0}")]
    Adapter(String),

    #[error("masked loss has no valid label entries")]
    EmptyMask,

    #[error("orthogonality penalty needs at least two rows, got {0}")]
    TooFewRows(usize),

    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),

    #[error("task label {label} out of range for {num_tasks} tasks")]
    TaskOutOfRange { label: usize, num_tasks: usize },

    #[error("selector can only grow by one task at a time: {current} -> {requested}")]
    NonIncrementalExpansion { current: usize, requested: usize },

    #[error("routing requires at least one trained task")]
    NoTasks,

    #[error("selector covers {selector_tasks} tasks but {modules} task modules exist")]
    SelectorUntrained { selector_tasks: usize, modules: usize },

    #[error("memory routing impossible: every prototype is zero")]
    AllPrototypesZero,

    #[error("no class has both positive and negative labels")]
    NoScorableClass,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite loss at task {task}, epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss {
        task: usize,
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("checkpoint {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
