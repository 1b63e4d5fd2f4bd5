use std::io;

use thiserror::Error;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record '{id}': {msg}")]
    Parse { line: usize, id: String, msg: String },

    #[error("record '{record}': bond index out of range ({index} >= {atoms} atoms)")]
    BondIndex { record: String, index: usize, atoms: usize },

    #[error("record '{record}': {msg}")]
    InvalidRecord { record: String, msg: String },

    #[error("ambiguous chronology: {dated} of {total} records carry a registration date")]
    AmbiguousChronology { dated: usize, total: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("missing input for node {0}")]
    MissingInput(usize),

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("graph is not a DAG: {0}")]
    Cycle(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("no supervision in batch")]
    NoSupervision,

    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("feature width mismatch: model expects {expected}, input has {found}")]
    WidthMismatch { expected: usize, found: usize },

    #[error("fingerprint width mismatch: {0} vs {1}")]
    FingerprintWidth(usize, usize),

    #[error("{0}")]
    EmptyInput(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("failed to load member checkpoint '{path}': {msg}")]
    MemberLoad { path: String, msg: String },

    #[error("io: {0}")]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Divergence { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape { op, left: left.to_vec(), right: right.to_vec() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Opens `path`, naming it in the error.
pub(crate) fn open_file(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
