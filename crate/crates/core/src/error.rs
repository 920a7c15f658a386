use std::path::PathBuf;

use crate::heads::HeadId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid head mask line {line}: {reason}")]
    MaskParse { line: usize, reason: String },

    #[error("head {head} is not part of the model ({reason})")]
    InvalidHead { head: HeadId, reason: String },

    #[error("empty attention matrix")]
    EmptyMatrix,

    #[error("no usable attention matrices for head {0}")]
    NoUsableMatrices(HeadId),

    #[error("cannot normalize fewer than two heads")]
    TooFewHeads,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("reference sets differ between the two BLEU scores")]
    ReferenceMismatch,

    #[error("ranking is not a permutation of the head universe: {0}")]
    IncompleteRanking(String),

    #[error("curves are sampled on different k grids")]
    GridMismatch,

    #[error("rank-deficient least-squares system for degree {degree}; try a lower degree")]
    RankDeficient { degree: usize },

    #[error("value {x} outside fitted range [{lo}, {hi}]")]
    OutOfRange { x: f64, lo: f64, hi: f64 },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("sentence {sid}: {reason}")]
    Sentence { sid: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
