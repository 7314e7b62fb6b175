use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("rank {rank} is invalid for a {rows}x{cols} matrix")]
    Rank { rank: usize, rows: usize, cols: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    Length { len: usize, max: usize },

    #[error("loss mask selects no positions")]
    DegenerateTarget,

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("incompatible archive: model fingerprint {expected}, archive fingerprint {found}")]
    Compatibility { expected: String, found: String },

    #[error("chunk plan error: {0}")]
    Plan(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (layer {layer}, max |S| entry {max_state_entry:e})")]
    NonFiniteLoss {
        step: usize,
        layer: usize,
        max_state_entry: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }
}
