use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("degenerate convolution output: input {input:?}, filter {filter:?}, stride {stride:?}")]
    DegenerateOutput {
        input: [usize; 4],
        filter: [usize; 4],
        stride: [usize; 2],
    },

    #[error("illegal fold: {0}")]
    IllegalFold(String),

    #[error("filter is not block diagonal: entry {index:?} = {value:e} lies outside the diagonal blocks")]
    NotBlockDiagonal { index: [usize; 4], value: f32 },

    #[error("malformed manifest: {0}")]
    ManifestParse(String),

    #[error("blob {file} holds {actual} bytes but tensor '{name}' needs bytes {start}..{end}")]
    BlobSizeMismatch {
        name: String,
        file: PathBuf,
        start: u64,
        end: u64,
        actual: u64,
    },

    #[error("graph: {0}")]
    GraphFormat(String),

    #[error("shape inference failed at node '{node}': {reason}")]
    ShapeInference { node: String, reason: String },

    #[error("dense and grouped lowering of node '{0}' disagree")]
    LoweringMismatch(String),

    #[error("graph input '{0}' is not bound")]
    MissingInput(String),

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape_inference(node: &str, reason: impl Into<String>) -> Self {
        Error::ShapeInference {
            node: node.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
