use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SlimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SlimError {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: non-finite or invalid numeric value ({detail})")]
    Numeric { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range [0, {limit}) at node {node}")]
    Range {
        node: usize,
        label: usize,
        limit: usize,
    },

    #[error("not found: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch} (graph {graph}): {detail}")]
    Divergence {
        epoch: usize,
        graph: usize,
        detail: String,
    },

    #[error("model file: {0}")]
    Model(String),
}

impl SlimError {
    pub(crate) fn shape(
        op: &'static str,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        SlimError::Shape {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SlimError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem or by malformed input files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            SlimError::MissingFile { .. }
                | SlimError::Parse { .. }
                | SlimError::Io { .. }
                | SlimError::Model(_)
        )
    }
}
