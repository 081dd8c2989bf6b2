use thiserror::Error;

/// Errors raised by the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("index ({row}, {col}) out of range for a {ny}x{nx} grid")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        nx: usize,
        ny: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("matrix is not positive definite (failing pivot at index {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix is not symmetric (relative discrepancy {discrepancy:.3e})")]
    Asymmetric { discrepancy: f64 },
    #[error("matrix is not lower triangular")]
    NotTriangular,
    #[error("assembled precision is not positive definite in time block {block} (pivot {pivot})")]
    IndefiniteBlock { block: usize, pivot: usize },
    #[error("solver diverged: {0}")]
    Divergence(String),
    #[error("size mismatch: header announces {expected} values, payload holds {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures of the numerical machinery (definiteness, divergence).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::Asymmetric { .. }
                | Error::IndefiniteBlock { .. }
                | Error::Divergence(_)
        )
    }

    /// True for file-system and file-format failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Format(_) | Error::SizeMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
