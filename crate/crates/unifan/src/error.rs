use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the process exit codes used by
/// the CLI: `Config` -> 2, `Parse`/`Format`/`Io` -> 3, `NonFinite` -> 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent settings.
    #[error("config error: {0}")]
    Config(String),

    /// Operands with incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Text input that does not follow the expected format.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Binary input with a bad magic, version, or size.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A NaN or infinity reached a parameter or loss value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
