use thiserror::Error;

/// Errors produced by the tensor-network library.
#[derive(Debug, Error)]
pub enum Error {
    /// A label, node, edge or leg is missing, duplicated or misplaced.
    #[error("structural error: {0}")]
    Structure(String),
    /// Two axes that must agree in extent do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A numeric value fell outside its admissible range.
    #[error("value out of range: {0}")]
    Range(String),
    /// A copy-node plan selected nodes it may not replace.
    #[error("invalid copy-node selection: {0}")]
    InvalidSelection(String),
    /// A file did not match its expected binary or text layout.
    #[error("format error: {0}")]
    Format(String),
    /// A configuration key or value could not be used.
    #[error("configuration error: {0}")]
    Config(String),
    /// Training produced non-finite or collapsed values.
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
