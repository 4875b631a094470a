use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid mask: row {row} has no unmasked entry")]
    InvalidMask { row: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
