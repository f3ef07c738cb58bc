use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty attention row: query {0} attends to no key")]
    EmptyAttentionRow(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("enumeration budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, Error>;
