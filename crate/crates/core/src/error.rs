use alloc::string::String;

/// Failure modes shared by every core operation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{what} index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("enumeration of {size} outcomes exceeds the limit of {limit}")]
    Capacity { size: u128, limit: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("non-finite parameters after iteration {iteration}")]
    NonFinite { iteration: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
