use thiserror::Error;

use crate::types::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse price {input:?}: {reason}")]
pub struct PriceParseError {
    pub input: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input at byte {0}")]
    Truncated(usize),
    #[error("unknown tag {tag:#04x} for {what}")]
    UnknownTag { what: &'static str, tag: u8 },
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("list length {0} exceeds remaining input")]
    BadLength(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("no key registered for node {0}")]
    UnknownNode(NodeId),
    #[error("insufficient quorum: {have} distinct valid votes, need {need}")]
    InsufficientQuorum { have: usize, need: usize },
    #[error("votes do not share a single digest/round/variable")]
    MixedVotes,
}

/// Invalid scenario, population or calculator parameters.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no observations")]
pub struct NoData;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("missing or malformed header, expected `source,timestamp_ms,price`")]
    Header,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
