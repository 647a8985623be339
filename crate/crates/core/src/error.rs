use alloc::string::String;

use thiserror::Error;

use crate::types::{HashDigest, SystemId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("malformed hex digest")]
    BadHex,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("chain has no finalized block")]
    EmptyChain,
    #[error("transaction {id:?} at position {index} fails verification")]
    InvalidTx { index: usize, id: HashDigest },
    #[error("fork height {fork_height} is beyond the chain tip {tip}")]
    ForkBeyondTip { fork_height: u64, tip: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GossipError {
    #[error("view of {0} carries an invalid proof")]
    InvalidProof(SystemId),
    #[error("evidence against {accused} from {reporter} does not show a conflict")]
    BogusEvidence { accused: SystemId, reporter: SystemId },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("invalid channel parameters: {0}")]
    InvalidParams(&'static str),
    #[error("request timed out")]
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);
