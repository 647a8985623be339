//! Atomic cross-chain tasks between independent blockchain systems.
//!
//! The crate is `no_std` (with `alloc`). File formats, the command line and
//! parallel sweeps live in the `cbc-cli` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adversary;
pub mod cbc;
pub mod chain;
pub mod channel;
pub mod error;
pub mod gossip;
pub mod sim;
pub mod types;

pub use cbc::{CbcSession, Phase, SideOutcome};
pub use chain::{Chain, SystemConfig, View};
pub use error::{ChainError, ChannelError, ConfigError, DecodeError, GossipError};
pub use types::{ContractTx, HashDigest, Height, NodeId, SystemId, Transaction};
