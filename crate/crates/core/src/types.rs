//! Shared domain types: identifiers, digests, transactions, contract
//! transactions and block headers, together with their fixed byte layouts.
//!
//! All integers inside encodings are big-endian. Heights are `u64`,
//! system identifiers and node identifiers are `u16`.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::DecodeError;

/// Block position inside one chain. Genesis sits at height 0.
pub type Height = u64;

/// Identifier of one node inside a system. Proofs are sets of these.
pub type NodeId = u16;

/// Identifier of a blockchain system inside the network, `0 <= id < n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SystemId(pub u16);

impl SystemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// 256-bit opaque digest. Serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct HashDigest(pub [u8; 32]);

impl HashDigest {
    pub const ZERO: HashDigest = HashDigest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> alloc::string::String {
        let mut s = alloc::string::String::with_capacity(64);
        for b in self.0 {
            let _ = fmt::Write::write_fmt(&mut s, format_args!("{b:02x}"));
        }
        s
    }

    pub fn from_hex(s: &str) -> Result<Self, DecodeError> {
        let bytes = s.as_bytes();
        if bytes.len() != 64 {
            return Err(DecodeError::BadHex);
        }
        let mut out = [0u8; 32];
        for (i, pair) in bytes.chunks(2).enumerate() {
            let hi = hex_val(pair[0]).ok_or(DecodeError::BadHex)?;
            let lo = hex_val(pair[1]).ok_or(DecodeError::BadHex)?;
            out[i] = (hi << 4) | lo;
        }
        Ok(HashDigest(out))
    }
}

fn hex_val(c: u8) -> Option<u8> {
    match c {
        b'0'..=b'9' => Some(c - b'0'),
        b'a'..=b'f' => Some(c - b'a' + 10),
        b'A'..=b'F' => Some(c - b'A' + 10),
        _ => None,
    }
}

impl fmt::Debug for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.to_hex();
        write!(f, "#{}", &h[..12])
    }
}

impl fmt::Display for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for HashDigest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for HashDigest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <alloc::borrow::Cow<'de, str>>::deserialize(d)?;
        HashDigest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 of `data`.
pub fn hash_bytes(data: &[u8]) -> HashDigest {
    HashDigest(Sha256::digest(data).into())
}

/// `H(left || right)`, the step of every rolling fold in this crate.
pub fn hash_pair(left: &HashDigest, right: &HashDigest) -> HashDigest {
    let mut h = Sha256::new();
    h.update(left.0);
    h.update(right.0);
    HashDigest(h.finalize().into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxKind {
    Local,
    Contract,
    Target,
    Reverse,
}

impl TxKind {
    fn tag(self) -> u8 {
        match self {
            TxKind::Local => 0,
            TxKind::Contract => 1,
            TxKind::Target => 2,
            TxKind::Reverse => 3,
        }
    }
}

/// A transaction. `id` is the content hash and is recomputed by [`Transaction::new`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: HashDigest,
    pub kind: TxKind,
    pub payload: Vec<u8>,
    pub preconditions: Vec<HashDigest>,
    pub origin: SystemId,
}

impl Transaction {
    pub fn new(kind: TxKind, payload: Vec<u8>, preconditions: Vec<HashDigest>, origin: SystemId) -> Self {
        let id = Self::content_id(kind, &payload, &preconditions, origin);
        Transaction { id, kind, payload, preconditions, origin }
    }

    pub fn local(payload: Vec<u8>, preconditions: Vec<HashDigest>, origin: SystemId) -> Self {
        Self::new(TxKind::Local, payload, preconditions, origin)
    }

    pub fn target(payload: Vec<u8>, preconditions: Vec<HashDigest>, origin: SystemId) -> Self {
        Self::new(TxKind::Target, payload, preconditions, origin)
    }

    /// The compensating transaction of `target`; its only precondition is the target itself.
    pub fn reverse_of(target: &Transaction) -> Self {
        let mut payload = Vec::with_capacity(target.payload.len() + 1);
        payload.push(b'~');
        payload.extend_from_slice(&target.payload);
        Self::new(TxKind::Reverse, payload, alloc::vec![target.id], target.origin)
    }

    /// The on-chain form of a contract transaction. Carries no preconditions so
    /// that a peer can recompute its id from the counterpart contract alone.
    pub fn contract(ctx: &ContractTx, origin: SystemId) -> Self {
        Self::new(TxKind::Contract, ctx.encode(), Vec::new(), origin)
    }

    /// Decodes the contract carried by a `Contract` transaction.
    pub fn as_contract(&self) -> Option<ContractTx> {
        if self.kind != TxKind::Contract {
            return None;
        }
        ContractTx::decode(&self.payload).ok()
    }

    pub fn content_id(kind: TxKind, payload: &[u8], preconditions: &[HashDigest], origin: SystemId) -> HashDigest {
        let mut h = Sha256::new();
        h.update([kind.tag()]);
        h.update((payload.len() as u32).to_be_bytes());
        h.update(payload);
        h.update((preconditions.len() as u32).to_be_bytes());
        for p in preconditions {
            h.update(p.0);
        }
        h.update(origin.0.to_be_bytes());
        HashDigest(h.finalize().into())
    }

    pub fn id_is_consistent(&self) -> bool {
        self.id == Self::content_id(self.kind, &self.payload, &self.preconditions, self.origin)
    }
}

/// Seven-field cross-chain contract as seen from the local system.
///
/// Byte layout (146 bytes):
///
/// ```text
/// local_tx(32) | local_reverse(32) | local_expiry(u64) | peer(u16)
///   | remote_tx(32) | remote_reverse(32) | remote_expiry(u64)
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContractTx {
    pub local_tx: HashDigest,
    pub local_reverse: HashDigest,
    pub local_expiry: Height,
    pub peer: SystemId,
    pub remote_tx: HashDigest,
    pub remote_reverse: HashDigest,
    pub remote_expiry: Height,
}

impl ContractTx {
    pub const ENCODED_LEN: usize = 32 + 32 + 8 + 2 + 32 + 32 + 8;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.extend_from_slice(&self.local_tx.0);
        out.extend_from_slice(&self.local_reverse.0);
        out.extend_from_slice(&self.local_expiry.to_be_bytes());
        out.extend_from_slice(&self.peer.0.to_be_bytes());
        out.extend_from_slice(&self.remote_tx.0);
        out.extend_from_slice(&self.remote_reverse.0);
        out.extend_from_slice(&self.remote_expiry.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(DecodeError::Length { expected: Self::ENCODED_LEN, actual: bytes.len() });
        }
        let mut r = Reader(bytes);
        Ok(ContractTx {
            local_tx: r.digest(),
            local_reverse: r.digest(),
            local_expiry: r.u64(),
            peer: SystemId(r.u16()),
            remote_tx: r.digest(),
            remote_reverse: r.digest(),
            remote_expiry: r.u64(),
        })
    }

    /// The symmetric contract held by `peer`, given that `this_system` holds `self`.
    pub fn swapped(&self, this_system: SystemId) -> ContractTx {
        ContractTx {
            local_tx: self.remote_tx,
            local_reverse: self.remote_reverse,
            local_expiry: self.remote_expiry,
            peer: this_system,
            remote_tx: self.local_tx,
            remote_reverse: self.local_reverse,
            remote_expiry: self.local_expiry,
        }
    }
}

/// Byte-level perspective swap of an encoded contract: produces the encoding
/// of the counterpart contract held by the peer.
pub fn swap_perspective(encoded: &[u8], this_system: SystemId) -> Result<Vec<u8>, DecodeError> {
    if encoded.len() != ContractTx::ENCODED_LEN {
        return Err(DecodeError::Length { expected: ContractTx::ENCODED_LEN, actual: encoded.len() });
    }
    let local = &encoded[0..72];
    let remote = &encoded[74..146];
    let mut out = Vec::with_capacity(ContractTx::ENCODED_LEN);
    out.extend_from_slice(remote);
    out.extend_from_slice(&this_system.0.to_be_bytes());
    out.extend_from_slice(local);
    Ok(out)
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.0[..N]);
        self.0 = &self.0[N..];
        out
    }
    fn digest(&mut self) -> HashDigest {
        HashDigest(self.take::<32>())
    }
    fn u64(&mut self) -> u64 {
        u64::from_be_bytes(self.take::<8>())
    }
    fn u16(&mut self) -> u16 {
        u16::from_be_bytes(self.take::<2>())
    }
}

/// Block header. Byte layout:
///
/// ```text
/// height(u64) | prev_hash(32) | body_digest(32) | sig_count(u16) | sig(u16)*
/// ```
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: Height,
    pub prev_hash: HashDigest,
    pub body_digest: HashDigest,
    /// Node identifiers standing in for the creators' signatures, sorted.
    pub creator_sigs: Vec<NodeId>,
}

impl BlockHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 64 + 2 + 2 * self.creator_sigs.len());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.prev_hash.0);
        out.extend_from_slice(&self.body_digest.0);
        out.extend_from_slice(&(self.creator_sigs.len() as u16).to_be_bytes());
        for s in &self.creator_sigs {
            out.extend_from_slice(&s.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < 74 {
            return Err(DecodeError::Length { expected: 74, actual: bytes.len() });
        }
        let mut r = Reader(bytes);
        let height = r.u64();
        let prev_hash = r.digest();
        let body_digest = r.digest();
        let count = r.u16() as usize;
        let expected = 74 + 2 * count;
        if bytes.len() != expected {
            return Err(DecodeError::Length { expected, actual: bytes.len() });
        }
        let creator_sigs = (0..count).map(|_| r.u16()).collect();
        Ok(BlockHeader { height, prev_hash, body_digest, creator_sigs })
    }

    pub fn hash(&self) -> HashDigest {
        hash_bytes(&self.encode())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub body: Vec<Transaction>,
}

/// Hash of the concatenated transaction ids, in block order.
pub fn body_digest(body: &[Transaction]) -> HashDigest {
    let mut h = Sha256::new();
    for tx in body {
        h.update(tx.id.0);
    }
    HashDigest(h.finalize().into())
}
