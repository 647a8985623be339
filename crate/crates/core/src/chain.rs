//! Per-system ledger: block production, finality, the `verify`/`check`
//! queries, the waiting list with its locks, and view generation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ChainError, ConfigError};
use crate::types::{
    body_digest, hash_bytes, hash_pair, Block, BlockHeader, ContractTx, HashDigest, Height, NodeId, SystemId,
    Transaction, TxKind,
};

/// Parameters of one blockchain system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub id: SystemId,
    /// Node count.
    pub q: u16,
    /// Consensus threshold in nodes.
    pub r: u16,
    /// Finality depth in blocks.
    pub t: u64,
    /// Fraction of nodes held by the adversary.
    #[serde(default)]
    pub f: f64,
    /// View depth in blocks.
    pub k: u64,
}

impl SystemConfig {
    pub fn new(id: SystemId, q: u16, r: u16, t: u64, k: u64) -> Self {
        SystemConfig { id, q, r, t, f: 0.0, k }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.r == 0 || self.r > self.q {
            return Err(ConfigError(alloc::format!("{}: need 1 <= r <= q", self.id)));
        }
        if !(0.0..=1.0).contains(&self.f) {
            return Err(ConfigError(alloc::format!("{}: f must lie in [0, 1]", self.id)));
        }
        if self.k == 0 {
            return Err(ConfigError(alloc::format!("{}: k must be at least 1", self.id)));
        }
        Ok(())
    }

    /// The honest quorum certificate: the first `r` node ids.
    pub fn gen_proof(&self) -> Vec<NodeId> {
        (0..self.r).collect()
    }

    /// A proof is well formed if it names at least `r` distinct nodes of this system.
    pub fn proof_is_valid(&self, proof: &[NodeId]) -> bool {
        proof.len() >= self.r as usize && proof.windows(2).all(|w| w[0] < w[1]) && proof.iter().all(|&n| n < self.q)
    }
}

/// Compact finality summary of one chain.
///
/// `aggregate` folds the header hashes of finalized heights `[0, m - |recent|)`,
/// `recent` holds the raw header hashes of `[m - |recent|, m)` where `m` is the
/// finalized length, and `height = m - 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct View {
    pub aggregate: HashDigest,
    pub recent: Vec<HashDigest>,
    pub proof: Vec<NodeId>,
    pub height: Height,
}

impl View {
    /// Finalized length `m` covered by this view.
    pub fn covered_len(&self) -> u64 {
        self.height + 1
    }

    /// Number of headers folded into `aggregate`.
    pub fn folded_len(&self) -> u64 {
        self.covered_len() - self.recent.len() as u64
    }

    /// Well-formedness for a system with view depth `k`.
    pub fn is_well_formed(&self, k: u64) -> bool {
        self.recent.len() as u64 == k.min(self.covered_len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 32 * (1 + self.recent.len()) + 4 + 2 * self.proof.len());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.aggregate.0);
        out.extend_from_slice(&(self.recent.len() as u16).to_be_bytes());
        for h in &self.recent {
            out.extend_from_slice(&h.0);
        }
        out.extend_from_slice(&(self.proof.len() as u16).to_be_bytes());
        for p in &self.proof {
            out.extend_from_slice(&p.to_be_bytes());
        }
        out
    }

    pub fn digest(&self) -> HashDigest {
        hash_bytes(&self.encode())
    }
}

/// Seed of the rolling aggregate.
pub const AGGREGATE_SEED: HashDigest = HashDigest::ZERO;

/// Reference view generation: folds every finalized header from scratch.
///
/// [`Chain::view`] returns the same value from an incrementally maintained
/// prefix table.
pub fn generate_view(chain: &Chain, k: u64, config: &SystemConfig) -> Result<View, ChainError> {
    let m = chain.finalized_len();
    if m == 0 {
        return Err(ChainError::EmptyChain);
    }
    let split = m.saturating_sub(k);
    let mut aggregate = AGGREGATE_SEED;
    for block in &chain.blocks()[..split as usize] {
        aggregate = hash_pair(&aggregate, &block.header.hash());
    }
    let recent = chain.blocks()[split as usize..m as usize].iter().map(|b| b.header.hash()).collect();
    Ok(View { aggregate, recent, proof: config.gen_proof(), height: m - 1 })
}

/// A hash-linked ledger plus the waiting list of committed contracts.
#[derive(Clone, Debug)]
pub struct Chain {
    config: SystemConfig,
    blocks: Vec<Block>,
    header_hashes: Vec<HashDigest>,
    // prefix_aggregates[i] folds header_hashes[..i]
    prefix_aggregates: Vec<HashDigest>,
    tx_index: BTreeMap<HashDigest, Height>,
    waiting_list: BTreeMap<HashDigest, ContractTx>,
    locked: BTreeSet<HashDigest>,
}

impl Chain {
    /// A chain holding only its genesis block (all-zero `prev_hash`, empty body).
    pub fn new(config: SystemConfig) -> Self {
        let mut chain = Chain {
            config,
            blocks: Vec::new(),
            header_hashes: Vec::new(),
            prefix_aggregates: alloc::vec![AGGREGATE_SEED],
            tx_index: BTreeMap::new(),
            waiting_list: BTreeMap::new(),
            locked: BTreeSet::new(),
        };
        chain.append(Vec::new(), None);
        chain
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn id(&self) -> SystemId {
        self.config.id
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn header_hash(&self, height: Height) -> Option<HashDigest> {
        self.header_hashes.get(height as usize).copied()
    }

    /// Header hashes for heights `[from, to)`, clamped to the chain.
    pub fn header_hashes(&self, from: Height, to: Height) -> &[HashDigest] {
        let to = (to as usize).min(self.header_hashes.len());
        let from = (from as usize).min(to);
        &self.header_hashes[from..to]
    }

    /// The height the next block will take (the number of blocks so far).
    pub fn height(&self) -> Height {
        self.blocks.len() as Height
    }

    pub fn tip(&self) -> Height {
        self.height() - 1
    }

    /// Number of blocks that have more than `t` successors.
    pub fn finalized_len(&self) -> u64 {
        self.height().saturating_sub(self.config.t + 1)
    }

    /// Height of the newest finalized block, if any.
    pub fn finalized_height(&self) -> Option<Height> {
        self.finalized_len().checked_sub(1)
    }

    pub fn waiting_list(&self) -> &BTreeMap<HashDigest, ContractTx> {
        &self.waiting_list
    }

    pub fn locked(&self) -> &BTreeSet<HashDigest> {
        &self.locked
    }

    pub fn is_committed(&self, id: &HashDigest) -> bool {
        self.tx_index.contains_key(id)
    }

    /// Position of the committed transaction `id`, or `None` (the wire `-1`).
    pub fn check(&self, id: &HashDigest) -> Option<Height> {
        self.tx_index.get(id).copied()
    }

    /// `check` with the `-1` convention for absent transactions.
    pub fn check_signed(&self, id: &HashDigest) -> i64 {
        self.check(id).map_or(-1, |h| h as i64)
    }

    /// Whether `tx` may go into the next block.
    pub fn verify(&self, tx: &Transaction) -> bool {
        self.verify_with(tx, &BTreeSet::new())
    }

    /// `verify` where `pending` lists ids already accepted into the block being formed.
    fn verify_with(&self, tx: &Transaction, pending: &BTreeSet<HashDigest>) -> bool {
        if self.is_committed(&tx.id) || pending.contains(&tx.id) {
            return false;
        }
        for p in &tx.preconditions {
            if !(self.is_committed(p) || pending.contains(p)) || self.locked.contains(p) {
                return false;
            }
        }
        if tx.kind == TxKind::Contract {
            let Some(ctx) = tx.as_contract() else { return false };
            if ctx.local_expiry <= self.height() || self.is_committed(&ctx.local_tx) {
                return false;
            }
        }
        true
    }

    /// `verify(ctx)` as the conjunction of the contract's own checks and `verify(target)`.
    pub fn verify_contract(&self, ctx: &ContractTx, target: &Transaction) -> bool {
        target.id == ctx.local_tx && self.verify(&Transaction::contract(ctx, self.id())) && self.verify(target)
    }

    /// Appends one block holding `txs`. The whole block is rejected if any
    /// transaction fails verification in order.
    pub fn commit(&mut self, txs: Vec<Transaction>) -> Result<&Block, ChainError> {
        let mut pending = BTreeSet::new();
        for (index, tx) in txs.iter().enumerate() {
            if !self.verify_with(tx, &pending) {
                return Err(ChainError::InvalidTx { index, id: tx.id });
            }
            pending.insert(tx.id);
        }
        Ok(self.append(txs, None))
    }

    /// Appends one block with every transaction of `txs` that verifies in
    /// order and hands back the ones that do not.
    pub fn commit_valid(&mut self, txs: Vec<Transaction>) -> (Height, Vec<Transaction>) {
        let mut pending = BTreeSet::new();
        let mut accepted = Vec::with_capacity(txs.len());
        let mut rejected = Vec::new();
        for tx in txs {
            if self.verify_with(&tx, &pending) {
                pending.insert(tx.id);
                accepted.push(tx);
            } else {
                rejected.push(tx);
            }
        }
        let height = self.append(accepted, None).header.height;
        (height, rejected)
    }

    /// Appends a block without verification, signed by `signers` (defaults to the honest quorum).
    pub(crate) fn append(&mut self, txs: Vec<Transaction>, signers: Option<Vec<NodeId>>) -> &Block {
        let height = self.height();
        let prev_hash = self.header_hashes.last().copied().unwrap_or(HashDigest::ZERO);
        let header = BlockHeader {
            height,
            prev_hash,
            body_digest: body_digest(&txs),
            creator_sigs: signers.unwrap_or_else(|| self.config.gen_proof()),
        };
        let hh = header.hash();
        let agg = hash_pair(self.prefix_aggregates.last().expect("seeded"), &hh);
        self.header_hashes.push(hh);
        self.prefix_aggregates.push(agg);
        for tx in &txs {
            self.tx_index.insert(tx.id, height);
            if let Some(ctx) = tx.as_contract() {
                if self.is_committed(&ctx.local_tx) {
                    self.locked.insert(ctx.local_tx);
                }
                self.waiting_list.insert(tx.id, ctx);
            }
        }
        for tx in &txs {
            if self.waiting_list.values().any(|c| c.local_tx == tx.id) {
                self.locked.insert(tx.id);
            }
        }
        self.blocks.push(Block { header, body: txs });
        self.blocks.last().expect("just pushed")
    }

    /// Contracts in the waiting list whose local expiry lies below `current_height`.
    /// They stay listed until the timeout step removes them.
    pub fn expire_and_unlock(&self, current_height: Height) -> Vec<ContractTx> {
        self.waiting_list.values().filter(|c| c.local_expiry < current_height).copied().collect()
    }

    /// Drops a contract from the waiting list and releases its target's lock
    /// unless another waiting contract still references it.
    pub fn remove_waiting(&mut self, ctx_id: &HashDigest) -> Option<ContractTx> {
        let ctx = self.waiting_list.remove(ctx_id)?;
        if !self.waiting_list.values().any(|c| c.local_tx == ctx.local_tx) {
            self.locked.remove(&ctx.local_tx);
        }
        Some(ctx)
    }

    /// The current view, served from the prefix table.
    pub fn view(&self) -> Result<View, ChainError> {
        self.view_at(self.finalized_len())
    }

    /// View of the finalized prefix of length `m`.
    pub fn view_at(&self, m: u64) -> Result<View, ChainError> {
        if m == 0 || m > self.finalized_len() {
            return Err(ChainError::EmptyChain);
        }
        let split = m.saturating_sub(self.config.k) as usize;
        Ok(View {
            aggregate: self.prefix_aggregates[split],
            recent: self.header_hashes[split..m as usize].to_vec(),
            proof: self.config.gen_proof(),
            height: m - 1,
        })
    }

    /// Rebuilds the chain from its first `len` blocks.
    pub(crate) fn truncated(&self, len: usize) -> Chain {
        let mut out = Chain::new(self.config.clone());
        for b in &self.blocks[1..len] {
            out.append(b.body.clone(), Some(b.header.creator_sigs.clone()));
        }
        out
    }

    pub fn snapshot(&self) -> ChainSnapshot {
        ChainSnapshot {
            system: self.id(),
            height: self.height(),
            finalized_len: self.finalized_len(),
            transactions: self.tx_index.iter().map(|(id, h)| (*id, *h)).collect(),
            waiting_list: self.waiting_list.keys().copied().collect(),
            locked: self.locked.iter().copied().collect(),
        }
    }
}

/// Debug dump of a chain, stable for golden comparisons.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSnapshot {
    pub system: SystemId,
    pub height: Height,
    pub finalized_len: u64,
    pub transactions: Vec<(HashDigest, Height)>,
    pub waiting_list: Vec<HashDigest>,
    pub locked: Vec<HashDigest>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cfg(t: u64, k: u64) -> SystemConfig {
        SystemConfig::new(SystemId(0), 4, 3, t, k)
    }

    fn local(n: u32) -> Transaction {
        Transaction::local(n.to_be_bytes().to_vec(), vec![], SystemId(0))
    }

    fn chain_with(blocks: usize, t: u64, k: u64) -> Chain {
        let mut c = Chain::new(cfg(t, k));
        for i in 0..blocks {
            c.commit(vec![local(i as u32)]).unwrap();
        }
        c
    }

    fn ctx_for(target: &Transaction, expiry: Height) -> ContractTx {
        let reverse = Transaction::reverse_of(target);
        ContractTx {
            local_tx: target.id,
            local_reverse: reverse.id,
            local_expiry: expiry,
            peer: SystemId(1),
            remote_tx: hash_bytes(b"remote"),
            remote_reverse: hash_bytes(b"remote'"),
            remote_expiry: expiry,
        }
    }

    #[test]
    fn genesis_links_to_zero() {
        let c = Chain::new(cfg(0, 3));
        assert_eq!(c.blocks()[0].header.prev_hash, HashDigest::ZERO);
        assert_eq!(c.height(), 1);
        assert_eq!(c.finalized_len(), 0);
        assert_eq!(c.view(), Err(ChainError::EmptyChain));
        assert_eq!(generate_view(&c, 3, c.config()), Err(ChainError::EmptyChain));
    }

    #[test]
    fn hash_chain_is_linked() {
        let c = chain_with(50, 0, 4);
        for h in 1..c.blocks().len() {
            assert_eq!(c.blocks()[h].header.prev_hash, c.blocks()[h - 1].header.hash());
            assert_eq!(c.blocks()[h].header.body_digest, body_digest(&c.blocks()[h].body));
        }
    }

    #[test]
    fn view_with_exactly_k_blocks_has_seed_aggregate() {
        // t = 0: m = height - 1, so 4 blocks appended on top of genesis give m = 4
        let c = chain_with(4, 0, 4);
        let v = generate_view(&c, 4, c.config()).unwrap();
        assert_eq!(c.finalized_len(), 4);
        assert_eq!(v.aggregate, AGGREGATE_SEED);
        let expected: Vec<_> = c.blocks()[..4].iter().map(|b| b.header.hash()).collect();
        assert_eq!(v.recent, expected);
        assert_eq!(v.height, 3);
        assert_eq!(v.proof.len(), 3);
    }

    #[test]
    fn view_with_k_plus_one_blocks_folds_genesis() {
        let c = chain_with(5, 0, 4);
        let v = generate_view(&c, 4, c.config()).unwrap();
        let h0 = hash_bytes(&c.blocks()[0].header.encode());
        let mut buf = vec![0u8; 32];
        buf.extend_from_slice(&h0.0);
        assert_eq!(v.aggregate, hash_bytes(&buf));
        let expected: Vec<_> = c.blocks()[1..5].iter().map(|b| b.header.hash()).collect();
        assert_eq!(v.recent, expected);
    }

    #[test]
    fn extending_by_one_shifts_the_fold() {
        let mut c = chain_with(12, 0, 4);
        let before = generate_view(&c, 4, c.config()).unwrap();
        c.commit(vec![]).unwrap();
        let after = generate_view(&c, 4, c.config()).unwrap();
        assert_eq!(after.aggregate, hash_pair(&before.aggregate, &before.recent[0]));
        assert_eq!(&after.recent[..3], &before.recent[1..]);
    }

    #[test]
    fn finality_depth_hides_the_tip() {
        let c = chain_with(10, 3, 4);
        // 11 blocks, t = 3: blocks 0..=6 have more than 3 successors
        assert_eq!(c.finalized_len(), 7);
        assert_eq!(c.view().unwrap().height, 6);
    }

    #[test]
    fn verify_and_check_basics() {
        let mut c = Chain::new(cfg(0, 3));
        let tx = local(1);
        assert!(c.verify(&tx));
        assert_eq!(c.check_signed(&tx.id), -1);
        c.commit(vec![tx.clone()]).unwrap();
        assert!(!c.verify(&tx));
        assert_eq!(c.check(&tx.id), Some(1));
        assert!(matches!(c.commit(vec![tx.clone()]), Err(ChainError::InvalidTx { index: 0, .. })));
    }

    #[test]
    fn empty_commit_advances_height() {
        let mut c = Chain::new(cfg(0, 3));
        c.commit(vec![]).unwrap();
        assert_eq!(c.height(), 2);
    }

    #[test]
    fn missing_precondition_fails() {
        let c = Chain::new(cfg(0, 3));
        let tx = Transaction::local(vec![1], vec![hash_bytes(b"nope")], SystemId(0));
        assert!(!c.verify(&tx));
    }

    #[test]
    fn committed_ctx_enters_waiting_list_and_locks_target() {
        let mut c = Chain::new(cfg(0, 3));
        let target = Transaction::target(b"pay".to_vec(), vec![], SystemId(0));
        let ctx = ctx_for(&target, 20);
        let ctx_tx = Transaction::contract(&ctx, SystemId(0));
        assert!(c.verify_contract(&ctx, &target));
        c.commit(vec![ctx_tx.clone()]).unwrap();
        assert!(c.waiting_list().contains_key(&ctx_tx.id));
        c.commit(vec![target.clone()]).unwrap();
        assert!(c.locked().contains(&target.id));
        let consumer = Transaction::local(b"spend".to_vec(), vec![target.id], SystemId(0));
        assert!(!c.verify(&consumer));
        assert!(!c.verify(&Transaction::reverse_of(&target)));
        c.remove_waiting(&ctx_tx.id).unwrap();
        assert!(c.verify(&consumer));
    }

    #[test]
    fn expired_contract_fails_verify() {
        let c = chain_with(5, 0, 3);
        let target = Transaction::target(b"pay".to_vec(), vec![], SystemId(0));
        assert!(!c.verify_contract(&ctx_for(&target, 6), &target));
        assert!(c.verify_contract(&ctx_for(&target, 7), &target));
    }

    #[test]
    fn expire_boundaries() {
        let mut c = Chain::new(cfg(0, 3));
        assert!(c.expire_and_unlock(100).is_empty());
        let target = Transaction::target(b"pay".to_vec(), vec![], SystemId(0));
        let ctx = ctx_for(&target, 10);
        c.commit(vec![Transaction::contract(&ctx, SystemId(0))]).unwrap();
        assert_eq!(c.expire_and_unlock(11), vec![ctx]);
        assert!(c.expire_and_unlock(10).is_empty());
        assert_eq!(c.waiting_list().len(), 1);
    }

    #[test]
    fn check_matches_linear_rescan_over_long_run() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut c = Chain::new(cfg(0, 5));
        let mut n = 0u32;
        for _ in 0..1000 {
            let count = rng.random_range(0..4);
            let txs = (0..count)
                .map(|_| {
                    n += 1;
                    local(n)
                })
                .collect();
            c.commit(txs).unwrap();
        }
        for (height, block) in c.blocks().iter().enumerate() {
            for tx in &block.body {
                assert_eq!(c.check(&tx.id), Some(height as u64));
            }
        }
        assert_eq!(c.check(&hash_bytes(b"absent")), None);
    }

    #[test]
    fn truncation_replays_state() {
        let c = chain_with(10, 0, 3);
        let short = c.truncated(6);
        assert_eq!(short.height(), 6);
        assert_eq!(short.header_hash(5), c.header_hash(5));
    }

    proptest! {
        #[test]
        fn incremental_view_matches_full_fold(blocks in 1usize..40, k in 1u64..8, t in 0u64..3) {
            let c = chain_with(blocks, t, k);
            match generate_view(&c, k, c.config()) {
                Ok(v) => {
                    prop_assert!(v.is_well_formed(k));
                    prop_assert_eq!(c.view().unwrap(), v);
                }
                Err(e) => prop_assert_eq!(c.view().unwrap_err(), e),
            }
        }

        #[test]
        fn verify_true_implies_unchecked(ops in proptest::collection::vec((0u32..30, 0usize..3), 1..60)) {
            let mut c = Chain::new(cfg(0, 3));
            let mut committed: Vec<HashDigest> = vec![];
            for (seed, deps) in ops {
                let pre: Vec<_> = committed.iter().rev().take(deps).copied().collect();
                let tx = Transaction::local(seed.to_be_bytes().to_vec(), pre, SystemId(0));
                if c.verify(&tx) {
                    prop_assert_eq!(c.check_signed(&tx.id), -1);
                    c.commit(vec![tx.clone()]).unwrap();
                    committed.push(tx.id);
                } else {
                    prop_assert!(c.commit(vec![tx]).is_err());
                }
            }
        }

        #[test]
        fn replicas_produce_identical_views(blocks in 1usize..30) {
            let a = chain_with(blocks, 0, 4);
            let b = chain_with(blocks, 0, 4);
            prop_assert_eq!(a.view().ok(), b.view().ok());
        }
    }
}
