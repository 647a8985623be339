//! Cross Blockchain Contract sessions.
//!
//! A session walks one side of a two-system task through three commits:
//! the contract, then the locked target once the peer's contract is visible,
//! then (at timeout) either nothing or the reverse transaction.
//!
//! Sessions never write blocks themselves. Each step returns the transaction
//! to place in the next block and the caller commits it, so several sessions
//! can share one block.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::chain::{Chain, View};
use crate::channel::PeerQuery;
use crate::error::ChannelError;
use crate::gossip::ViewList;
use crate::types::{ContractTx, HashDigest, Height, SystemId, Transaction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Init,
    CtxCommitted,
    TxCommitted,
    AwaitExpiry,
    Finalized,
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Finalized | Phase::Aborted)
    }

    fn may_advance_to(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Init, CtxCommitted)
                | (Init, Aborted)
                | (CtxCommitted, TxCommitted)
                | (CtxCommitted, AwaitExpiry)
                | (CtxCommitted, Aborted)
                | (TxCommitted, AwaitExpiry)
                | (TxCommitted, Finalized)
                | (AwaitExpiry, Finalized)
        )
    }
}

/// How one side ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SideOutcome {
    /// The contract never made it on chain.
    Aborted,
    /// The contract expired without the target being committed.
    NothingCommitted,
    /// The target stands.
    Completed,
    /// The target was undone by its reverse.
    Reversed,
}

/// Result of a session step: the new phase and, possibly, a transaction the
/// caller must put into the next local block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    pub phase: Phase,
    pub commit: Option<Transaction>,
}

/// The contract the peer holds for the same task.
pub fn derive_counterpart(ctx: &ContractTx, this_system: SystemId) -> ContractTx {
    debug_assert_ne!(ctx.peer, this_system);
    ctx.swapped(this_system)
}

#[derive(Clone, Debug)]
pub struct CbcSession {
    pub task: u64,
    pub me: SystemId,
    pub ctx: ContractTx,
    pub target: Transaction,
    pub reverse: Transaction,
    pub phase: Phase,
    pub poll_interval: u64,
    /// `(check(tx_j), check(tx_j'))` seen at timeout.
    pub peer_check_results: Option<(Option<Height>, Option<Height>)>,
    /// Set when the peer has been proven Byzantine; forces the reverse path.
    pub peer_byzantine: bool,
    pub outcome: Option<SideOutcome>,
}

impl CbcSession {
    pub fn new(task: u64, me: SystemId, ctx: ContractTx, target: Transaction, poll_interval: u64) -> Self {
        let reverse = Transaction::reverse_of(&target);
        debug_assert_eq!(ctx.local_tx, target.id);
        debug_assert_eq!(ctx.local_reverse, reverse.id);
        CbcSession {
            task,
            me,
            ctx,
            target,
            reverse,
            phase: Phase::Init,
            poll_interval: poll_interval.max(1),
            peer_check_results: None,
            peer_byzantine: false,
            outcome: None,
        }
    }

    pub fn peer(&self) -> SystemId {
        self.ctx.peer
    }

    pub fn ctx_tx(&self) -> Transaction {
        Transaction::contract(&self.ctx, self.me)
    }

    /// Id of the peer's contract transaction, the subject of every poll.
    pub fn counterpart_ctx_id(&self) -> HashDigest {
        Transaction::contract(&derive_counterpart(&self.ctx, self.me), self.ctx.peer).id
    }

    pub fn poll_hashes(&self) -> [HashDigest; 1] {
        [self.counterpart_ctx_id()]
    }

    pub fn timeout_hashes(&self) -> [HashDigest; 2] {
        [self.ctx.remote_tx, self.ctx.remote_reverse]
    }

    fn advance(&mut self, next: Phase) -> Phase {
        if self.phase != next {
            debug_assert!(self.phase.may_advance_to(next), "{:?} -> {:?}", self.phase, next);
            self.phase = next;
        }
        next
    }

    fn step(&mut self, next: Phase, commit: Option<Transaction>) -> Step {
        Step { phase: self.advance(next), commit }
    }

    /// Verifies the contract; on success it is handed back for commit.
    pub fn start_session(&mut self, chain: &Chain) -> Step {
        debug_assert_eq!(self.phase, Phase::Init);
        if !chain.verify_contract(&self.ctx, &self.target) {
            self.outcome = Some(SideOutcome::Aborted);
            return self.step(Phase::Aborted, None);
        }
        let tx = self.ctx_tx();
        self.step(Phase::CtxCommitted, Some(tx))
    }

    /// Whether the polling loop has run out of local height.
    pub fn poll_window_closed(&self, chain: &Chain) -> bool {
        chain.height() >= self.ctx.local_expiry
    }

    /// Leaves the polling loop if the local expiry has been reached.
    pub fn on_local_height(&mut self, chain: &Chain) -> Phase {
        if self.phase == Phase::CtxCommitted && self.poll_window_closed(chain) {
            self.advance(Phase::AwaitExpiry);
        }
        self.phase
    }

    /// Acts on the peer's answer to `check(H(ctx_j))`. Height 0 counts as found.
    pub fn on_poll_reply(&mut self, chain: &Chain, found: Option<Height>) -> Step {
        if self.phase != Phase::CtxCommitted {
            return Step { phase: self.phase, commit: None };
        }
        if self.poll_window_closed(chain) {
            return self.step(Phase::AwaitExpiry, None);
        }
        match found {
            None => Step { phase: self.phase, commit: None },
            Some(_) if chain.verify(&self.target) => {
                let tx = self.target.clone();
                self.step(Phase::TxCommitted, Some(tx))
            }
            Some(_) => self.step(Phase::AwaitExpiry, None),
        }
    }

    /// One synchronous iteration of the polling loop.
    pub fn poll_peer(&mut self, chain: &Chain, peer: &mut impl PeerQuery) -> Result<Step, ChannelError> {
        if self.on_local_height(chain) != Phase::CtxCommitted {
            return Ok(Step { phase: self.phase, commit: None });
        }
        let reply = peer.check(&self.poll_hashes())?;
        Ok(self.on_poll_reply(chain, reply.results[0]))
    }

    /// The peer has been caught forking: stop polling and reverse at timeout.
    pub fn mark_peer_byzantine(&mut self) -> Phase {
        self.peer_byzantine = true;
        match self.phase {
            Phase::Init => {
                self.outcome = Some(SideOutcome::Aborted);
                self.advance(Phase::Aborted)
            }
            Phase::CtxCommitted => self.advance(Phase::AwaitExpiry),
            p => p,
        }
    }

    /// The block builder refused a transaction this session handed out.
    pub fn on_rejected(&mut self, tx: &HashDigest) -> Phase {
        if self.phase == Phase::CtxCommitted && *tx == self.ctx_tx().id {
            self.outcome = Some(SideOutcome::Aborted);
            self.advance(Phase::Aborted);
        } else if self.phase == Phase::TxCommitted && *tx == self.target.id {
            self.advance(Phase::AwaitExpiry);
        }
        self.phase
    }

    /// True once the stored view of the peer reaches the remote expiry.
    pub fn await_remote_expiry(&self, view_list: &ViewList) -> bool {
        view_list.get(self.ctx.peer).is_some_and(|v| v.height >= self.ctx.remote_expiry)
    }

    /// Both expiries observed (or the peer is proven faulty): timeout may run.
    pub fn ready_for_timeout(&self, chain: &Chain, view_list: &ViewList) -> bool {
        matches!(self.phase, Phase::TxCommitted | Phase::AwaitExpiry)
            && self.poll_window_closed(chain)
            && (self.peer_byzantine || self.await_remote_expiry(view_list))
    }

    /// A timeout answer only counts if the attached view covers the remote expiry.
    pub fn timeout_reply_is_grounded(&self, view: &View) -> bool {
        view.height >= self.ctx.remote_expiry
    }

    /// Final step. Removes the contract from the waiting list, then commits the
    /// reverse if the target stands but the peer's side is missing, late, or reversed.
    pub fn timeout(&mut self, chain: &mut Chain, hc: Option<Height>, hc2: Option<Height>) -> Step {
        debug_assert!(matches!(self.phase, Phase::TxCommitted | Phase::AwaitExpiry));
        self.peer_check_results = Some((hc, hc2));
        chain.remove_waiting(&self.ctx_tx().id);
        if !chain.is_committed(&self.target.id) {
            self.outcome = Some(SideOutcome::NothingCommitted);
            return self.step(Phase::Finalized, None);
        }
        let peer_failed = match hc {
            None => true,
            Some(h) => h > self.ctx.remote_expiry,
        };
        if self.peer_byzantine || peer_failed || hc2.is_some() {
            self.outcome = Some(SideOutcome::Reversed);
            let tx = self.reverse.clone();
            return self.step(Phase::Finalized, Some(tx));
        }
        self.outcome = Some(SideOutcome::Completed);
        self.step(Phase::Finalized, None)
    }
}

/// Both sides' transactions for one task, built from the initiator's view.
#[derive(Clone, Debug)]
pub struct TaskPlan {
    pub id: u64,
    pub initiator: SystemId,
    pub responder: SystemId,
    pub ctx_initiator: ContractTx,
    pub target_initiator: Transaction,
    pub target_responder: Transaction,
}

impl TaskPlan {
    pub fn new(
        id: u64,
        initiator: SystemId,
        responder: SystemId,
        target_initiator: Transaction,
        target_responder: Transaction,
        initiator_expiry: Height,
        responder_expiry: Height,
    ) -> Self {
        let ctx_initiator = ContractTx {
            local_tx: target_initiator.id,
            local_reverse: Transaction::reverse_of(&target_initiator).id,
            local_expiry: initiator_expiry,
            peer: responder,
            remote_tx: target_responder.id,
            remote_reverse: Transaction::reverse_of(&target_responder).id,
            remote_expiry: responder_expiry,
        };
        TaskPlan { id, initiator, responder, ctx_initiator, target_initiator, target_responder }
    }

    pub fn ctx_responder(&self) -> ContractTx {
        derive_counterpart(&self.ctx_initiator, self.initiator)
    }

    pub fn sessions(&self, poll_interval: u64) -> (CbcSession, CbcSession) {
        (
            CbcSession::new(self.id, self.initiator, self.ctx_initiator, self.target_initiator.clone(), poll_interval),
            CbcSession::new(
                self.id,
                self.responder,
                self.ctx_responder(),
                self.target_responder.clone(),
                poll_interval,
            ),
        )
    }

    /// Every transaction of the task that either chain may carry.
    pub fn all_ids(&self) -> Vec<HashDigest> {
        let ctx_r = self.ctx_responder();
        alloc::vec![
            Transaction::contract(&self.ctx_initiator, self.initiator).id,
            Transaction::contract(&ctx_r, self.responder).id,
            self.ctx_initiator.local_tx,
            self.ctx_initiator.remote_tx,
            self.ctx_initiator.local_reverse,
            self.ctx_initiator.remote_reverse,
        ]
    }
}
