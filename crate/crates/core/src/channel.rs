//! Request channel between two systems: confirmation thresholds, node-level
//! cost accounting, and the `check` transport an adversary may tap.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{adv1_intercept, Adv1Tap};
use crate::chain::{Chain, View};
use crate::error::{ChainError, ChannelError};
use crate::types::{HashDigest, Height, SystemId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    /// Answers carry the latest block headers as proof.
    Permissionless,
    /// Every node of one side talks to every node of the other.
    PermissionedFull,
    /// One delegate collects properly signed answers.
    PermissionedDelegated,
    /// Each node samples `m` responders.
    PermissionedSampled,
}

/// Smallest sample size found by [`min_confirmations`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Confirmations {
    pub m: u16,
    /// False when no sample size meets the target and `m` is the `q - r + 1` cap.
    pub satisfied: bool,
}

/// `C(n, k)` for small `n`, exact.
fn binomial_exact(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    c
}

/// `C(r, m) / C(q, m)`: chance that `m` distinct uniform draws from `q` nodes
/// all land among `r` designated ones.
pub fn all_sampled_within(q: u16, r: u16, m: u16) -> f64 {
    if m > r {
        return 0.0;
    }
    if q <= 100 {
        binomial_exact(r as u64, m as u64) as f64 / binomial_exact(q as u64, m as u64) as f64
    } else {
        (0..m).map(|i| (r - i) as f64 / (q - i) as f64).product()
    }
}

/// Smallest `m` with `C(r, m) / C(q, m) < p`.
pub fn min_confirmations(q: u16, r: u16, p: f64) -> Result<Confirmations, ChannelError> {
    if r == 0 || r > q {
        return Err(ChannelError::InvalidParams("need 1 <= r <= q"));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(ChannelError::InvalidParams("need 0 < p < 1"));
    }
    for m in 1..=q {
        if all_sampled_within(q, r, m) < p {
            return Ok(Confirmations { m, satisfied: true });
        }
    }
    Ok(Confirmations { m: q - r + 1, satisfied: false })
}

/// Node-to-node messages needed for one cross-system request.
pub fn request_cost(mode: ChannelMode, r_i: u16, r_j: u16, m_j: u16) -> u64 {
    let (r_i, r_j, m_j) = (r_i as u64, r_j as u64, m_j as u64);
    match mode {
        ChannelMode::PermissionedFull => 2 * r_i * r_j,
        ChannelMode::PermissionedDelegated => r_j,
        ChannelMode::PermissionedSampled => r_j.min(m_j * r_i),
        // one request plus one proof-carrying response
        ChannelMode::Permissionless => 2,
    }
}

/// Answer to a batched `check`, with the responder's view attached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckReply {
    pub results: Vec<Option<Height>>,
    pub view: View,
    pub forged: bool,
}

/// Anything that can answer `check` on behalf of a peer system.
pub trait PeerQuery {
    fn check(&mut self, hashes: &[HashDigest]) -> Result<CheckReply, ChannelError>;
}

/// Directed request channel `from -> to`.
#[derive(Clone, Debug)]
pub struct RequestChannel {
    pub from: SystemId,
    pub to: SystemId,
    pub mode: ChannelMode,
    pub p_fail_target: f64,
    pub interceptor: Option<Adv1Tap>,
    pub requests_sent: u64,
}

impl RequestChannel {
    pub fn new(from: SystemId, to: SystemId, mode: ChannelMode) -> Self {
        RequestChannel { from, to, mode, p_fail_target: 0.01, interceptor: None, requests_sent: 0 }
    }

    /// One request message: `check` every hash on `responder`.
    ///
    /// With an Adv1 tap installed, a forged answer (every hash reported
    /// absent) is returned only when the tap's sampling attack succeeds.
    pub fn send_check<R: Rng + ?Sized>(
        &mut self,
        responder: &Chain,
        hashes: &[HashDigest],
        rng: &mut R,
    ) -> Result<CheckReply, ChannelError> {
        self.requests_sent += 1;
        let view = responder.view().map_err(|_: ChainError| ChannelError::Timeout)?;
        let honest: Vec<_> = hashes.iter().map(|h| responder.check(h)).collect();
        if let Some(tap) = &self.interceptor {
            if adv1_intercept(tap, self.mode, rng) {
                return Ok(CheckReply { results: alloc::vec![None; hashes.len()], view, forged: true });
            }
        }
        Ok(CheckReply { results: honest, view, forged: false })
    }
}

/// Synchronous [`PeerQuery`] over a channel and the peer's chain.
pub struct DirectPeer<'a, R: Rng> {
    pub channel: &'a mut RequestChannel,
    pub responder: &'a Chain,
    pub rng: &'a mut R,
}

impl<R: Rng> PeerQuery for DirectPeer<'_, R> {
    fn check(&mut self, hashes: &[HashDigest]) -> Result<CheckReply, ChannelError> {
        self.channel.send_check(self.responder, hashes, self.rng)
    }
}

fn signed(h: Option<Height>) -> i64 {
    h.map_or(-1, |h| h as i64)
}

/// Request/response records on the simulator transport.
///
/// `hash`/`result` carry the primary query; the timeout step batches the
/// reverse-transaction query into the optional `reverse_*` fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum CheckMessage {
    CheckReq {
        sender: SystemId,
        hash: HashDigest,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reverse_hash: Option<HashDigest>,
        view: View,
        tick: u64,
    },
    CheckResp {
        sender: SystemId,
        hash: HashDigest,
        result: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reverse_hash: Option<HashDigest>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reverse_result: Option<i64>,
        view: View,
        tick: u64,
    },
}

impl CheckMessage {
    pub fn request(sender: SystemId, hashes: &[HashDigest], view: View, tick: u64) -> Self {
        CheckMessage::CheckReq { sender, hash: hashes[0], reverse_hash: hashes.get(1).copied(), view, tick }
    }

    pub fn response(sender: SystemId, hashes: &[HashDigest], reply: &CheckReply, tick: u64) -> Self {
        CheckMessage::CheckResp {
            sender,
            hash: hashes[0],
            result: signed(reply.results[0]),
            reverse_hash: hashes.get(1).copied(),
            reverse_result: reply.results.get(1).map(|r| signed(*r)),
            view: reply.view.clone(),
            tick,
        }
    }
}
