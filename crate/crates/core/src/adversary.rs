//! Adversaries: Adv1 taps request channels without finalize power; Adv2 owns
//! one system outright and can finalize two branches.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{Chain, SystemConfig};
use crate::channel::{all_sampled_within, ChannelMode};
use crate::error::{ChainError, ConfigError};
use crate::types::{ContractTx, Height, SystemId, Transaction};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversaryKind {
    #[default]
    None,
    Adv1,
    Adv2,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    ForgeCheckResponse,
    ForkAndDoubleTask,
    LateCommit,
    ForgedCheckOnFork,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversarySpec {
    pub kind: AdversaryKind,
    /// Fraction of each system's nodes held by the adversary.
    #[serde(default)]
    pub controlled: BTreeMap<SystemId, f64>,
    /// The system Adv2 fully corrupts.
    #[serde(default)]
    pub target_system: Option<SystemId>,
    #[serde(default)]
    pub strategy: Strategy,
}

impl AdversarySpec {
    pub fn none() -> Self {
        AdversarySpec::default()
    }

    /// Nodes of `cfg` under adversary control.
    pub fn controlled_nodes(&self, cfg: &SystemConfig) -> u16 {
        if self.kind == AdversaryKind::Adv2 && self.target_system == Some(cfg.id) {
            return cfg.q;
        }
        let f = self.controlled.get(&cfg.id).copied().unwrap_or(0.0);
        // floor without std
        (f * cfg.q as f64) as u16
    }

    /// Whether the adversary can assemble a finalizing proof in `cfg`.
    pub fn can_finalize(&self, cfg: &SystemConfig) -> bool {
        self.controlled_nodes(cfg) >= cfg.r
    }

    pub fn validate(&self, directory: &[SystemConfig]) -> Result<(), ConfigError> {
        for (id, f) in &self.controlled {
            if !(0.0..=1.0).contains(f) {
                return Err(ConfigError(alloc::format!("controlled fraction for {id} outside [0, 1]")));
            }
        }
        match self.kind {
            AdversaryKind::None => Ok(()),
            AdversaryKind::Adv1 => {
                if let Some(cfg) = directory.iter().find(|c| self.can_finalize(c)) {
                    return Err(ConfigError(alloc::format!("Adv1 controls a finalizing quorum in {}", cfg.id)));
                }
                Ok(())
            }
            AdversaryKind::Adv2 => {
                let target = self.target_system.ok_or_else(|| ConfigError("Adv2 needs a target system".into()))?;
                if target.index() >= directory.len() {
                    return Err(ConfigError(alloc::format!("Adv2 target {target} does not exist")));
                }
                if let Some(cfg) = directory.iter().find(|c| c.id != target && self.can_finalize(c)) {
                    return Err(ConfigError(alloc::format!("Adv2 may only finalize in {target}, not {}", cfg.id)));
                }
                Ok(())
            }
        }
    }
}

/// Adv1's foothold in the responding system of one channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adv1Tap {
    /// Responder node count.
    pub q: u16,
    /// Responder consensus threshold.
    pub r: u16,
    /// Responder nodes under adversary control.
    pub controlled: u16,
    /// Confirmations each requesting node samples.
    pub m: u16,
}

/// Closed-form chance that a forged answer is accepted.
pub fn forge_probability(tap: &Adv1Tap, mode: ChannelMode) -> f64 {
    match mode {
        ChannelMode::Permissionless => 0.0,
        ChannelMode::PermissionedFull | ChannelMode::PermissionedDelegated => {
            if tap.controlled >= tap.r {
                1.0
            } else {
                0.0
            }
        }
        ChannelMode::PermissionedSampled => all_sampled_within(tap.q, tap.controlled, tap.m),
    }
}

/// One forgery attempt. Returns true when the forged answer is accepted.
///
/// In sampled mode the requesting node draws `m` distinct responders; the
/// forgery passes only if every one of them is controlled, since honest
/// responders contradict it. Full and delegated modes need `r` matching
/// signatures; permissionless answers need a block proof Adv1 cannot make.
pub fn adv1_intercept<R: Rng + ?Sized>(tap: &Adv1Tap, mode: ChannelMode, rng: &mut R) -> bool {
    if tap.controlled == 0 {
        return false;
    }
    match mode {
        ChannelMode::Permissionless => false,
        ChannelMode::PermissionedFull | ChannelMode::PermissionedDelegated => tap.controlled >= tap.r,
        ChannelMode::PermissionedSampled => {
            let m = tap.m.min(tap.q) as usize;
            if m == 0 {
                return true;
            }
            // controlled nodes are ids [0, controlled)
            index::sample(rng, tap.q as usize, m).iter().all(|i| i < tap.controlled as usize)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    A,
    B,
}

/// Splits an adversary-owned chain: both branches keep heights `0..=fork_height`
/// and then each gets one distinct, fully signed block.
pub fn adv2_fork(chain: &Chain, fork_height: Height) -> Result<(Chain, Chain), ChainError> {
    if fork_height > chain.tip() {
        return Err(ChainError::ForkBeyondTip { fork_height, tip: chain.tip() });
    }
    let base = chain.truncated(fork_height as usize + 1);
    let mut a = base.clone();
    let mut b = base;
    let id = chain.id();
    a.append(alloc::vec![Transaction::local(branch_marker(Branch::A, fork_height), Vec::new(), id)], None);
    b.append(alloc::vec![Transaction::local(branch_marker(Branch::B, fork_height), Vec::new(), id)], None);
    Ok((a, b))
}

fn branch_marker(branch: Branch, fork_height: Height) -> Vec<u8> {
    let mut p = alloc::vec![b'f', b'o', b'r', b'k', if branch == Branch::A { b'A' } else { b'B' }];
    p.extend_from_slice(&fork_height.to_be_bytes());
    p
}

/// Script for the double-task attack: the adversary serves branch A to one
/// victim and branch B to the other while running the same task with both.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScript {
    pub adversary: SystemId,
    pub victims: [SystemId; 2],
    /// Tick at which the chain forks and both tasks start.
    pub fork_tick: u64,
    /// Branch served to each system; unlisted systems see branch A.
    pub branch_of: BTreeMap<SystemId, Branch>,
}

impl AttackScript {
    pub fn branch_for(&self, system: SystemId) -> Branch {
        self.branch_of.get(&system).copied().unwrap_or(Branch::A)
    }
}

pub fn adv2_double_task(adv_system: SystemId, victim_i: SystemId, victim_k: SystemId, fork_tick: u64) -> AttackScript {
    let mut branch_of = BTreeMap::new();
    branch_of.insert(victim_i, Branch::A);
    branch_of.insert(victim_k, Branch::B);
    AttackScript { adversary: adv_system, victims: [victim_i, victim_k], fork_tick, branch_of }
}

/// Misbehaviour visible from two chains after a task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    /// A target landed at or after its contract's expiry height.
    LateCommit { system: SystemId, height: Height, expiry: Height },
    /// A reverse was committed although both targets stand committed in time.
    ReverseAfterCompletion { system: SystemId, height: Height },
}

/// Post-hoc audit of one task from the chains of both parties.
pub fn audit_task(chain_i: &Chain, ctx_i: &ContractTx, chain_j: &Chain, ctx_j: &ContractTx) -> Vec<Violation> {
    let mut out = Vec::new();
    let sides = [(chain_i, ctx_i), (chain_j, ctx_j)];
    for (chain, ctx) in sides {
        if let Some(h) = chain.check(&ctx.local_tx) {
            if h >= ctx.local_expiry {
                out.push(Violation::LateCommit { system: chain.id(), height: h, expiry: ctx.local_expiry });
            }
        }
    }
    let in_time = |chain: &Chain, ctx: &ContractTx| chain.check(&ctx.local_tx).is_some_and(|h| h < ctx.local_expiry);
    if in_time(chain_i, ctx_i) && in_time(chain_j, ctx_j) {
        for (chain, ctx) in sides {
            if let Some(h) = chain.check(&ctx.local_reverse) {
                out.push(Violation::ReverseAfterCompletion { system: chain.id(), height: h });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::min_confirmations;
    use crate::gossip::{can_extend, merge, ViewList};
    use alloc::vec;
    use rand::SeedableRng;

    fn cfg(id: u16) -> SystemConfig {
        SystemConfig::new(SystemId(id), 10, 7, 0, 4)
    }

    #[test]
    fn zero_control_always_passes_through() {
        let tap = Adv1Tap { q: 10, r: 7, controlled: 0, m: 1 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| !adv1_intercept(&tap, ChannelMode::PermissionedSampled, &mut rng)));
    }

    #[test]
    fn permissionless_forgery_always_fails() {
        let tap = Adv1Tap { q: 10, r: 7, controlled: 6, m: 1 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| !adv1_intercept(&tap, ChannelMode::Permissionless, &mut rng)));
        assert!((0..1000).all(|_| !adv1_intercept(&tap, ChannelMode::PermissionedFull, &mut rng)));
    }

    #[test]
    fn sampled_forgery_rate_below_target() {
        let (q, r, p) = (20u16, 14u16, 0.01);
        let m = min_confirmations(q, r, p).unwrap().m;
        let tap = Adv1Tap { q, r, controlled: r - 1, m };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let trials = 20_000;
        let hits = (0..trials).filter(|_| adv1_intercept(&tap, ChannelMode::PermissionedSampled, &mut rng)).count();
        assert!(forge_probability(&tap, ChannelMode::PermissionedSampled) < p);
        assert!((hits as f64) / (trials as f64) < p);
    }

    #[test]
    fn adv1_cannot_finalize() {
        let dir = vec![cfg(0), cfg(1)];
        let mut spec = AdversarySpec { kind: AdversaryKind::Adv1, ..AdversarySpec::default() };
        spec.controlled.insert(SystemId(0), 0.6);
        spec.controlled.insert(SystemId(1), 0.6);
        assert!(spec.validate(&dir).is_ok());
        assert!(dir.iter().all(|c| spec.controlled_nodes(c) < c.r));
        spec.controlled.insert(SystemId(1), 0.7);
        assert!(spec.validate(&dir).is_err());
    }

    #[test]
    fn adv2_owns_only_its_target() {
        let dir = vec![cfg(0), cfg(1)];
        let spec =
            AdversarySpec { kind: AdversaryKind::Adv2, target_system: Some(SystemId(1)), ..AdversarySpec::default() };
        assert!(spec.validate(&dir).is_ok());
        assert!(spec.can_finalize(&dir[1]));
        assert!(!spec.can_finalize(&dir[0]));
    }

    fn grown(blocks: usize) -> Chain {
        let mut c = Chain::new(cfg(1));
        for i in 0..blocks {
            c.commit(vec![Transaction::local((i as u32).to_be_bytes().to_vec(), vec![], SystemId(1))]).unwrap();
        }
        c
    }

    #[test]
    fn fork_at_genesis_is_disjoint_after_it() {
        let c = grown(5);
        let (a, b) = adv2_fork(&c, 0).unwrap();
        assert_eq!(a.height(), 2);
        assert_eq!(a.header_hash(0), b.header_hash(0));
        assert_ne!(a.header_hash(1), b.header_hash(1));
    }

    #[test]
    fn fork_beyond_tip_is_rejected() {
        let c = grown(5);
        assert!(matches!(adv2_fork(&c, 6), Err(ChainError::ForkBeyondTip { .. })));
        assert!(adv2_fork(&c, 5).is_ok());
    }

    #[test]
    fn forked_views_conflict_in_merge() {
        let c = grown(8);
        let (mut a, mut b) = adv2_fork(&c, 6).unwrap();
        for _ in 0..3 {
            a.commit(vec![]).unwrap();
            b.commit(vec![]).unwrap();
        }
        let (va, vb) = (a.view().unwrap(), b.view().unwrap());
        assert_eq!(va.height, vb.height);
        assert!(!can_extend(&va, &vb, 4));
        assert!(!can_extend(&vb, &va, 4));
        let dir = vec![cfg(0), cfg(1), cfg(2)];
        let mut local = ViewList::new(SystemId(0));
        local.entries.insert(SystemId(1), va);
        let mut incoming = ViewList::new(SystemId(2));
        incoming.entries.insert(SystemId(1), vb);
        let out = merge(&mut local, &incoming, &dir);
        assert_eq!(out.conflicts.len(), 1);
        assert_eq!(out.conflicts[0].accused, SystemId(1));
    }

    #[test]
    fn double_task_script_assigns_branches() {
        let s = adv2_double_task(SystemId(2), SystemId(0), SystemId(1), 20);
        assert_eq!(s.branch_for(SystemId(0)), Branch::A);
        assert_eq!(s.branch_for(SystemId(1)), Branch::B);
        assert_eq!(s.branch_for(SystemId(3)), Branch::A);
    }
}
