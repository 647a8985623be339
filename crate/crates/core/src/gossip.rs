//! Blockchain-wise gossip: view lists, the merge rule, push rounds, pull
//! requests for history gaps, and fork evidence.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{Chain, SystemConfig, View};
use crate::error::GossipError;
use crate::types::{hash_pair, HashDigest, Height, SystemId};

/// How a second view relates to a first view of the same system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewRelation {
    /// Same finalized prefix.
    Equal,
    /// The second view consistently extends the first.
    Ahead,
    /// The second view is a consistent, older prefix of the first.
    Behind,
    /// The views are too far apart to compare without the missing header hashes.
    Gap,
    /// The views cannot both describe one chain.
    Conflict,
}

/// Compares `b` against `a`.
///
/// `bridge` holds header hashes that directly follow the lower of the two
/// views (heights `lower.height + 1 ..`), e.g. from a pull response.
pub fn relate(a: &View, b: &View, bridge: &[HashDigest]) -> ViewRelation {
    let (lo, hi, b_is_lower) = if a.height <= b.height { (a, b, false) } else { (b, a, true) };
    let known_start = lo.folded_len();
    let known_end = lo.covered_len() + bridge.len() as u64;
    let hi_folded = hi.folded_len();
    if hi_folded < known_start || hi_folded > known_end {
        return ViewRelation::Gap;
    }
    let known = |h: Height| -> HashDigest {
        let i = (h - known_start) as usize;
        if i < lo.recent.len() {
            lo.recent[i]
        } else {
            bridge[i - lo.recent.len()]
        }
    };
    let mut agg = lo.aggregate;
    for h in known_start..hi_folded {
        agg = hash_pair(&agg, &known(h));
    }
    if agg != hi.aggregate {
        return ViewRelation::Conflict;
    }
    let overlap_end = known_end.min(hi.covered_len());
    for h in hi_folded..overlap_end {
        if known(h) != hi.recent[(h - hi_folded) as usize] {
            return ViewRelation::Conflict;
        }
    }
    if a.height == b.height {
        ViewRelation::Equal
    } else if b_is_lower {
        ViewRelation::Behind
    } else {
        ViewRelation::Ahead
    }
}

/// True iff `new` is `old` or a consistent extension of it. A gap wider than
/// the view window yields `false`; [`relate`] tells that case apart.
pub fn can_extend(old: &View, new: &View, _k: u64) -> bool {
    matches!(relate(old, new, &[]), ViewRelation::Equal | ViewRelation::Ahead)
}

/// A system's cache of the latest views of every system it has heard of.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewList {
    pub owner: SystemId,
    pub entries: BTreeMap<SystemId, View>,
    pub version: u64,
}

impl ViewList {
    pub fn new(owner: SystemId) -> Self {
        ViewList { owner, entries: BTreeMap::new(), version: 0 }
    }

    pub fn get(&self, system: SystemId) -> Option<&View> {
        self.entries.get(&system)
    }

    /// Installs the owner's freshly generated view.
    pub fn refresh_own(&mut self, view: View) {
        if self.entries.get(&self.owner) != Some(&view) {
            self.entries.insert(self.owner, view);
            self.version += 1;
        }
    }

    /// Total digests carried: one aggregate plus the recent window per entry.
    pub fn digest_count(&self) -> usize {
        self.entries.values().map(|v| 1 + v.recent.len()).sum()
    }

    /// Length-prefixed concatenation of `(system id, view encoding)` pairs.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.owner.0.to_be_bytes());
        out.extend_from_slice(&(self.entries.len() as u16).to_be_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&id.0.to_be_bytes());
            out.extend_from_slice(&v.encode());
        }
        out
    }
}

/// Two proof-bearing, irreconcilable views of the same system.
///
/// When the views are further apart than the window, `bridge` carries the
/// header hashes following `view_a` and `anchor` is a proven view of the
/// accused that those hashes lead to, so the bridge cannot be made up.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictEvidence {
    pub accused: SystemId,
    pub view_a: View,
    pub view_b: View,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bridge: Vec<HashDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<View>,
    pub reporter: SystemId,
}

impl ConflictEvidence {
    /// Checks proofs and that the views conflict in both directions, or, with
    /// a bridge, that the anchor vouches for the bridge and `view_b` contradicts it.
    pub fn validate(&self, directory: &[SystemConfig]) -> Result<(), GossipError> {
        let cfg = directory.get(self.accused.index()).ok_or(GossipError::InvalidProof(self.accused))?;
        let proven = |v: &View| cfg.proof_is_valid(&v.proof) && v.is_well_formed(cfg.k);
        if !proven(&self.view_a) || !proven(&self.view_b) || !self.anchor.as_ref().is_none_or(proven) {
            return Err(GossipError::InvalidProof(self.accused));
        }
        let bogus = GossipError::BogusEvidence { accused: self.accused, reporter: self.reporter };
        if self.bridge.is_empty() {
            let forward = relate(&self.view_a, &self.view_b, &[]);
            let backward = relate(&self.view_b, &self.view_a, &[]);
            return if forward == ViewRelation::Conflict && backward == ViewRelation::Conflict {
                Ok(())
            } else {
                Err(bogus)
            };
        }
        let Some(anchor) = &self.anchor else { return Err(bogus) };
        let vouched = matches!(relate(&self.view_a, anchor, &self.bridge), ViewRelation::Ahead | ViewRelation::Equal);
        let lower_first = self.view_a.height <= self.view_b.height && self.view_a.height <= anchor.height;
        if vouched && lower_first && relate(&self.view_a, &self.view_b, &self.bridge) == ViewRelation::Conflict {
            Ok(())
        } else {
            Err(bogus)
        }
    }
}

/// Result of folding incoming view information into a local list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeOutcome {
    pub updated: bool,
    /// Systems whose history must be pulled before the incoming view can be judged.
    pub pulls: Vec<SystemId>,
    pub conflicts: Vec<ConflictEvidence>,
    /// Entries dropped for carrying an invalid proof.
    pub invalid: Vec<SystemId>,
}

fn entry_is_valid(directory: &[SystemConfig], system: SystemId, view: &View) -> bool {
    directory.get(system.index()).is_some_and(|cfg| cfg.proof_is_valid(&view.proof) && view.is_well_formed(cfg.k))
}

/// Per-entry merge: extend replaces, a wide gap asks for a pull, anything
/// irreconcilable becomes evidence. The owner's own entry is never touched.
pub fn merge(local: &mut ViewList, incoming: &ViewList, directory: &[SystemConfig]) -> MergeOutcome {
    let mut out = MergeOutcome::default();
    for (&system, view) in &incoming.entries {
        merge_entry(local, system, view, &[], None, directory, &mut out);
    }
    out
}

/// `bridge` must follow the stored entry and is ignored for views below it;
/// `anchor` is the proven view the bridge leads to.
fn merge_entry(
    local: &mut ViewList,
    system: SystemId,
    view: &View,
    bridge: &[HashDigest],
    anchor: Option<&View>,
    directory: &[SystemConfig],
    out: &mut MergeOutcome,
) {
    if system == local.owner {
        return;
    }
    if !entry_is_valid(directory, system, view) {
        out.invalid.push(system);
        return;
    }
    let Some(current) = local.entries.get(&system) else {
        local.entries.insert(system, view.clone());
        local.version += 1;
        out.updated = true;
        return;
    };
    let (bridge, anchor) =
        if view.height >= current.height && anchor.is_some() { (bridge, anchor) } else { (&[][..], None) };
    match relate(current, view, bridge) {
        ViewRelation::Ahead => {
            local.entries.insert(system, view.clone());
            local.version += 1;
            out.updated = true;
        }
        ViewRelation::Equal | ViewRelation::Behind => {}
        ViewRelation::Gap => out.pulls.push(system),
        ViewRelation::Conflict => out.conflicts.push(ConflictEvidence {
            accused: system,
            view_a: current.clone(),
            view_b: view.clone(),
            bridge: bridge.to_vec(),
            anchor: if bridge.is_empty() { None } else { anchor.cloned() },
            reporter: local.owner,
        }),
    }
}

/// Picks each neighbour independently with probability `g`.
pub fn push_round<R: Rng + ?Sized>(
    list: &ViewList,
    neighbors: &[SystemId],
    g: f64,
    rng: &mut R,
) -> Vec<(SystemId, ViewList)> {
    neighbors.iter().filter(|_| g > 0.0 && (g >= 1.0 || rng.random_bool(g))).map(|&to| (to, list.clone())).collect()
}

/// Request for header hashes of `subject` starting at height `from`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullRequest {
    pub subject: SystemId,
    pub from: Height,
}

/// Missing header hashes `[start, start + hashes.len())` plus a view at most
/// that far ahead, proven by the subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PullResponse {
    pub subject: SystemId,
    pub start: Height,
    pub hashes: Vec<HashDigest>,
    pub view: View,
}

/// Answers a pull from the subject's own chain, bounded to `4k` hashes.
pub fn serve_pull(chain: &Chain, req: &PullRequest) -> Option<PullResponse> {
    let m = chain.finalized_len();
    if m == 0 {
        return None;
    }
    let bound = 4 * chain.config().k;
    let start = req.from.min(m);
    let end = m.min(start + bound);
    let view = chain.view_at(end).ok()?;
    Some(PullResponse { subject: chain.id(), start, hashes: chain.header_hashes(start, end).to_vec(), view })
}

/// What the owner of a [`GossipState`] must do after receiving evidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvidenceEffects {
    pub accused: SystemId,
    /// First valid evidence against this system: blacklist it and re-flood.
    pub newly_accused: bool,
}

/// Gossip-side state of one system.
#[derive(Clone, Debug)]
pub struct GossipState {
    pub list: ViewList,
    pub blacklist: BTreeSet<SystemId>,
    /// Incoming views parked while a pull for their history is outstanding.
    pub pending: BTreeMap<SystemId, View>,
    pub invalid_dropped: u64,
}

impl GossipState {
    pub fn new(owner: SystemId) -> Self {
        GossipState {
            list: ViewList::new(owner),
            blacklist: BTreeSet::new(),
            pending: BTreeMap::new(),
            invalid_dropped: 0,
        }
    }

    pub fn owner(&self) -> SystemId {
        self.list.owner
    }

    fn finish(&mut self, mut out: MergeOutcome, parked: Vec<(SystemId, View)>) -> MergeOutcome {
        self.invalid_dropped += out.invalid.len() as u64;
        for (s, v) in parked {
            if out.pulls.contains(&s) {
                self.pending.insert(s, v);
            }
        }
        out.pulls.retain(|s| !self.blacklist.contains(s));
        out.conflicts.retain(|c| !self.blacklist.contains(&c.accused));
        out
    }

    /// Merges a pushed view list. Entries of blacklisted systems are frozen.
    pub fn on_push(&mut self, incoming: &ViewList, directory: &[SystemConfig]) -> MergeOutcome {
        let mut filtered = incoming.clone();
        filtered.entries.retain(|s, _| !self.blacklist.contains(s));
        let out = merge(&mut self.list, &filtered, directory);
        let parked = out.pulls.iter().map(|s| (*s, filtered.entries[s].clone())).collect();
        self.finish(out, parked)
    }

    /// Merges a single view, e.g. one attached to a check request or response.
    pub fn on_view(&mut self, system: SystemId, view: &View, directory: &[SystemConfig]) -> MergeOutcome {
        let mut out = MergeOutcome::default();
        if self.blacklist.contains(&system) {
            return out;
        }
        merge_entry(&mut self.list, system, view, &[], None, directory, &mut out);
        let parked = alloc::vec![(system, view.clone())];
        self.finish(out, parked)
    }

    /// The pull to issue for `subject`, starting right after the local view.
    pub fn pull_request(&self, subject: SystemId) -> PullRequest {
        let from = self.list.get(subject).map_or(0, |v| v.covered_len());
        PullRequest { subject, from }
    }

    /// Tail of a pull response that directly follows the stored entry, if any.
    fn bridge_from<'r>(&self, resp: &'r PullResponse) -> &'r [HashDigest] {
        match self.list.get(resp.subject) {
            Some(v) if v.covered_len() >= resp.start && v.covered_len() <= resp.start + resp.hashes.len() as u64 => {
                &resp.hashes[(v.covered_len() - resp.start) as usize..]
            }
            _ => &[],
        }
    }

    /// Applies a pull response. The parked view that caused the pull is judged
    /// against the stored entry plus the pulled hashes, then the response's own
    /// view moves the entry forward. A view still out of reach is pulled for
    /// again only if the entry advanced, so the exchange always terminates.
    pub fn on_pull_response(&mut self, resp: &PullResponse, directory: &[SystemConfig]) -> MergeOutcome {
        let mut out = MergeOutcome::default();
        let s = resp.subject;
        if self.blacklist.contains(&s) {
            return out;
        }
        let waiting = self.pending.remove(&s);
        let before = self.list.get(s).map(|v| v.height);
        let mut unresolved = false;
        if let Some(p) = &waiting {
            let mut first = MergeOutcome::default();
            let bridge = self.bridge_from(resp);
            merge_entry(&mut self.list, s, p, bridge, Some(&resp.view), directory, &mut first);
            unresolved = !first.pulls.is_empty();
            out.updated |= first.updated;
            out.conflicts.extend(first.conflicts);
            out.invalid.extend(first.invalid);
        }
        let mut second = MergeOutcome::default();
        let bridge = self.bridge_from(resp);
        merge_entry(&mut self.list, s, &resp.view, bridge, Some(&resp.view), directory, &mut second);
        out.updated |= second.updated;
        out.conflicts.extend(second.conflicts);
        out.invalid.extend(second.invalid);
        let mut parked = Vec::new();
        if let (Some(p), true) = (waiting, unresolved) {
            let mut again = MergeOutcome::default();
            merge_entry(&mut self.list, s, &p, &[], None, directory, &mut again);
            out.updated |= again.updated;
            out.conflicts.extend(again.conflicts);
            let advanced = self.list.get(s).map(|v| v.height) != before;
            if !again.pulls.is_empty() && advanced {
                out.pulls.push(s);
                parked.push((s, p));
            }
        }
        self.finish(out, parked)
    }

    /// Validates evidence and blacklists the accused on first sight.
    pub fn handle_evidence(
        &mut self,
        evidence: &ConflictEvidence,
        directory: &[SystemConfig],
    ) -> Result<EvidenceEffects, GossipError> {
        evidence.validate(directory)?;
        let newly_accused = self.blacklist.insert(evidence.accused);
        if newly_accused {
            self.pending.remove(&evidence.accused);
        }
        Ok(EvidenceEffects { accused: evidence.accused, newly_accused })
    }
}
