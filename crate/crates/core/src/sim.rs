//! Deterministic discrete-event simulation of `n` systems producing blocks,
//! running cross-chain tasks, and gossiping views.
//!
//! One tick is one block slot. Each tick runs a block phase (new tasks,
//! session steps, block commit, push round) for every system in id order,
//! then delivers every message due by that tick, then samples view gaps.
//! All randomness comes from one seed: stream 0 drives the network, stream
//! `id + 1` drives system `id`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{adv1_intercept, adv2_fork};
use crate::adversary::{adv2_double_task, Adv1Tap, AdversaryKind, AdversarySpec, AttackScript, Branch, Strategy};
use crate::cbc::{CbcSession, Phase, SideOutcome, TaskPlan};
use crate::chain::{Chain, SystemConfig, View};
use crate::channel::{min_confirmations, ChannelMode};
use crate::error::ConfigError;
use crate::gossip::{
    push_round, serve_pull, ConflictEvidence, GossipState, MergeOutcome, PullRequest, PullResponse, ViewList,
};
use crate::types::{HashDigest, Height, SystemId, Transaction};

/// Gossip graph between systems.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    FullMesh,
    /// Each system talks to its two ring neighbours.
    Ring,
    /// Explicit directed adjacency lists, indexed by system id.
    Custom(Vec<Vec<u16>>),
}

impl Topology {
    pub fn neighbors(&self, n: u16) -> Vec<Vec<SystemId>> {
        match self {
            Topology::FullMesh => (0..n).map(|i| (0..n).filter(|&j| j != i).map(SystemId).collect()).collect(),
            Topology::Ring => (0..n)
                .map(|i| {
                    let mut v = alloc::vec![SystemId((i + 1) % n), SystemId((i + n - 1) % n)];
                    v.dedup();
                    v.retain(|s| s.0 != i);
                    v
                })
                .collect(),
            Topology::Custom(adj) => adj.iter().map(|l| l.iter().copied().map(SystemId).collect()).collect(),
        }
    }

    fn strongly_connected(adj: &[Vec<SystemId>]) -> bool {
        let n = adj.len();
        let reach = |forward: bool| {
            let mut seen = alloc::vec![false; n];
            let mut stack = alloc::vec![0usize];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for v in 0..n {
                    let edge = if forward {
                        adj[u].contains(&SystemId(v as u16))
                    } else {
                        adj[v].contains(&SystemId(u as u16))
                    };
                    if edge && !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            seen.iter().all(|&s| s)
        };
        n == 0 || (reach(true) && reach(false))
    }
}

/// Parameters shared by every system unless `systems` lists them one by one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemTemplate {
    pub q: u16,
    pub r: u16,
    pub t: u64,
    pub k: u64,
}

impl Default for SystemTemplate {
    fn default() -> Self {
        SystemTemplate { q: 4, r: 3, t: 1, k: 5 }
    }
}

/// Fault injection for the honest-protocol property runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Faults {
    /// Chance that a new target depends on the previous target of the same
    /// system, which may still be locked.
    pub chained_target_prob: f64,
    /// Extra ticks, uniform in `0..=max`, before the counterparty hears of a task.
    pub submit_delay_max: u64,
}

/// Parameters of the double-task attack, used when the adversary is Adv2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackParams {
    /// The two victims; defaults to the two lowest ids other than the adversary.
    pub victims: Option<[SystemId; 2]>,
    /// Tick at which the adversary forks its chain and starts both tasks.
    pub fork_tick: u64,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams { victims: None, fork_tick: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: u16,
    /// Cross-chain task rate per block: each system starts `p_c / (1 - p_c)` tasks per block on average.
    pub p_c: f64,
    /// Chance that a push round sends to a given neighbour.
    pub g: f64,
    pub num_blocks: u64,
    pub block_interval: u64,
    pub seed: u64,
    pub topology: Topology,
    /// Per-system parameters; empty means `n` copies of `system_defaults`.
    pub systems: Vec<SystemConfig>,
    pub system_defaults: SystemTemplate,
    pub adversary: AdversarySpec,
    pub attack: AttackParams,
    /// Expiry margin `E = expiry_factor * (k + expected_gap)` blocks.
    pub expiry_factor: f64,
    pub expected_gap: f64,
    /// Extra expiry blocks, uniform in `0..=expiry_jitter`, drawn per side.
    pub expiry_jitter: u64,
    /// Base message latency in ticks.
    pub latency: u64,
    /// Latency varies uniformly by up to this many ticks either way.
    pub jitter: u64,
    /// Push at least this often, in blocks, even without new commits.
    pub push_timer: u64,
    /// Push in the block after the view list changed.
    pub rebroadcast: bool,
    /// Blocks between committing a contract and the first poll.
    pub poll_delay: u64,
    /// Blocks between repeated polls or timeout queries.
    pub poll_interval: u64,
    /// Blocks past the local expiry after which the timeout query is sent
    /// even if the stored peer view is still short of the remote expiry.
    pub timeout_fallback: u64,
    pub channel_mode: ChannelMode,
    /// Target failure probability for sampled confirmations.
    pub p_fail_target: f64,
    pub faults: Faults,
    /// Blocks allowed after `num_blocks` for running tasks to settle.
    pub drain_blocks_max: u64,
    /// Keep every gap sample, not only the histogram.
    pub record_gap_samples: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 3,
            p_c: 0.1,
            g: 0.1,
            num_blocks: 10_000,
            block_interval: 1,
            seed: 1,
            topology: Topology::FullMesh,
            systems: Vec::new(),
            system_defaults: SystemTemplate::default(),
            adversary: AdversarySpec::none(),
            attack: AttackParams::default(),
            expiry_factor: 2.0,
            expected_gap: 3.0,
            expiry_jitter: 0,
            latency: 1,
            jitter: 1,
            push_timer: 10,
            rebroadcast: true,
            poll_delay: 2,
            poll_interval: 2,
            timeout_fallback: 5,
            channel_mode: ChannelMode::PermissionedDelegated,
            p_fail_target: 0.01,
            faults: Faults::default(),
            drain_blocks_max: 1_000,
            record_gap_samples: false,
        }
    }
}

fn bad(msg: &str) -> ConfigError {
    ConfigError(msg.into())
}

impl SimConfig {
    /// Scenario `n_pc_g` naming: `3_1_1` is three systems, `p_c = 0.1`, `g = 0.1`.
    pub fn scenario(n: u16, p_c: f64, g: f64) -> Self {
        SimConfig { n, p_c, g, ..SimConfig::default() }
    }

    pub fn directory(&self) -> Vec<SystemConfig> {
        if !self.systems.is_empty() {
            return self.systems.clone();
        }
        let d = self.system_defaults;
        (0..self.n).map(|i| SystemConfig::new(SystemId(i), d.q, d.r, d.t, d.k)).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 2 {
            return Err(bad("n must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.p_c) {
            return Err(bad("p_c must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.g) {
            return Err(bad("g must lie in [0, 1]"));
        }
        if self.block_interval == 0 || self.poll_interval == 0 {
            return Err(bad("block_interval and poll_interval must be positive"));
        }
        let positive = self.expiry_factor > 0.0;
        let non_negative = self.expected_gap >= 0.0;
        if !positive || !non_negative {
            return Err(bad("expiry_factor must be positive and expected_gap non-negative"));
        }
        if !(0.0..=1.0).contains(&self.faults.chained_target_prob) {
            return Err(bad("chained_target_prob must lie in [0, 1]"));
        }
        let dir = self.directory();
        if dir.len() != self.n as usize {
            return Err(bad("systems must list exactly n entries"));
        }
        for (i, cfg) in dir.iter().enumerate() {
            if cfg.id.index() != i {
                return Err(bad("system ids must be 0..n in order"));
            }
            cfg.validate()?;
        }
        let adj = self.topology.neighbors(self.n);
        if adj.len() != self.n as usize || adj.iter().flatten().any(|s| s.0 >= self.n) {
            return Err(bad("topology does not match n"));
        }
        if adj.iter().enumerate().any(|(i, l)| l.iter().any(|s| s.index() == i)) {
            return Err(bad("topology has a self loop"));
        }
        if !Topology::strongly_connected(&adj) {
            return Err(bad("topology must be strongly connected"));
        }
        self.adversary.validate(&dir)?;
        match (self.adversary.kind, self.adversary.strategy) {
            (AdversaryKind::None, _) => {}
            (AdversaryKind::Adv1, Strategy::ForgeCheckResponse) => {
                min_confirmations(dir[0].q, dir[0].r, self.p_fail_target)
                    .map_err(|e| ConfigError(alloc::string::ToString::to_string(&e)))?;
            }
            (AdversaryKind::Adv2, Strategy::ForkAndDoubleTask) => {
                let adv = self.adversary.target_system.ok_or_else(|| bad("Adv2 needs target_system"))?;
                let [a, b] = self.victims(adv)?;
                if a == b || a == adv || b == adv || a.0 >= self.n || b.0 >= self.n {
                    return Err(bad("victims must be two distinct systems other than the adversary"));
                }
            }
            _ => return Err(bad("strategy is not simulated")),
        }
        Ok(())
    }

    fn victims(&self, adv: SystemId) -> Result<[SystemId; 2], ConfigError> {
        if let Some(v) = self.attack.victims {
            return Ok(v);
        }
        let others: Vec<_> = (0..self.n).map(SystemId).filter(|&s| s != adv).collect();
        if others.len() < 2 {
            return Err(bad("the attack needs two victims"));
        }
        Ok([others[0], others[1]])
    }

    /// Expiry margin in blocks for a system with window `k`.
    pub fn expiry_margin(&self, k: u64) -> u64 {
        let e = self.expiry_factor * (k as f64 + self.expected_gap);
        let whole = e as u64;
        if (whole as f64) < e {
            whole + 1
        } else {
            whole
        }
    }
}

/// Number of tasks a system starts in one block: failures before the first
/// success of a coin with success chance `1 - p_c`, so the mean is `p_c / (1 - p_c)`.
pub fn draw_task_count<R: Rng + ?Sized>(p_c: f64, rng: &mut R) -> u64 {
    if p_c <= 0.0 {
        return 0;
    }
    let mut count = 0;
    while rng.random_bool(p_c) {
        count += 1;
    }
    count
}

/// One observation of how far a stored view trails the real chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapSample {
    pub tick: u64,
    pub observer: SystemId,
    pub observed: SystemId,
    pub gap: u64,
}

/// For every ordered pair, the observed system's finalized height minus the
/// height of the view the observer holds for it.
pub fn sample_gap(view_lists: &[&ViewList], true_heights: &[Option<Height>], tick: u64) -> Vec<GapSample> {
    let mut out = Vec::new();
    for list in view_lists {
        for (x, truth) in true_heights.iter().enumerate() {
            let observed = SystemId(x as u16);
            if observed == list.owner {
                continue;
            }
            if let (Some(truth), Some(v)) = (truth, list.get(observed)) {
                out.push(GapSample { tick, observer: list.owner, observed, gap: truth.saturating_sub(v.height) });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskResult {
    /// Both targets stand.
    Succeeded,
    /// At least one target was undone.
    Reversed,
    /// No target stands, nothing to undo.
    Aborted,
    /// Still running when the simulation stopped.
    InFlight,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub requests_sent: Vec<u64>,
    pub gossips_sent: Vec<u64>,
    pub evidence_sent: Vec<u64>,
    pub gap_histogram: BTreeMap<u64, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gap_samples: Vec<GapSample>,
    pub tasks_started: u64,
    pub tasks_succeeded: u64,
    pub tasks_reversed: u64,
    pub tasks_aborted: u64,
    pub tasks_in_flight: u64,
    pub conflicts_detected: u64,
    pub forged_accepted: u64,
    pub blocks: u64,
    pub ticks: u64,
}

impl Metrics {
    fn new(n: usize) -> Self {
        Metrics {
            requests_sent: alloc::vec![0; n],
            gossips_sent: alloc::vec![0; n],
            evidence_sent: alloc::vec![0; n],
            ..Metrics::default()
        }
    }

    /// Most requests sent by any one system.
    pub fn requests(&self) -> u64 {
        self.requests_sent.iter().copied().max().unwrap_or(0)
    }

    /// Most gossip messages sent by any one system.
    pub fn gossips(&self) -> u64 {
        self.gossips_sent.iter().copied().max().unwrap_or(0)
    }

    pub fn requests_total(&self) -> u64 {
        self.requests_sent.iter().sum()
    }

    pub fn gossips_total(&self) -> u64 {
        self.gossips_sent.iter().sum()
    }

    pub fn gap_count(&self) -> u64 {
        self.gap_histogram.values().sum()
    }

    pub fn mean_gap(&self) -> f64 {
        let n = self.gap_count();
        if n == 0 {
            return 0.0;
        }
        self.gap_histogram.iter().map(|(g, c)| *g as f64 * *c as f64).sum::<f64>() / n as f64
    }

    pub fn gap_variance(&self) -> f64 {
        let n = self.gap_count();
        if n == 0 {
            return 0.0;
        }
        let mean = self.mean_gap();
        self.gap_histogram.iter().map(|(g, c)| (*g as f64 - mean) * (*g as f64 - mean) * *c as f64).sum::<f64>()
            / n as f64
    }

    /// Smallest gap at or below which a `q` fraction of the samples fall.
    pub fn gap_percentile(&self, q: f64) -> u64 {
        let n = self.gap_count();
        let need = q * n as f64;
        let mut cum = 0u64;
        for (g, c) in &self.gap_histogram {
            cum += c;
            if cum as f64 >= need {
                return *g;
            }
        }
        0
    }

    /// Task counters add up.
    pub fn tasks_balanced(&self) -> bool {
        self.tasks_started == self.tasks_succeeded + self.tasks_reversed + self.tasks_aborted + self.tasks_in_flight
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    TaskStarted { task: u64, peer: SystemId, local_expiry: Height, remote_expiry: Height },
    Phase { task: u64, phase: Phase, height: Height },
    TaskSettled { task: u64, result: TaskResult },
    Evidence { accused: SystemId },
    Fork { height: Height },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tick: u64,
    pub system: SystemId,
    #[serde(flatten)]
    pub event: Event,
}

/// Both sides of one task as they ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub plan_id: u64,
    pub initiator: SystemId,
    pub responder: SystemId,
    pub ctx_initiator: crate::types::ContractTx,
    pub ctx_responder: crate::types::ContractTx,
    pub outcomes: [Option<SideOutcome>; 2],
    pub result: TaskResult,
    /// Whether the responder's branch was the adversary's second branch.
    pub on_branch_b: bool,
    /// Whether either side acted on a forged `check` answer.
    pub forged: bool,
}

/// Outcome of a double-task attack run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub adversary: SystemId,
    pub victims: [SystemId; 2],
    pub detected: bool,
    pub detection_tick: Option<u64>,
    pub evidence_count: u64,
    pub victim_outcomes: [Option<SideOutcome>; 2],
    /// First tick at which each victim's chain reached its contract expiry.
    pub victim_expiry_ticks: [Option<u64>; 2],
    pub detected_before_expiry: bool,
    pub double_completion: bool,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub metrics: Metrics,
    pub transcript: Vec<TranscriptEntry>,
    pub tasks: Vec<TaskRecord>,
    /// Final chains of systems `0..n` (branch A for a forking adversary).
    pub chains: Vec<Chain>,
    pub attack: Option<AttackReport>,
}

#[derive(Clone, Debug)]
enum Payload {
    Offer(TaskPlan),
    Push(ViewList),
    PullReq(PullRequest),
    PullResp(PullResponse),
    Evidence(ConflictEvidence),
    CheckReq { task: u64, timeout: bool, hashes: Vec<HashDigest>, view: View },
    CheckResp { task: u64, timeout: bool, results: Vec<Option<Height>>, view: View, forged: bool },
}

#[derive(Clone, Debug)]
struct Envelope {
    from: SystemId,
    to_actor: usize,
    payload: Payload,
}

#[derive(Clone, Debug)]
struct Slot {
    s: CbcSession,
    waiting_reply: bool,
    next_action: u64,
    expiry_tick: Option<u64>,
}

#[derive(Clone, Debug)]
struct Actor {
    id: SystemId,
    branch: Option<Branch>,
    chain: Chain,
    gossip: GossipState,
    /// Largest observed lead of each peer's next block height over our own.
    /// Chains grow at the same rate, so the freshest view gives the true lead.
    lead: BTreeMap<SystemId, i64>,
    slots: BTreeMap<u64, Slot>,
    mempool: Vec<(u64, Transaction)>,
    rng: ChaCha8Rng,
    dirty: bool,
    last_push: Option<u64>,
    last_target: Option<HashDigest>,
    /// Tick each outstanding pull was sent, by subject.
    pulls_out: BTreeMap<SystemId, u64>,
    /// Tick at which each victim-side contract reached its expiry (attack bookkeeping).
    expiry_ticks: BTreeMap<u64, u64>,
}

#[derive(Clone, Debug)]
struct TaskState {
    record: TaskRecord,
}

struct Sim<'c> {
    cfg: &'c SimConfig,
    dir: Vec<SystemConfig>,
    adj: Vec<Vec<SystemId>>,
    actors: Vec<Actor>,
    shadow: Option<usize>,
    script: Option<AttackScript>,
    attack_tasks: Vec<u64>,
    taps: Vec<Option<Adv1Tap>>,
    queue: BTreeMap<(u64, u64), Envelope>,
    seq: u64,
    net: ChaCha8Rng,
    tick: u64,
    blocks: u64,
    next_task: u64,
    tasks: BTreeMap<u64, TaskState>,
    finished: Vec<TaskRecord>,
    metrics: Metrics,
    transcript: Vec<TranscriptEntry>,
    detection_tick: Option<u64>,
}

/// Runs a scenario to completion.
pub fn run(cfg: &SimConfig) -> Result<SimOutput, ConfigError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg);
    sim.run();
    Ok(sim.finish())
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<'c> Sim<'c> {
    fn new(cfg: &'c SimConfig) -> Self {
        let dir = cfg.directory();
        let adj = cfg.topology.neighbors(cfg.n);
        let mut actors: Vec<Actor> = dir
            .iter()
            .map(|c| {
                let mut chain = Chain::new(c.clone());
                for _ in 0..=c.t {
                    chain.commit(Vec::new()).expect("empty block");
                }
                Actor {
                    id: c.id,
                    branch: None,
                    gossip: GossipState::new(c.id),
                    chain,
                    lead: BTreeMap::new(),
                    slots: BTreeMap::new(),
                    mempool: Vec::new(),
                    rng: stream(cfg.seed, c.id.0 as u64 + 1),
                    dirty: false,
                    last_push: None,
                    last_target: None,
                    pulls_out: BTreeMap::new(),
                    expiry_ticks: BTreeMap::new(),
                }
            })
            .collect();
        let initial: Vec<View> = actors.iter().map(|a| a.chain.view().expect("bootstrapped")).collect();
        for a in &mut actors {
            for (i, v) in initial.iter().enumerate() {
                a.gossip.list.entries.insert(SystemId(i as u16), v.clone());
                let next = (v.height + dir[i].t + 2) as i64;
                a.lead.insert(SystemId(i as u16), next - a.chain.height() as i64);
            }
        }
        let taps = dir
            .iter()
            .map(|c| {
                (cfg.adversary.kind == AdversaryKind::Adv1).then(|| Adv1Tap {
                    q: c.q,
                    r: c.r,
                    controlled: cfg.adversary.controlled_nodes(c),
                    m: min_confirmations(c.q, c.r, cfg.p_fail_target).map(|x| x.m).unwrap_or(c.q),
                })
            })
            .collect();
        let script = match (cfg.adversary.kind, cfg.adversary.target_system) {
            (AdversaryKind::Adv2, Some(adv)) => {
                let [a, b] = cfg.victims(adv).expect("validated");
                Some(adv2_double_task(adv, a, b, cfg.attack.fork_tick))
            }
            _ => None,
        };
        Sim {
            metrics: Metrics::new(cfg.n as usize),
            cfg,
            dir,
            adj,
            actors,
            shadow: None,
            script,
            attack_tasks: Vec::new(),
            taps,
            queue: BTreeMap::new(),
            seq: 0,
            net: stream(cfg.seed, 0),
            tick: 0,
            blocks: 0,
            next_task: 0,
            tasks: BTreeMap::new(),
            finished: Vec::new(),
            transcript: Vec::new(),
            detection_tick: None,
        }
    }

    fn adversary(&self) -> Option<SystemId> {
        self.script.as_ref().map(|s| s.adversary)
    }

    fn honest(&self, a: usize) -> bool {
        Some(self.actors[a].id) != self.adversary()
    }

    fn log(&mut self, system: SystemId, event: Event) {
        self.transcript.push(TranscriptEntry { tick: self.tick, system, event });
    }

    fn route(&self, to: SystemId, from: SystemId) -> usize {
        if let (Some(sh), Some(script)) = (self.shadow, &self.script) {
            if to == script.adversary && script.branch_for(from) == Branch::B {
                return sh;
            }
        }
        to.index()
    }

    fn neighbors(&self, a: usize) -> Vec<SystemId> {
        let actor = &self.actors[a];
        let all = &self.adj[actor.id.index()];
        match (actor.branch, &self.script) {
            (Some(b), Some(script)) => all.iter().copied().filter(|s| script.branch_for(*s) == b).collect(),
            _ => all.clone(),
        }
    }

    fn send(&mut self, from_actor: usize, to: SystemId, payload: Payload, extra: u64) {
        let from = self.actors[from_actor].id;
        let counter = match &payload {
            Payload::CheckReq { .. } => Some(&mut self.metrics.requests_sent),
            Payload::Push(_) | Payload::PullReq(_) | Payload::PullResp(_) => Some(&mut self.metrics.gossips_sent),
            Payload::Evidence(_) => {
                self.metrics.evidence_sent[from.index()] += 1;
                Some(&mut self.metrics.gossips_sent)
            }
            Payload::Offer(_) | Payload::CheckResp { .. } => None,
        };
        if let Some(c) = counter {
            c[from.index()] += 1;
        }
        let j = self.cfg.jitter;
        let delay = if j == 0 {
            self.cfg.latency
        } else {
            (self.cfg.latency + self.net.random_range(0..=2 * j)).saturating_sub(j)
        };
        let to_actor = self.route(to, from);
        self.queue.insert((self.tick + delay + extra, self.seq), Envelope { from, to_actor, payload });
        self.seq += 1;
    }

    fn run(&mut self) {
        let cfg = self.cfg;
        loop {
            self.tick += 1;
            if self.tick.is_multiple_of(cfg.block_interval) {
                if let Some(script) = &self.script {
                    if self.tick == script.fork_tick && self.shadow.is_none() {
                        self.start_attack();
                    }
                }
                for a in 0..self.actors.len() {
                    self.block_phase(a);
                }
                self.blocks += 1;
            }
            self.deliver();
            if self.blocks <= cfg.num_blocks {
                self.sample_gaps();
            }
            let settled = self.tasks.is_empty()
                && self.actors.iter().all(|a| a.mempool.is_empty())
                && self.script.as_ref().is_none_or(|s| self.tick > s.fork_tick);
            if self.blocks >= cfg.num_blocks && (settled || self.blocks >= cfg.num_blocks + cfg.drain_blocks_max) {
                break;
            }
        }
        self.metrics.ticks = self.tick;
        self.metrics.blocks = self.blocks;
    }

    fn producing(&self) -> bool {
        self.blocks < self.cfg.num_blocks
    }

    fn block_phase(&mut self, a: usize) {
        let cfg = self.cfg;
        let tick = self.tick;
        let forked_now = self.shadow.is_some() && self.script.as_ref().is_some_and(|s| s.fork_tick == tick);
        let is_adv_actor = !self.honest(a);
        if self.producing() && !is_adv_actor {
            let count = draw_task_count(cfg.p_c, &mut self.actors[a].rng);
            for _ in 0..count {
                let me = self.actors[a].id;
                let adv = self.adversary();
                let candidates: Vec<SystemId> = (0..cfg.n)
                    .map(SystemId)
                    .filter(|&s| s != me && Some(s) != adv && !self.actors[a].gossip.blacklist.contains(&s))
                    .collect();
                if candidates.is_empty() {
                    break;
                }
                let peer = candidates[self.actors[a].rng.random_range(0..candidates.len())];
                self.initiate(a, peer, None);
            }
        }
        if forked_now && is_adv_actor {
            // the fork itself produced this tick's block on both branches
            self.after_block(a, false);
            return;
        }
        let ids: Vec<u64> = self.actors[a].slots.keys().copied().collect();
        for task in &ids {
            let slot = self.actors[a].slots.get_mut(task).expect("listed");
            if slot.s.phase == Phase::Init {
                let peer = slot.s.peer();
                let actor = &mut self.actors[a];
                let slot = actor.slots.get_mut(task).expect("listed");
                if actor.gossip.blacklist.contains(&peer) {
                    slot.s.mark_peer_byzantine();
                } else {
                    let st = slot.s.start_session(&actor.chain);
                    slot.next_action = tick + cfg.poll_delay;
                    if let Some(tx) = st.commit {
                        actor.mempool.push((*task, tx));
                    }
                }
                self.note_phase(a, *task, Phase::Init);
            }
        }
        let mempool = core::mem::take(&mut self.actors[a].mempool);
        let related = !mempool.is_empty();
        let owners: BTreeMap<HashDigest, u64> = mempool.iter().map(|(t, tx)| (tx.id, *t)).collect();
        let (_, rejected) = self.actors[a].chain.commit_valid(mempool.into_iter().map(|(_, tx)| tx).collect());
        for tx in rejected {
            if let Some(&task) = owners.get(&tx.id) {
                if let Some(slot) = self.actors[a].slots.get_mut(&task) {
                    let before = slot.s.phase;
                    slot.s.on_rejected(&tx.id);
                    self.note_phase(a, task, before);
                }
            }
        }
        self.after_block(a, related);
    }

    fn after_block(&mut self, a: usize, related: bool) {
        let cfg = self.cfg;
        let tick = self.tick;
        let own = self.actors[a].chain.view().expect("bootstrapped");
        self.actors[a].gossip.list.refresh_own(own);
        let ids: Vec<u64> = self.actors[a].slots.keys().copied().collect();
        for task in ids {
            let actor = &mut self.actors[a];
            let slot = actor.slots.get_mut(&task).expect("listed");
            let before = slot.s.phase;
            slot.s.on_local_height(&actor.chain);
            if slot.expiry_tick.is_none() && slot.s.poll_window_closed(&actor.chain) {
                slot.expiry_tick = Some(tick);
                actor.expiry_ticks.insert(task, tick);
            }
            self.note_phase(a, task, before);
            self.session_actions(a, task);
        }
        let timer = self.actors[a].last_push.is_none_or(|at| tick >= at + cfg.push_timer);
        if related || (cfg.rebroadcast && self.actors[a].dirty) || timer {
            self.push(a);
        }
    }

    fn push(&mut self, a: usize) {
        self.actors[a].last_push = Some(self.tick);
        self.actors[a].dirty = false;
        let neighbors = self.neighbors(a);
        let actor = &mut self.actors[a];
        let sends = push_round(&actor.gossip.list, &neighbors, self.cfg.g, &mut actor.rng);
        for (to, list) in sends {
            self.send(a, to, Payload::Push(list), 0);
        }
    }

    /// Polls, timeout queries, and the local timeout for Byzantine peers.
    fn session_actions(&mut self, a: usize, task: u64) {
        let cfg = self.cfg;
        let tick = self.tick;
        let Some(slot) = self.actors[a].slots.get(&task) else { return };
        let s = &slot.s;
        let peer = s.peer();
        match s.phase {
            Phase::CtxCommitted => {
                let committed = self.actors[a].chain.is_committed(&s.ctx_tx().id);
                if committed && !slot.waiting_reply && tick >= slot.next_action {
                    let hashes = s.poll_hashes().to_vec();
                    let view = self.actors[a].chain.view().expect("bootstrapped");
                    self.actors[a].slots.get_mut(&task).expect("listed").waiting_reply = true;
                    self.send(a, peer, Payload::CheckReq { task, timeout: false, hashes, view }, 0);
                }
            }
            Phase::TxCommitted | Phase::AwaitExpiry => {
                let actor = &self.actors[a];
                if !s.poll_window_closed(&actor.chain) {
                    return;
                }
                if s.peer_byzantine {
                    let actor = &mut self.actors[a];
                    let slot = actor.slots.get_mut(&task).expect("listed");
                    let before = slot.s.phase;
                    let st = slot.s.timeout(&mut actor.chain, None, None);
                    if let Some(tx) = st.commit {
                        actor.mempool.push((task, tx));
                    }
                    self.note_phase(a, task, before);
                    return;
                }
                let view_ok = s.await_remote_expiry(&actor.gossip.list);
                let fallback = actor.chain.height() >= s.ctx.local_expiry + cfg.timeout_fallback;
                if !slot.waiting_reply && tick >= slot.next_action && (view_ok || fallback) {
                    let hashes = s.timeout_hashes().to_vec();
                    let view = actor.chain.view().expect("bootstrapped");
                    self.actors[a].slots.get_mut(&task).expect("listed").waiting_reply = true;
                    self.send(a, peer, Payload::CheckReq { task, timeout: true, hashes, view }, 0);
                }
            }
            _ => {}
        }
    }

    fn note_phase(&mut self, a: usize, task: u64, before: Phase) {
        let actor = &self.actors[a];
        let Some(slot) = actor.slots.get(&task) else { return };
        let phase = slot.s.phase;
        if phase == before {
            return;
        }
        let (system, height, outcome) = (actor.id, actor.chain.height(), slot.s.outcome);
        self.log(system, Event::Phase { task, phase, height });
        if phase.is_terminal() {
            self.actors[a].slots.remove(&task);
            let side = if self.tasks.get(&task).is_some_and(|t| t.record.initiator == system) { 0 } else { 1 };
            self.settle_side(task, side, outcome.unwrap_or(SideOutcome::Aborted));
        }
    }

    fn settle_side(&mut self, task: u64, side: usize, outcome: SideOutcome) {
        let Some(state) = self.tasks.get_mut(&task) else { return };
        state.record.outcomes[side] = Some(outcome);
        let [Some(x), Some(y)] = state.record.outcomes else { return };
        let result = if x == SideOutcome::Completed && y == SideOutcome::Completed {
            TaskResult::Succeeded
        } else if x == SideOutcome::Reversed || y == SideOutcome::Reversed {
            TaskResult::Reversed
        } else {
            TaskResult::Aborted
        };
        let mut state = self.tasks.remove(&task).expect("present");
        state.record.result = result;
        match result {
            TaskResult::Succeeded => self.metrics.tasks_succeeded += 1,
            TaskResult::Reversed => self.metrics.tasks_reversed += 1,
            _ => self.metrics.tasks_aborted += 1,
        }
        let system = state.record.initiator;
        self.finished.push(state.record);
        self.log(system, Event::TaskSettled { task, result });
    }

    fn make_target(&mut self, a: usize, task: u64, owner: SystemId, chain_it: bool) -> Transaction {
        let mut payload = alloc::vec![b't'];
        payload.extend_from_slice(&task.to_be_bytes());
        payload.extend_from_slice(&owner.0.to_be_bytes());
        let pre = if chain_it { self.actors[a].last_target.into_iter().collect() } else { Vec::new() };
        Transaction::target(payload, pre, owner)
    }

    fn estimate_height(&self, a: usize, peer: SystemId) -> Height {
        let actor = &self.actors[a];
        let lead = actor.lead.get(&peer).copied().unwrap_or(0);
        (actor.chain.height() as i64 + lead).max(0) as Height
    }

    fn initiate(&mut self, a: usize, peer: SystemId, own_target: Option<Transaction>) -> u64 {
        let cfg = self.cfg;
        let task = self.next_task;
        self.next_task += 1;
        let me = self.actors[a].id;
        let chain_it =
            cfg.faults.chained_target_prob > 0.0 && self.actors[a].rng.random_bool(cfg.faults.chained_target_prob);
        let tx_i = match own_target {
            Some(tx) => tx,
            None => self.make_target(a, task, me, chain_it),
        };
        self.actors[a].last_target = Some(tx_i.id);
        let tx_j = self.make_target(a, task, peer, false);
        let jit = cfg.expiry_jitter;
        let (ji, jj) = if jit > 0 {
            let r = &mut self.actors[a].rng;
            (r.random_range(0..=jit), r.random_range(0..=jit))
        } else {
            (0, 0)
        };
        let h_i = self.actors[a].chain.height() + cfg.expiry_margin(self.dir[me.index()].k) + ji;
        let h_j = self.estimate_height(a, peer) + cfg.expiry_margin(self.dir[peer.index()].k) + jj;
        let plan = TaskPlan::new(task, me, peer, tx_i, tx_j, h_i, h_j);
        let on_b = self.actors[a].branch == Some(Branch::B);
        let record = TaskRecord {
            plan_id: task,
            initiator: me,
            responder: peer,
            ctx_initiator: plan.ctx_initiator,
            ctx_responder: plan.ctx_responder(),
            outcomes: [None, None],
            result: TaskResult::InFlight,
            on_branch_b: on_b,
            forged: false,
        };
        self.tasks.insert(task, TaskState { record });
        self.metrics.tasks_started += 1;
        self.log(me, Event::TaskStarted { task, peer, local_expiry: h_i, remote_expiry: h_j });
        let (mut si, _) = plan.sessions(cfg.poll_interval);
        let st = si.start_session(&self.actors[a].chain);
        let tick = self.tick;
        self.actors[a]
            .slots
            .insert(task, Slot { s: si, waiting_reply: false, next_action: tick + cfg.poll_delay, expiry_tick: None });
        match st.commit {
            Some(tx) => {
                self.actors[a].mempool.push((task, tx));
                self.note_phase(a, task, Phase::Init);
                let extra = if cfg.faults.submit_delay_max > 0 {
                    self.actors[a].rng.random_range(0..=cfg.faults.submit_delay_max)
                } else {
                    0
                };
                self.send(a, peer, Payload::Offer(plan), extra);
            }
            None => {
                self.settle_side(task, 1, SideOutcome::Aborted);
                self.note_phase(a, task, Phase::Init);
            }
        }
        task
    }

    fn start_attack(&mut self) {
        let script = self.script.clone().expect("attack");
        let j = script.adversary.index();
        let tip = self.actors[j].chain.tip();
        let (a, b) = adv2_fork(&self.actors[j].chain, tip).expect("tip is in range");
        let mut shadow = self.actors[j].clone();
        shadow.chain = b;
        shadow.branch = Some(Branch::B);
        shadow.rng = stream(self.cfg.seed, 1_000 + j as u64);
        self.actors[j].chain = a;
        self.actors[j].branch = Some(Branch::A);
        self.actors.push(shadow);
        let sh = self.actors.len() - 1;
        self.shadow = Some(sh);
        self.log(script.adversary, Event::Fork { height: tip });
        let mut payload = b"double".to_vec();
        payload.extend_from_slice(&script.adversary.0.to_be_bytes());
        let same = Transaction::target(payload, Vec::new(), script.adversary);
        let t1 = self.initiate(j, script.victims[0], Some(same.clone()));
        let t2 = self.initiate(sh, script.victims[1], Some(same));
        self.attack_tasks = alloc::vec![t1, t2];
    }

    /// Delivers everything due this tick. Systems whose view list changed
    /// relay it right away, at most once per tick.
    fn deliver(&mut self) {
        loop {
            while let Some(entry) = self.queue.first_entry() {
                if entry.key().0 > self.tick {
                    break;
                }
                let env = entry.remove();
                self.handle(env);
            }
            if !self.cfg.rebroadcast {
                return;
            }
            let relays: Vec<usize> = (0..self.actors.len())
                .filter(|&a| self.actors[a].dirty && self.actors[a].last_push != Some(self.tick))
                .collect();
            if relays.is_empty() {
                return;
            }
            for a in relays {
                self.push(a);
            }
        }
    }

    fn handle(&mut self, env: Envelope) {
        let a = env.to_actor;
        let from = env.from;
        let tick = self.tick;
        match env.payload {
            Payload::Offer(plan) => {
                let (_, sj) = plan.sessions(self.cfg.poll_interval);
                let blocked = self.actors[a].gossip.blacklist.contains(&from);
                if blocked {
                    self.settle_side(plan.id, 1, SideOutcome::Aborted);
                } else {
                    self.actors[a]
                        .slots
                        .insert(plan.id, Slot { s: sj, waiting_reply: false, next_action: tick, expiry_tick: None });
                }
            }
            Payload::Push(list) => {
                let out = self.actors[a].gossip.on_push(&list, &self.dir);
                self.after_merge(a, out);
            }
            Payload::PullReq(req) => {
                if let Some(resp) = serve_pull(&self.actors[a].chain, &req) {
                    self.send(a, from, Payload::PullResp(resp), 0);
                }
            }
            Payload::PullResp(resp) => {
                self.actors[a].pulls_out.remove(&resp.subject);
                let out = self.actors[a].gossip.on_pull_response(&resp, &self.dir);
                self.after_merge(a, out);
            }
            Payload::Evidence(ev) => self.on_evidence(a, &ev, false),
            Payload::CheckReq { task, timeout, hashes, view } => {
                let out = self.actors[a].gossip.on_view(from, &view, &self.dir);
                self.after_merge(a, out);
                let mut results: Vec<Option<Height>> = hashes.iter().map(|h| self.actors[a].chain.check(h)).collect();
                let mut forged = false;
                if let Some(tap) = self.taps[self.actors[a].id.index()] {
                    if adv1_intercept(&tap, self.cfg.channel_mode, &mut self.net) {
                        forged = true;
                        results = alloc::vec![None; hashes.len()];
                    }
                }
                let view = self.actors[a].chain.view().expect("bootstrapped");
                self.send(a, from, Payload::CheckResp { task, timeout, results, view, forged }, 0);
            }
            Payload::CheckResp { task, timeout, results, view, forged } => {
                let out = self.actors[a].gossip.on_view(from, &view, &self.dir);
                self.after_merge(a, out);
                if forged {
                    self.metrics.forged_accepted += 1;
                    if let Some(state) = self.tasks.get_mut(&task) {
                        state.record.forged = true;
                    }
                }
                self.on_reply(a, task, timeout, &results, &view);
            }
        }
    }

    fn on_reply(&mut self, a: usize, task: u64, timeout: bool, results: &[Option<Height>], view: &View) {
        let cfg = self.cfg;
        let tick = self.tick;
        let actor = &mut self.actors[a];
        let Some(slot) = actor.slots.get_mut(&task) else { return };
        slot.waiting_reply = false;
        let before = slot.s.phase;
        if !timeout {
            let st = slot.s.on_poll_reply(&actor.chain, results[0]);
            if st.phase == Phase::CtxCommitted {
                slot.next_action = tick + cfg.poll_interval;
            }
            if let Some(tx) = st.commit {
                actor.mempool.push((task, tx));
            }
        } else if matches!(slot.s.phase, Phase::TxCommitted | Phase::AwaitExpiry) {
            if slot.s.timeout_reply_is_grounded(view) || slot.s.peer_byzantine {
                let st = slot.s.timeout(&mut actor.chain, results[0], results.get(1).copied().flatten());
                if let Some(tx) = st.commit {
                    actor.mempool.push((task, tx));
                }
            } else {
                slot.next_action = tick + cfg.poll_interval;
            }
        }
        self.note_phase(a, task, before);
    }

    fn after_merge(&mut self, a: usize, out: MergeOutcome) {
        let tick = self.tick;
        if out.updated {
            let actor = &mut self.actors[a];
            actor.dirty = true;
            let own = actor.chain.height() as i64;
            for (s, v) in &actor.gossip.list.entries {
                let lead = (v.height + self.dir[s.index()].t + 2) as i64 - own;
                let best = actor.lead.entry(*s).or_insert(lead);
                *best = (*best).max(lead);
            }
        }
        let me = self.actors[a].id;
        let patience = 2 * (self.cfg.latency + self.cfg.jitter) + 2;
        for s in out.pulls {
            let outstanding = self.actors[a].pulls_out.get(&s).is_some_and(|&at| tick < at + patience);
            if s != me && !outstanding {
                self.actors[a].pulls_out.insert(s, tick);
                let req = self.actors[a].gossip.pull_request(s);
                self.send(a, s, Payload::PullReq(req), 0);
            }
        }
        if self.honest(a) {
            for ev in out.conflicts {
                self.on_evidence(a, &ev, true);
            }
        }
    }

    fn on_evidence(&mut self, a: usize, ev: &ConflictEvidence, own: bool) {
        if !self.honest(a) {
            return;
        }
        let Ok(fx) = self.actors[a].gossip.handle_evidence(ev, &self.dir) else { return };
        if !fx.newly_accused {
            return;
        }
        let me = self.actors[a].id;
        if own {
            self.metrics.conflicts_detected += 1;
        }
        if self.detection_tick.is_none() && Some(fx.accused) == self.adversary() {
            self.detection_tick = Some(self.tick);
        }
        self.log(me, Event::Evidence { accused: fx.accused });
        for to in self.adj[me.index()].clone() {
            self.send(a, to, Payload::Evidence(ev.clone()), 0);
        }
        let ids: Vec<u64> = self.actors[a].slots.keys().copied().collect();
        for task in ids {
            let slot = self.actors[a].slots.get_mut(&task).expect("listed");
            if slot.s.peer() == fx.accused {
                let before = slot.s.phase;
                slot.s.mark_peer_byzantine();
                self.note_phase(a, task, before);
            }
        }
    }

    fn sample_gaps(&mut self) {
        let n = self.cfg.n as usize;
        // once exposed, the adversary is no longer tracked, so it is left out
        let adv = self.adversary();
        let truths: Vec<Option<Height>> = self.actors[..n]
            .iter()
            .map(|a| if Some(a.id) == adv { None } else { a.chain.finalized_height() })
            .collect();
        let lists: Vec<&ViewList> =
            self.actors[..n].iter().filter(|a| Some(a.id) != adv).map(|a| &a.gossip.list).collect();
        let samples = sample_gap(&lists, &truths, self.tick);
        for s in &samples {
            *self.metrics.gap_histogram.entry(s.gap).or_insert(0) += 1;
        }
        if self.cfg.record_gap_samples {
            self.metrics.gap_samples.extend(samples);
        }
    }

    fn finish(mut self) -> SimOutput {
        let leftover: Vec<u64> = self.tasks.keys().copied().collect();
        for task in leftover {
            let state = self.tasks.remove(&task).expect("listed");
            self.metrics.tasks_in_flight += 1;
            self.finished.push(state.record);
        }
        self.finished.sort_by_key(|r| r.plan_id);
        let attack = self.script.clone().map(|script| {
            let records: Vec<&TaskRecord> =
                self.attack_tasks.iter().filter_map(|t| self.finished.iter().find(|r| r.plan_id == *t)).collect();
            let mut victim_outcomes = [None, None];
            let mut victim_expiry_ticks = [None, None];
            for (i, v) in script.victims.iter().enumerate() {
                if let Some(r) = records.iter().find(|r| r.responder == *v) {
                    victim_outcomes[i] = r.outcomes[1];
                    victim_expiry_ticks[i] = self.actors[v.index()].expiry_ticks.get(&r.plan_id).copied();
                }
            }
            let later = victim_expiry_ticks.iter().flatten().max().copied();
            let detected = self.detection_tick.is_some();
            AttackReport {
                adversary: script.adversary,
                victims: script.victims,
                detected,
                detection_tick: self.detection_tick,
                evidence_count: self.metrics.evidence_sent.iter().sum(),
                victim_outcomes,
                victim_expiry_ticks,
                detected_before_expiry: matches!((self.detection_tick, later), (Some(d), Some(l)) if d <= l),
                double_completion: victim_outcomes.iter().all(|o| *o == Some(SideOutcome::Completed)),
            }
        });
        let n = self.cfg.n as usize;
        let chains = self.actors.drain(..n).map(|a| a.chain).collect();
        SimOutput { metrics: self.metrics, transcript: self.transcript, tasks: self.finished, chains, attack }
    }
}
