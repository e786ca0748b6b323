//! Cluster runtime: binds protocol machines, durable logs, shards, the RLSM
//! manager and closed-loop clients to the simulator.
//!
//! Node 0 is the coordinator; nodes `1..=participants` each own a shard.
//! Protocol machines, resolvers and RLSM levels are volatile and vanish in a
//! crash. Logs and shards survive. Every observable step lands in the global
//! trace, which is the only input the checkers need.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::delay::{default_crash_timeout, DelayError, DelayMatrix};
use crate::kvstore::{
    collect_metrics, Generator, Metrics, NoReason, RetryPolicy, Shard, TxnBody, Workload,
    WorkloadError,
};
use crate::model::{
    ms_f64, Decision, LogKind, LogMeta, Message, Micros, NodeId, Payload, ProtocolKind, Role,
    TxnId, TxnIdAllocator, TxnOps, Vote,
};
use crate::protocols::{
    Action, CoordinatorState, ParticipantState, ProtocolEvent, ReplyTiming, StartTxn, StepCtx,
    TimerKind, ValidationReport,
};
use crate::recovery::{
    answer_participant_query, Appended, DurableLog, RecoveryOutcome, ResolveMode, Resolver,
    ResolverStep,
};
use crate::rlsm::{DetectionRule, RlsmError, RlsmEvent, RlsmManager, RobustnessLevel};
use crate::sim::{FailureSchedule, LinkSpec, ScheduleError, SimEvent, SimWorld, Sink};
use crate::trace::{FinalOutcome, GlobalTrace, TraceEvent};
use crate::tuner::Collector;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Rlsm(#[from] RlsmError),
    #[error("a cluster needs at least one participant")]
    NoParticipants,
    #[error("{0} is not a node of this cluster")]
    UnknownNode(NodeId),
    #[error("link delay bound {bound_ms} ms exceeds U = {u_ms} ms")]
    DishonestLink { bound_ms: f64, u_ms: f64 },
    #[error("unknown protocol mode {0:?}")]
    BadMode(String),
}

/// Fixed protocol or RLSM-driven selection.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum ProtocolMode {
    #[default]
    Auto,
    Fixed(ProtocolKind),
}

impl fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolMode::Auto => f.write_str("auto"),
            ProtocolMode::Fixed(p) => f.write_str(p.name()),
        }
    }
}

impl FromStr for ProtocolMode {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let p = match s.to_ascii_lowercase().as_str() {
            "auto" => return Ok(ProtocolMode::Auto),
            "flac_ff" | "ff" => ProtocolKind::FlacFf,
            "flac_cf" | "cf" => ProtocolKind::FlacCf,
            "flac_nf" | "nf" | "ec" => ProtocolKind::FlacNf,
            "2pc" | "two_pc" | "twopc" => ProtocolKind::TwoPc,
            _ => return Err(ClusterError::BadMode(s.to_string())),
        };
        Ok(ProtocolMode::Fixed(p))
    }
}

impl Serialize for ProtocolMode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ProtocolMode::Auto => s.serialize_str("auto"),
            ProtocolMode::Fixed(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ProtocolMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every link has `base + U[0, jitter]` delay and the protocols assume
/// `U = sigma · r`, unless a link override says otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub sigma_ms: f64,
    pub r: f64,
    pub base_ms: f64,
    pub jitter_ms: f64,
    #[serde(default, rename = "link", skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkOverride>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    pub a: NodeId,
    pub b: NodeId,
    pub sigma_ms: f64,
    pub base_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
}

impl NetworkConfig {
    /// The one fixed link delay, if every link has it.
    pub fn uniform_delay(&self) -> Option<Micros> {
        let base = ms_f64(self.base_ms);
        let same = self
            .links
            .iter()
            .all(|l| l.jitter_ms == 0.0 && ms_f64(l.base_ms) == base);
        (self.jitter_ms == 0.0 && same).then_some(base)
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            sigma_ms: 5.0,
            r: 1.0,
            base_ms: 4.0,
            jitter_ms: 1.0,
            links: Vec::new(),
        }
    }
}

/// A single transaction issued at a fixed time, outside the workload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedTxn {
    pub at: Micros,
    pub protocol: ProtocolKind,
    pub participants: Vec<NodeId>,
    #[serde(default)]
    pub force_no: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub name: String,
    pub seed: u64,
    pub participants: u32,
    pub network: NetworkConfig,
    pub clock_skew_us: BTreeMap<NodeId, i64>,
    /// Defaults to ten times the largest U.
    pub crash_timeout: Option<Micros>,
    pub mode: ProtocolMode,
    pub alpha_cf: u32,
    pub alpha_nf: u32,
    pub workload: Workload,
    pub retry: RetryPolicy,
    pub failures: FailureSchedule,
    /// Clients stop starting new transactions at this time.
    pub duration: Micros,
    /// Metrics ignore replies before this time.
    pub warmup: Micros,
    pub horizon: Option<Micros>,
    pub scripted: Vec<ScriptedTxn>,
    pub record_messages: bool,
    /// Test hook: the recorded decision of this (txn, node) is flipped.
    pub forge_decision: Option<(TxnId, NodeId)>,
    /// Reward batch size for the collector.
    pub batch_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 1,
            participants: 3,
            network: NetworkConfig::default(),
            clock_skew_us: BTreeMap::new(),
            crash_timeout: None,
            mode: ProtocolMode::Auto,
            alpha_cf: 1,
            alpha_nf: 1,
            workload: Workload::default(),
            retry: RetryPolicy::default(),
            failures: FailureSchedule::none(),
            duration: 1_000_000,
            warmup: 0,
            horizon: None,
            scripted: Vec::new(),
            record_messages: true,
            forge_decision: None,
            batch_size: 32,
        }
    }
}

impl ClusterConfig {
    pub fn coordinator(&self) -> NodeId {
        NodeId(0)
    }

    pub fn participant_ids(&self) -> Vec<NodeId> {
        (1..=self.participants).map(NodeId).collect()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        (0..=self.participants).map(NodeId).collect()
    }

    pub fn delay_matrix(&self) -> Result<DelayMatrix, DelayError> {
        let mut m = DelayMatrix::uniform(self.node_ids(), self.network.sigma_ms, self.network.r)?;
        for l in &self.network.links {
            m.set(l.a, l.b, l.sigma_ms)?;
        }
        Ok(m)
    }

    pub fn effective_crash_timeout(&self) -> Result<Micros, DelayError> {
        Ok(match self.crash_timeout {
            Some(c) => c,
            None => default_crash_timeout(&self.delay_matrix()?),
        })
    }

    /// Default extra one-way delay of an injected network failure: a delayed
    /// message lands at nine tenths of the crash timeout, late enough to miss
    /// every window yet still short of being taken for a crash.
    pub fn default_nf_extra(&self) -> Result<Micros, DelayError> {
        let ct = self.effective_crash_timeout()?;
        Ok((ct * 9 / 10).saturating_sub(self.delay_matrix()?.max_u()))
    }

    /// Last time anything is scheduled to happen on purpose.
    pub fn activity_end(&self) -> Micros {
        let scripted = self.scripted.iter().map(|s| s.at).max().unwrap_or(0);
        self.duration.max(self.failures.end()).max(scripted)
    }

    /// End of the run: the activity end plus two crash timeouts and the
    /// largest injected delay of quiet time.
    pub fn effective_horizon(&self) -> Result<Micros, DelayError> {
        Ok(match self.horizon {
            Some(h) => h,
            None => {
                self.activity_end() + 2 * self.effective_crash_timeout()? + self.failures.max_extra_delay()
            }
        })
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.participants == 0 {
            return Err(ClusterError::NoParticipants);
        }
        let m = self.delay_matrix()?;
        let nodes: BTreeSet<NodeId> = self.node_ids().into_iter().collect();
        let ids = self.node_ids();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                let (base, jitter) = match self.network.links.iter().rev().find(|l| (l.a.min(l.b), l.a.max(l.b)) == (a, b)) {
                    Some(l) => (l.base_ms, l.jitter_ms),
                    None => (self.network.base_ms, self.network.jitter_ms),
                };
                let u = m.delay_upper_bound(a, b)?;
                let bound_ms = base + jitter;
                if ms_f64(bound_ms) > u {
                    return Err(ClusterError::DishonestLink {
                        bound_ms,
                        u_ms: u as f64 / 1000.0,
                    });
                }
            }
        }
        let mut referenced: Vec<NodeId> = self.clock_skew_us.keys().copied().collect();
        for l in &self.network.links {
            referenced.extend([l.a, l.b]);
        }
        for e in &self.failures.entries {
            referenced.extend(e.target.nodes());
        }
        for s in &self.scripted {
            referenced.extend(s.participants.iter().copied());
            referenced.extend(s.force_no.iter().copied());
        }
        if let Some(&bad) = referenced.iter().find(|n| !nodes.contains(n)) {
            return Err(ClusterError::UnknownNode(bad));
        }
        if let Some(&bad) = self
            .scripted
            .iter()
            .flat_map(|s| s.participants.iter())
            .find(|n| **n == self.coordinator())
        {
            return Err(ClusterError::UnknownNode(bad));
        }
        self.failures.validate()?;
        Generator::new(self.workload.clone(), self.participant_ids())?;
        RlsmManager::new(self.participant_ids(), self.alpha_cf, self.alpha_nf)?;
        Ok(())
    }
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub trace: GlobalTrace,
    pub metrics: Metrics,
    pub horizon: Micros,
    pub logs: BTreeMap<NodeId, DurableLog>,
    pub shards: BTreeMap<NodeId, Shard>,
    pub levels: BTreeMap<NodeId, RobustnessLevel>,
    /// Logical transactions started by workload clients.
    pub issued: u64,
    /// Lifetime committed throughput seen by the reward collector.
    pub reward_mu: f64,
}

struct Node {
    epoch: u32,
    log: DurableLog,
    shard: Option<Shard>,
    coords: BTreeMap<TxnId, CoordinatorState>,
    parts: BTreeMap<TxnId, ParticipantState>,
    resolvers: BTreeMap<TxnId, Resolver>,
}

impl Node {
    fn new(id: NodeId, with_shard: bool) -> Self {
        Self {
            epoch: 0,
            log: DurableLog::new(id),
            shard: with_shard.then(|| Shard::new(id)),
            coords: BTreeMap::new(),
            parts: BTreeMap::new(),
            resolvers: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Client {
    body: Option<TxnBody>,
    attempt: u32,
    first_issue: Micros,
    scripted: Option<ProtocolKind>,
}

struct Cluster {
    cfg: ClusterConfig,
    coordinator: NodeId,
    delays: DelayMatrix,
    crash_timeout: Micros,
    nodes: BTreeMap<NodeId, Node>,
    rlsm: RlsmManager,
    generator: Generator,
    rng: ChaCha8Rng,
    clients: Vec<Client>,
    pending: BTreeMap<TxnId, usize>,
    parked: BTreeSet<usize>,
    /// Participants judged silent at their transaction's crash deadline.
    silent: BTreeMap<TxnId, BTreeSet<NodeId>>,
    alloc: TxnIdAllocator,
    issued: u64,
    collector: Collector,
}

/// Runs one scenario to its horizon.
pub fn run(cfg: &ClusterConfig) -> Result<RunOutcome, ClusterError> {
    cfg.validate()?;
    let delays = cfg.delay_matrix()?;
    let crash_timeout = cfg.effective_crash_timeout()?;
    let horizon = cfg.effective_horizon()?;
    let coordinator = cfg.coordinator();
    let mut nodes = BTreeMap::new();
    for n in cfg.node_ids() {
        nodes.insert(n, Node::new(n, n != coordinator));
    }
    let mut clients = vec![Client::default(); cfg.workload.clients as usize];
    for s in &cfg.scripted {
        let ops: BTreeMap<NodeId, TxnOps> = s
            .participants
            .iter()
            .map(|&p| {
                let o = TxnOps {
                    reads: Vec::new(),
                    writes: Vec::new(),
                    force_no: s.force_no.contains(&p),
                };
                (p, o)
            })
            .collect();
        clients.push(Client {
            body: Some(TxnBody { ops }),
            attempt: 0,
            first_issue: s.at,
            scripted: Some(s.protocol),
        });
    }
    let mut cluster = Cluster {
        coordinator,
        crash_timeout,
        nodes,
        rlsm: RlsmManager::new(cfg.participant_ids(), cfg.alpha_cf, cfg.alpha_nf)?,
        generator: Generator::new(cfg.workload.clone(), cfg.participant_ids())?,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_edc1_1e47),
        clients,
        pending: BTreeMap::new(),
        parked: BTreeSet::new(),
        silent: BTreeMap::new(),
        alloc: TxnIdAllocator::new(),
        issued: 0,
        collector: Collector::new(cfg.batch_size),
        delays,
        cfg: cfg.clone(),
    };

    let link = LinkSpec {
        base: ms_f64(cfg.network.base_ms),
        jitter: ms_f64(cfg.network.jitter_ms),
    };
    let mut world = SimWorld::new(cfg.seed, cfg.node_ids(), link);
    for l in &cfg.network.links {
        let spec = LinkSpec {
            base: ms_f64(l.base_ms),
            jitter: ms_f64(l.jitter_ms),
        };
        world.set_link(l.a, l.b, spec);
    }
    world.set_record_messages(cfg.record_messages);
    for (&n, &s) in &cfg.clock_skew_us {
        world.set_skew(n, s);
    }
    world.record(TraceEvent::RunStart {
        scenario: cfg.name.clone(),
        seed: cfg.seed,
        coordinator,
        nodes: cfg.node_ids(),
        crash_timeout_us: crash_timeout,
        max_u_us: cluster.delays.max_u(),
        uniform_delay_us: cfg.network.uniform_delay(),
    });
    world.apply_failure_schedule(&cfg.failures)?;
    for c in 0..cfg.workload.clients as usize {
        world.schedule(0, SimEvent::Client(c as u32));
    }
    for (i, s) in cfg.scripted.iter().enumerate() {
        world.schedule(s.at, SimEvent::Client(cfg.workload.clients + i as u32));
    }
    world.step_until(&mut cluster, horizon);
    world.record(TraceEvent::RunEnd { issued: cluster.issued });

    let window = cfg.duration.saturating_sub(cfg.warmup);
    let metrics = collect_metrics(&world.trace, cfg.warmup, window);
    let reward_mu = cluster.collector.lifetime_mu(window);
    let levels = cluster.rlsm.levels();
    let mut logs = BTreeMap::new();
    let mut shards = BTreeMap::new();
    for (id, n) in cluster.nodes {
        logs.insert(id, n.log);
        if let Some(s) = n.shard {
            shards.insert(id, s);
        }
    }
    Ok(RunOutcome {
        trace: world.trace,
        metrics,
        horizon,
        logs,
        shards,
        levels,
        issued: cluster.issued,
        reward_mu,
    })
}

impl Sink for Cluster {
    fn handle(&mut self, world: &mut SimWorld, event: SimEvent) {
        match event {
            SimEvent::Deliver(m) => self.on_message(world, m),
            SimEvent::Timer { node, txn, kind, epoch } => self.on_timer(world, node, txn, kind, epoch),
            SimEvent::Crash(n) => self.on_crash(n),
            SimEvent::Recover(n) => self.on_recover(world, n),
            SimEvent::DelayOn { .. } | SimEvent::DelayOff { .. } => {}
            SimEvent::Client(c) => self.on_client(world, c as usize),
        }
    }
}

fn flip(d: Decision) -> Decision {
    match d {
        Decision::Commit => Decision::Abort,
        Decision::Abort => Decision::Commit,
        Decision::Undecide => Decision::Undecide,
    }
}

impl Cluster {
    fn ctx<'a>(delays: &'a DelayMatrix, crash_timeout: Micros, world: &SimWorld, n: NodeId) -> StepCtx<'a> {
        StepCtx {
            node: n,
            now: world.local_now(n),
            delays,
            crash_timeout,
        }
    }

    fn node(&mut self, n: NodeId) -> &mut Node {
        self.nodes.get_mut(&n).expect("known node")
    }

    fn exec(&mut self, world: &mut SimWorld, n: NodeId, txn: TxnId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send(m) => world.send(m),
                Action::SetTimer(kind, after) => {
                    let epoch = self.node(n).epoch;
                    world.set_timer(n, txn, kind, epoch, after);
                }
                Action::AppendLog(kind, meta) => match self.node(n).log.append(txn, kind, meta) {
                    Ok(Appended::New(_)) => {
                        let vote = match kind {
                            LogKind::ReadyYes => Some(Vote::Yes),
                            LogKind::ReadyNo => Some(Vote::No),
                            _ => None,
                        };
                        if let Some(vote) = vote {
                            world.record(TraceEvent::Vote {
                                txn,
                                node: n,
                                vote,
                                refusal: false,
                            });
                        }
                    }
                    Ok(Appended::Duplicate) => {}
                    Err(e) => world.record(TraceEvent::Fault {
                        txn: Some(txn),
                        node: n,
                        detail: e.to_string(),
                    }),
                },
                Action::DecideLocal(d) => {
                    let shown = if self.cfg.forge_decision == Some((txn, n)) { flip(d) } else { d };
                    world.record(TraceEvent::Decide {
                        txn,
                        node: n,
                        decision: shown,
                    });
                    let node = self.node(n);
                    if let Some(s) = node.shard.as_mut() {
                        s.apply(txn, d);
                    }
                    node.resolvers.remove(&txn);
                }
                Action::ReplyClient(d) => self.reply_client(world, txn, d),
                Action::EnterTermination => self.start_resolver(world, n, txn, ResolveMode::Termination),
                Action::TimedOut(timer) => world.record(TraceEvent::Timeout { txn, node: n, timer }),
                Action::Validated(report) => self.on_validated(world, report),
                Action::Fault(detail) => world.record(TraceEvent::Fault {
                    txn: Some(txn),
                    node: n,
                    detail,
                }),
            }
        }
    }

    fn on_client(&mut self, world: &mut SimWorld, c: usize) {
        if !world.is_alive(self.coordinator) {
            self.parked.insert(c);
            return;
        }
        let now = world.now();
        let client = &mut self.clients[c];
        if client.scripted.is_none() && now >= self.cfg.duration {
            client.body = None;
            return;
        }
        if client.body.is_none() {
            if client.scripted.is_some() {
                return;
            }
            client.body = Some(self.generator.generate_txn(&mut self.rng));
            client.attempt = 0;
            client.first_issue = now;
            self.issued += 1;
        }
        if client.scripted.is_some() && client.attempt > 0 {
            return;
        }
        client.attempt += 1;
        let body = client.body.clone().expect("set above");
        let ct: BTreeSet<NodeId> = body.ops.keys().copied().collect();
        let protocol = match (client.scripted, self.cfg.mode) {
            (Some(p), _) => p,
            (None, _) if ct.len() <= 1 => ProtocolKind::FlacFf,
            (None, ProtocolMode::Fixed(p)) => p,
            (None, ProtocolMode::Auto) => self.rlsm.select(&ct).unwrap_or(ProtocolKind::FlacNf),
        };
        let txn = self.alloc.allocate();
        self.pending.insert(txn, c);
        world.record(TraceEvent::Begin {
            txn,
            coordinator: self.coordinator,
            participants: ct.iter().copied().collect(),
            protocol,
            client: Some(c as u32),
        });
        let n = self.coordinator;
        let ctx = Self::ctx(&self.delays, self.crash_timeout, world, n);
        let mut machine = CoordinatorState::new(txn, n, protocol);
        let actions = machine.step(&ctx, ProtocolEvent::Start(StartTxn { ops: body.ops, protocol }));
        self.node(n).coords.insert(txn, machine);
        self.exec(world, n, txn, actions);
        self.prune_coordinator(n, txn);
    }

    fn reply_client(&mut self, world: &mut SimWorld, txn: TxnId, d: Decision) {
        let Some(c) = self.pending.remove(&txn) else {
            return;
        };
        let now = world.now();
        let client = &self.clients[c];
        let Some(body) = client.body.as_ref() else {
            return;
        };
        let conflict = d == Decision::Abort
            && body.ops.keys().any(|p| {
                self.nodes[p]
                    .shard
                    .as_ref()
                    .is_some_and(|s| s.no_reason(txn) == Some(NoReason::Conflict))
            });
        let scripted = client.scripted.is_some();
        let outcome = match d {
            Decision::Commit => Some(FinalOutcome::Committed),
            // No attempt starts after the workload ends, retries included.
            _ if !scripted && now < self.cfg.duration && self.cfg.retry.should_retry(client.attempt, conflict) => None,
            _ => Some(FinalOutcome::AbortedFinal),
        };
        world.record(TraceEvent::ClientReply {
            txn,
            client: c as u32,
            decision: d,
            attempt: client.attempt,
            outcome,
            latency_us: now - client.first_issue,
        });
        if now >= self.cfg.warmup && now < self.cfg.duration {
            let level = body
                .ops
                .keys()
                .filter_map(|p| self.rlsm.level(*p))
                .max()
                .unwrap_or(RobustnessLevel::FF);
            self.collector.ingest(level, d == Decision::Commit, now);
        }
        if outcome.is_some() {
            self.clients[c].body = None;
        }
        if !scripted {
            world.schedule(now, SimEvent::Client(c as u32));
        }
    }

    fn on_validated(&mut self, world: &mut SimWorld, report: ValidationReport) {
        if self.cfg.mode != ProtocolMode::Auto || report.in_window.expected().len() < 2 {
            return;
        }
        let ct = report.in_window.expected().clone();
        if matches!(report.protocol, ProtocolKind::FlacFf | ProtocolKind::FlacCf) {
            let silent: BTreeSet<NodeId> = report
                .timing
                .iter()
                .filter(|(_, t)| **t == ReplyTiming::Silent)
                .map(|(n, _)| *n)
                .collect();
            if !silent.is_empty() {
                self.silent.insert(report.txn, silent);
            }
        }
        let (det, changes) = self
            .rlsm
            .on_validated(report.protocol, &ct, &report.in_window, &report.timing);
        for (node, event, rule) in det.events {
            world.record(TraceEvent::Detection {
                txn: report.txn,
                node,
                event,
                rule,
            });
        }
        for ch in changes {
            world.record(TraceEvent::LevelChange {
                txn: report.txn,
                node: ch.node,
                old: ch.old,
                new: ch.new,
                rule: ch.rule,
            });
        }
    }

    fn on_reply_past_deadline(&mut self, world: &mut SimWorld, txn: TxnId, from: NodeId) {
        let Some(waiting) = self.silent.get_mut(&txn) else {
            return;
        };
        if !waiting.remove(&from) {
            return;
        }
        if waiting.is_empty() {
            self.silent.remove(&txn);
        }
        world.record(TraceEvent::Detection {
            txn,
            node: from,
            event: RlsmEvent::NF,
            rule: DetectionRule::PastDeadline,
        });
        if let Some(ch) = self.rlsm.on_reply_past_deadline(from) {
            world.record(TraceEvent::LevelChange {
                txn,
                node: ch.node,
                old: ch.old,
                new: ch.new,
                rule: ch.rule,
            });
        }
    }

    fn on_message(&mut self, world: &mut SimWorld, m: Message) {
        let (n, txn) = (m.to, m.txn);
        match m.payload {
            Payload::LogQuery => self.on_log_query(world, n, m.from, txn),
            Payload::LogReply(summary) => {
                let step = match self.node(n).resolvers.get_mut(&txn) {
                    Some(r) => r.on_reply(m.from, summary),
                    None => return,
                };
                self.after_resolver(world, n, txn, step);
            }
            _ if n == self.coordinator => self.coordinator_deliver(world, m),
            _ => self.participant_deliver(world, m),
        }
    }

    fn coordinator_deliver(&mut self, world: &mut SimWorld, m: Message) {
        let (n, txn) = (m.to, m.txn);
        if matches!(m.payload, Payload::Result(_) | Payload::Vote(_)) {
            self.on_reply_past_deadline(world, txn, m.from);
        }
        if let Payload::Decision(d) = m.payload {
            if d.is_final() && self.node(n).resolvers.contains_key(&txn) && !self.node(n).coords.contains_key(&txn) {
                self.apply_resolution(world, n, txn, d, RecoveryOutcome::AdoptedPeerDecision(d));
                return;
            }
        }
        let ctx = Self::ctx(&self.delays, self.crash_timeout, world, n);
        let node = self.nodes.get_mut(&n).expect("known node");
        let Some(machine) = node.coords.get_mut(&txn) else {
            return;
        };
        let actions = machine.step(&ctx, ProtocolEvent::Deliver(m));
        if machine.is_decided() {
            node.resolvers.remove(&txn);
        }
        self.exec(world, n, txn, actions);
        self.prune_coordinator(n, txn);
    }

    fn prune_coordinator(&mut self, n: NodeId, txn: TxnId) {
        let node = self.node(n);
        if node.coords.get(&txn).is_some_and(|c| c.is_finished()) {
            node.coords.remove(&txn);
        }
    }

    fn participant_deliver(&mut self, world: &mut SimWorld, m: Message) {
        let (n, txn) = (m.to, m.txn);
        let ctx = Self::ctx(&self.delays, self.crash_timeout, world, n);
        let node = self.nodes.get_mut(&n).expect("known node");
        if node.log.decision(txn).is_some() && !node.parts.contains_key(&txn) {
            return;
        }
        let Node { parts, shard, .. } = node;
        let shard = shard.as_mut().expect("participants own a shard");
        let machine = parts.entry(txn).or_insert_with(|| ParticipantState::new(txn, n));
        let actions = machine.step(&ctx, ProtocolEvent::Deliver(m), shard);
        self.exec(world, n, txn, actions);
        self.prune_participant(n, txn);
    }

    fn prune_participant(&mut self, n: NodeId, txn: TxnId) {
        let node = self.node(n);
        if node.parts.get(&txn).is_some_and(|p| p.is_done()) {
            node.parts.remove(&txn);
            node.resolvers.remove(&txn);
        }
    }

    fn on_log_query(&mut self, world: &mut SimWorld, n: NodeId, from: NodeId, txn: TxnId) {
        let summary = if n == self.coordinator {
            let ctx = Self::ctx(&self.delays, self.crash_timeout, world, n);
            let node = self.nodes.get_mut(&n).expect("known node");
            if let Some(machine) = node.coords.get_mut(&txn) {
                let mut out = Vec::new();
                machine.answer_query(&ctx, &mut out);
                if machine.is_decided() {
                    node.resolvers.remove(&txn);
                }
                self.exec(world, n, txn, out);
                self.prune_coordinator(n, txn);
            }
            self.node(n).log.summary(txn)
        } else {
            let node = self.node(n);
            let (summary, refused) = answer_participant_query(&mut node.log, txn);
            if refused {
                if let Some(s) = node.shard.as_mut() {
                    s.refuse(txn);
                }
                world.record(TraceEvent::Vote {
                    txn,
                    node: n,
                    vote: Vote::No,
                    refusal: true,
                });
            }
            summary
        };
        world.send(Message::new(txn, n, from, Payload::LogReply(summary)));
    }

    fn on_timer(&mut self, world: &mut SimWorld, n: NodeId, txn: TxnId, kind: TimerKind, epoch: u32) {
        if self.node(n).epoch != epoch {
            return;
        }
        if kind == TimerKind::Retry {
            let step = match self.node(n).resolvers.get_mut(&txn) {
                Some(r) => r.on_retry(),
                None => return,
            };
            self.after_resolver(world, n, txn, step);
            return;
        }
        let ctx = Self::ctx(&self.delays, self.crash_timeout, world, n);
        let node = self.nodes.get_mut(&n).expect("known node");
        let ev = ProtocolEvent::TimerFired(kind);
        if n == self.coordinator {
            let Some(machine) = node.coords.get_mut(&txn) else {
                return;
            };
            let actions = machine.step(&ctx, ev);
            self.exec(world, n, txn, actions);
            self.prune_coordinator(n, txn);
        } else {
            let Node { parts, shard, .. } = node;
            let Some(machine) = parts.get_mut(&txn) else {
                return;
            };
            let shard = shard.as_mut().expect("participants own a shard");
            let actions = machine.step(&ctx, ev, shard);
            self.exec(world, n, txn, actions);
            self.prune_participant(n, txn);
        }
    }

    fn meta_of(&self, n: NodeId, txn: TxnId) -> Option<LogMeta> {
        let node = &self.nodes[&n];
        node.log
            .state(txn)
            .and_then(|s| s.meta.clone())
            .or_else(|| node.coords.get(&txn).map(|c| c.meta()))
            .or_else(|| node.parts.get(&txn).and_then(|p| p.meta()))
    }

    fn start_resolver(&mut self, world: &mut SimWorld, n: NodeId, txn: TxnId, mode: ResolveMode) {
        let Some(meta) = self.meta_of(n, txn) else {
            return;
        };
        let role = if meta.coordinator == n { Role::Coordinator } else { Role::Participant };
        let local = self.nodes[&n].log.summary(txn);
        let base = (2 * self.delays.max_u()).max(1);
        let mut r = Resolver::new(txn, n, role, &meta, mode, local, base, self.crash_timeout);
        let step = r.start();
        self.node(n).resolvers.insert(txn, r);
        self.after_resolver(world, n, txn, step);
    }

    fn after_resolver(&mut self, world: &mut SimWorld, n: NodeId, txn: TxnId, step: ResolverStep) {
        match step {
            ResolverStep::Decided(d, o) => self.apply_resolution(world, n, txn, d, o),
            ResolverStep::Wait(actions) => self.exec(world, n, txn, actions),
        }
    }

    fn apply_resolution(&mut self, world: &mut SimWorld, n: NodeId, txn: TxnId, d: Decision, o: RecoveryOutcome) {
        self.node(n).resolvers.remove(&txn);
        let Some(meta) = self.meta_of(n, txn) else {
            return;
        };
        world.record(TraceEvent::Resolution { txn, node: n, outcome: o });
        let ctx = Self::ctx(&self.delays, self.crash_timeout, world, n);
        let node = self.nodes.get_mut(&n).expect("known node");
        let mut out = Vec::new();
        if meta.coordinator == n {
            let machine = node
                .coords
                .entry(txn)
                .or_insert_with(|| CoordinatorState::recovered(txn, n, &meta));
            machine.resolve(&ctx, d, &mut out);
            self.exec(world, n, txn, out);
            self.prune_coordinator(n, txn);
        } else {
            let ready = node.log.state(txn).and_then(|s| s.ready);
            let machine = node
                .parts
                .entry(txn)
                .or_insert_with(|| ParticipantState::recovered(txn, n, &meta, ready));
            let announce = machine.protocol == Some(ProtocolKind::FlacFf);
            machine.adopt(d, announce, &mut out);
            self.exec(world, n, txn, out);
            self.prune_participant(n, txn);
        }
    }

    fn on_crash(&mut self, n: NodeId) {
        let node = self.node(n);
        node.epoch += 1;
        node.coords.clear();
        node.parts.clear();
        node.resolvers.clear();
        node.log.crash(false);
        if n == self.coordinator {
            self.rlsm.reset();
            self.silent.clear();
        }
    }

    fn on_recover(&mut self, world: &mut SimWorld, n: NodeId) {
        self.node(n).epoch += 1;
        let half = self.node(n).log.half_executed();
        for txn in half {
            let st = self.nodes[&n].log.state(txn).cloned().unwrap_or_default();
            match st.meta {
                None => {
                    world.record(TraceEvent::Resolution {
                        txn,
                        node: n,
                        outcome: RecoveryOutcome::AbortedDirect,
                    });
                    let actions = vec![
                        Action::AppendLog(LogKind::AbortLog, None),
                        Action::DecideLocal(Decision::Abort),
                    ];
                    self.exec(world, n, txn, actions);
                }
                Some(meta) => {
                    let node = self.node(n);
                    if meta.coordinator == n {
                        node.coords.insert(txn, CoordinatorState::recovered(txn, n, &meta));
                    } else {
                        node.parts
                            .insert(txn, ParticipantState::recovered(txn, n, &meta, st.ready));
                    }
                    self.start_resolver(world, n, txn, ResolveMode::Recovery);
                }
            }
        }
        if n == self.coordinator {
            let waiting: Vec<TxnId> = self.pending.keys().copied().collect();
            for txn in waiting {
                if let Some(d) = self.nodes[&n].log.decision(txn) {
                    if !self.nodes[&n].coords.contains_key(&txn) {
                        self.reply_client(world, txn, d);
                    }
                }
            }
            let now = world.now();
            for c in std::mem::take(&mut self.parked) {
                world.schedule(now, SimEvent::Client(c as u32));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ms;

    fn scripted(protocol: ProtocolKind, force_no: &[u32]) -> ClusterConfig {
        ClusterConfig {
            workload: Workload {
                clients: 0,
                ..Workload::default()
            },
            duration: 0,
            scripted: vec![ScriptedTxn {
                at: 0,
                protocol,
                participants: vec![NodeId(1), NodeId(2), NodeId(3)],
                force_no: force_no.iter().map(|&i| NodeId(i)).collect(),
            }],
            ..ClusterConfig::default()
        }
    }

    fn decisions(out: &RunOutcome) -> Vec<(NodeId, Decision)> {
        out.trace
            .iter()
            .filter_map(|r| match r.event {
                TraceEvent::Decide { node, decision, .. } => Some((node, decision)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn scripted_commit_and_abort_every_protocol() {
        for p in ProtocolKind::ALL {
            let out = run(&scripted(p, &[])).unwrap();
            let d = decisions(&out);
            assert_eq!(d.len(), 4, "{p:?}");
            assert!(d.iter().all(|(_, x)| *x == Decision::Commit), "{p:?}");
            let out = run(&scripted(p, &[2])).unwrap();
            let d = decisions(&out);
            assert_eq!(d.len(), 4, "{p:?}");
            assert!(d.iter().all(|(_, x)| *x == Decision::Abort), "{p:?}");
        }
    }

    #[test]
    fn workload_run_releases_all_locks() {
        let cfg = ClusterConfig {
            workload: Workload {
                clients: 8,
                ..Workload::default()
            },
            duration: ms(200),
            ..ClusterConfig::default()
        };
        let out = run(&cfg).unwrap();
        assert!(out.metrics.committed > 0);
        for s in out.shards.values() {
            assert_eq!(s.held_locks(), 0);
        }
    }

    #[test]
    fn mode_parses() {
        assert_eq!("auto".parse::<ProtocolMode>().unwrap(), ProtocolMode::Auto);
        assert_eq!("2PC".parse::<ProtocolMode>().unwrap(), ProtocolMode::Fixed(ProtocolKind::TwoPc));
        assert!("3pc".parse::<ProtocolMode>().is_err());
    }

    #[test]
    fn dishonest_link_rejected() {
        let cfg = ClusterConfig {
            network: NetworkConfig {
                sigma_ms: 5.0,
                r: 1.0,
                base_ms: 5.0,
                jitter_ms: 1.0,
                links: Vec::new(),
            },
            ..ClusterConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ClusterError::DishonestLink { .. })));
        let mut slow = ClusterConfig::default();
        slow.network.links.push(LinkOverride {
            a: NodeId(2),
            b: NodeId(1),
            sigma_ms: 20.0,
            base_ms: 18.0,
            jitter_ms: 0.0,
        });
        slow.validate().unwrap();
        assert_eq!(slow.delay_matrix().unwrap().max_u(), 20_000);
        slow.network.links[0].base_ms = 21.0;
        assert!(matches!(slow.validate(), Err(ClusterError::DishonestLink { .. })));
    }
}
