//! Durable logs, crash recovery and the termination protocol.
//!
//! A node that restarts, or that waited a full crash timeout without a
//! decision, settles each half-executed transaction by consulting its own
//! log and the logs of its peers. The rules are applied in order:
//!
//! 1. the local log already holds a decision or transit record: resume it;
//! 2. a participant that logged ReadyNo (or never voted) aborts;
//! 3. a restarting coordinator of a coordinator-decided protocol without a
//!    decision record aborts;
//! 4. any peer log holding a decision or transit record: adopt it;
//! 5. any participant without ReadyYes: abort;
//! 6. FLAC_FF only: every participant holds ReadyYes: commit;
//! 7. otherwise stay blocked and ask again later.
//!
//! A participant asked about a transaction it never voted on logs ReadyNo
//! before answering, which keeps rule 5 stable against a Propose that is
//! still in flight.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Decision, LogEntry, LogKind, LogMeta, LogSummary, Message, Micros, NodeId, Payload,
    ProtocolKind, Role, TxnId, Vote,
};
use crate::protocols::{Action, TimerKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogError {
    #[error("{node} already logged a different vote for {txn}")]
    ConflictingReady { node: NodeId, txn: TxnId },
    #[error("{node} already logged a different decision for {txn}")]
    ConflictingDecision { node: NodeId, txn: TxnId },
}

/// Everything one node's log says about one transaction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TxnLog {
    pub meta: Option<LogMeta>,
    pub proposed: bool,
    pub ready: Option<Vote>,
    pub transit: Option<Decision>,
    pub decision: Option<Decision>,
}

impl TxnLog {
    pub fn summary(&self) -> LogSummary {
        LogSummary {
            ready: self.ready,
            transit: self.transit,
            decision: self.decision,
        }
    }

    pub fn is_half_executed(&self) -> bool {
        (self.proposed || self.ready.is_some() || self.transit.is_some()) && self.decision.is_none()
    }

    fn apply(&mut self, e: &LogEntry) {
        if self.meta.is_none() {
            self.meta = e.payload.clone();
        }
        match e.kind {
            LogKind::ProposeLog => self.proposed = true,
            LogKind::ReadyYes => self.ready = Some(Vote::Yes),
            LogKind::ReadyNo => self.ready = Some(Vote::No),
            LogKind::TransitCommit => self.transit = Some(Decision::Commit),
            LogKind::TransitAbort => self.transit = Some(Decision::Abort),
            LogKind::CommitLog => self.decision = Some(Decision::Commit),
            LogKind::AbortLog => self.decision = Some(Decision::Abort),
        }
    }
}

/// Outcome of an append.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Appended {
    New(u64),
    /// The same record already exists; nothing was written.
    Duplicate,
}

/// Append-only per-node log with a flushed prefix.
///
/// Invariants: at most one Ready record and one decision record per
/// transaction; replaying `entries()` reproduces `state()` exactly.
#[derive(Clone, Debug)]
pub struct DurableLog {
    node: NodeId,
    entries: Vec<LogEntry>,
    flushed: usize,
    auto_flush: bool,
    states: BTreeMap<TxnId, TxnLog>,
}

impl DurableLog {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            entries: Vec::new(),
            flushed: 0,
            auto_flush: true,
            states: BTreeMap::new(),
        }
    }

    /// A log whose appends stay volatile until [`DurableLog::flush`].
    pub fn lazy(node: NodeId) -> Self {
        Self {
            auto_flush: false,
            ..Self::new(node)
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn append(
        &mut self,
        txn: TxnId,
        kind: LogKind,
        meta: Option<LogMeta>,
    ) -> Result<Appended, LogError> {
        let st = self.states.entry(txn).or_default();
        match kind {
            LogKind::ReadyYes | LogKind::ReadyNo => {
                let v = if kind == LogKind::ReadyYes { Vote::Yes } else { Vote::No };
                match st.ready {
                    Some(old) if old == v => return Ok(Appended::Duplicate),
                    Some(_) => return Err(LogError::ConflictingReady { node: self.node, txn }),
                    None => {}
                }
            }
            LogKind::CommitLog | LogKind::AbortLog => {
                let d = if kind == LogKind::CommitLog { Decision::Commit } else { Decision::Abort };
                match st.decision {
                    Some(old) if old == d => return Ok(Appended::Duplicate),
                    Some(_) => return Err(LogError::ConflictingDecision { node: self.node, txn }),
                    None => {}
                }
                if st.transit.is_some_and(|t| t != d) {
                    return Err(LogError::ConflictingDecision { node: self.node, txn });
                }
            }
            LogKind::TransitCommit | LogKind::TransitAbort => {
                let d = if kind == LogKind::TransitCommit { Decision::Commit } else { Decision::Abort };
                if st.transit == Some(d) {
                    return Ok(Appended::Duplicate);
                }
                if st.transit.is_some() || st.decision.is_some_and(|x| x != d) {
                    return Err(LogError::ConflictingDecision { node: self.node, txn });
                }
            }
            LogKind::ProposeLog => {
                if st.proposed {
                    return Ok(Appended::Duplicate);
                }
            }
        }
        let seq = self.entries.len() as u64;
        let entry = LogEntry {
            kind,
            txn,
            seq,
            payload: meta,
        };
        st.apply(&entry);
        self.entries.push(entry);
        if self.auto_flush {
            self.flushed = self.entries.len();
        }
        Ok(Appended::New(seq))
    }

    pub fn flush(&mut self) {
        self.flushed = self.entries.len();
    }

    pub fn unflushed(&self) -> usize {
        self.entries.len() - self.flushed
    }

    /// Simulates a crash: the unflushed suffix is lost when `drop_unflushed`.
    pub fn crash(&mut self, drop_unflushed: bool) {
        if drop_unflushed && self.flushed < self.entries.len() {
            self.entries.truncate(self.flushed);
            self.states = replay(&self.entries);
        }
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn state(&self, txn: TxnId) -> Option<&TxnLog> {
        self.states.get(&txn)
    }

    pub fn states(&self) -> &BTreeMap<TxnId, TxnLog> {
        &self.states
    }

    pub fn summary(&self, txn: TxnId) -> LogSummary {
        self.states.get(&txn).map(TxnLog::summary).unwrap_or_default()
    }

    pub fn decision(&self, txn: TxnId) -> Option<Decision> {
        self.states.get(&txn).and_then(|s| s.decision)
    }

    pub fn half_executed(&self) -> Vec<TxnId> {
        self.states
            .iter()
            .filter(|(_, s)| s.is_half_executed())
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            s.push('\n');
        }
        s
    }
}

/// Rebuilds per-transaction state from a sequence of entries.
pub fn replay(entries: &[LogEntry]) -> BTreeMap<TxnId, TxnLog> {
    let mut states: BTreeMap<TxnId, TxnLog> = BTreeMap::new();
    for e in entries {
        states.entry(e.txn).or_default().apply(e);
    }
    states
}

/// Answers a LogQuery at a participant. A transaction the node never voted
/// on is refused: ReadyNo is logged so the node can never vote Yes later.
pub fn answer_participant_query(log: &mut DurableLog, txn: TxnId) -> (LogSummary, bool) {
    let st = log.summary(txn);
    if st.ready.is_none() && st.known_decision().is_none() {
        let _ = log.append(txn, LogKind::ReadyNo, None);
        return (log.summary(txn), true);
    }
    (st, false)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolveMode {
    Termination,
    Recovery,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "resolution", content = "decision")]
pub enum RecoveryOutcome {
    /// The local log already settled it.
    ResumedLocalDecision(Decision),
    AbortedDirect,
    AdoptedPeerDecision(Decision),
    AbortedByMissingReadyYes,
    CommittedByAllUndecide,
    StillBlocked,
}

impl RecoveryOutcome {
    pub fn decision(self) -> Option<Decision> {
        match self {
            RecoveryOutcome::ResumedLocalDecision(d) | RecoveryOutcome::AdoptedPeerDecision(d) => Some(d),
            RecoveryOutcome::AbortedDirect | RecoveryOutcome::AbortedByMissingReadyYes => {
                Some(Decision::Abort)
            }
            RecoveryOutcome::CommittedByAllUndecide => Some(Decision::Commit),
            RecoveryOutcome::StillBlocked => None,
        }
    }
}

/// Inputs of one resolution attempt.
#[derive(Clone, Debug)]
pub struct ResolveInput<'a> {
    pub me: NodeId,
    pub role: Role,
    pub protocol: ProtocolKind,
    pub participants: &'a BTreeSet<NodeId>,
    pub mode: ResolveMode,
    pub local: LogSummary,
    pub replies: &'a BTreeMap<NodeId, LogSummary>,
}

/// Applies the resolution rules once.
pub fn resolve(input: &ResolveInput<'_>) -> RecoveryOutcome {
    if let Some(d) = input.local.known_decision() {
        return RecoveryOutcome::ResumedLocalDecision(d);
    }
    if input.role == Role::Participant && input.local.ready != Some(Vote::Yes) {
        return RecoveryOutcome::AbortedDirect;
    }
    if input.role == Role::Coordinator
        && input.mode == ResolveMode::Recovery
        && input.protocol.coordinator_decides()
    {
        return RecoveryOutcome::AbortedDirect;
    }
    if let Some(d) = input.replies.values().find_map(|s| s.known_decision()) {
        return RecoveryOutcome::AdoptedPeerDecision(d);
    }
    let lacks_yes = input
        .replies
        .iter()
        .any(|(n, s)| input.participants.contains(n) && s.ready != Some(Vote::Yes));
    if lacks_yes {
        return RecoveryOutcome::AbortedByMissingReadyYes;
    }
    if input.protocol == ProtocolKind::FlacFf {
        let all_yes = input.participants.iter().all(|p| {
            if *p == input.me {
                input.local.ready == Some(Vote::Yes)
            } else {
                input.replies.get(p).is_some_and(|s| s.ready == Some(Vote::Yes))
            }
        });
        if all_yes {
            return RecoveryOutcome::CommittedByAllUndecide;
        }
    }
    RecoveryOutcome::StillBlocked
}

/// Nodes a resolving node asks.
pub fn query_targets(
    me: NodeId,
    role: Role,
    protocol: ProtocolKind,
    coordinator: NodeId,
    participants: &BTreeSet<NodeId>,
) -> Vec<NodeId> {
    match (role, protocol) {
        (Role::Coordinator, _) => participants.iter().copied().collect(),
        (Role::Participant, ProtocolKind::TwoPc) => vec![coordinator],
        (Role::Participant, _) => std::iter::once(coordinator)
            .chain(participants.iter().copied().filter(|&p| p != me))
            .collect(),
    }
}

/// What the runtime should do after feeding the resolver.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ResolverStep {
    Decided(Decision, RecoveryOutcome),
    Wait(Vec<Action>),
}

/// Message-driven resolution for one (node, transaction).
#[derive(Clone, Debug)]
pub struct Resolver {
    pub txn: TxnId,
    pub me: NodeId,
    pub role: Role,
    pub protocol: ProtocolKind,
    pub coordinator: NodeId,
    pub participants: BTreeSet<NodeId>,
    pub mode: ResolveMode,
    pub local: LogSummary,
    replies: BTreeMap<NodeId, LogSummary>,
    attempt: u32,
    base_backoff: Micros,
    cap: Micros,
}

impl Resolver {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        txn: TxnId,
        me: NodeId,
        role: Role,
        meta: &LogMeta,
        mode: ResolveMode,
        local: LogSummary,
        base_backoff: Micros,
        cap: Micros,
    ) -> Self {
        Self {
            txn,
            me,
            role,
            protocol: meta.protocol,
            coordinator: meta.coordinator,
            participants: meta.participants.iter().copied().collect(),
            mode,
            local,
            replies: BTreeMap::new(),
            attempt: 0,
            base_backoff: base_backoff.max(1),
            cap: cap.max(1),
        }
    }

    fn evaluate(&self) -> RecoveryOutcome {
        resolve(&ResolveInput {
            me: self.me,
            role: self.role,
            protocol: self.protocol,
            participants: &self.participants,
            mode: self.mode,
            local: self.local,
            replies: &self.replies,
        })
    }

    pub fn backoff(&self) -> Micros {
        let f = 1u64 << self.attempt.min(20);
        self.base_backoff.saturating_mul(f).min(self.cap)
    }

    fn queries(&self) -> Vec<Action> {
        let mut out: Vec<Action> =
            query_targets(self.me, self.role, self.protocol, self.coordinator, &self.participants)
                .into_iter()
                .map(|to| Action::Send(Message::new(self.txn, self.me, to, Payload::LogQuery)))
                .collect();
        out.push(Action::SetTimer(TimerKind::Retry, self.backoff()));
        out
    }

    fn step(&self, fresh: bool) -> ResolverStep {
        match self.evaluate() {
            RecoveryOutcome::StillBlocked => ResolverStep::Wait(if fresh { self.queries() } else { Vec::new() }),
            o => ResolverStep::Decided(o.decision().expect("non-blocked outcome decides"), o),
        }
    }

    pub fn start(&mut self) -> ResolverStep {
        self.step(true)
    }

    pub fn on_reply(&mut self, from: NodeId, summary: LogSummary) -> ResolverStep {
        self.replies.insert(from, summary);
        self.step(false)
    }

    pub fn on_retry(&mut self) -> ResolverStep {
        self.attempt += 1;
        self.step(true)
    }

    pub fn attempts(&self) -> u32 {
        self.attempt
    }
}

/// Synchronous peer access used by the direct recovery entry points.
/// `None` means the peer is unreachable.
pub trait PeerQuery {
    fn query(&mut self, peer: NodeId, txn: TxnId) -> Option<LogSummary>;
}

impl<F: FnMut(NodeId, TxnId) -> Option<LogSummary>> PeerQuery for F {
    fn query(&mut self, peer: NodeId, txn: TxnId) -> Option<LogSummary> {
        self(peer, txn)
    }
}

fn recover_with(
    log: &DurableLog,
    role: Role,
    peers: &mut dyn PeerQuery,
) -> BTreeMap<TxnId, RecoveryOutcome> {
    let mut out = BTreeMap::new();
    for txn in log.half_executed() {
        let st = log.state(txn).expect("listed txn has state");
        let Some(meta) = st.meta.clone() else {
            out.insert(txn, RecoveryOutcome::AbortedDirect);
            continue;
        };
        let participants: BTreeSet<NodeId> = meta.participants.iter().copied().collect();
        let mut replies = BTreeMap::new();
        for p in query_targets(log.node(), role, meta.protocol, meta.coordinator, &participants) {
            if let Some(s) = peers.query(p, txn) {
                replies.insert(p, s);
            }
        }
        let o = resolve(&ResolveInput {
            me: log.node(),
            role,
            protocol: meta.protocol,
            participants: &participants,
            mode: ResolveMode::Recovery,
            local: st.summary(),
            replies: &replies,
        });
        out.insert(txn, o);
    }
    out
}

/// Settles every half-executed transaction of a restarting coordinator.
pub fn recover_coordinator(
    log: &DurableLog,
    peers: &mut dyn PeerQuery,
) -> BTreeMap<TxnId, RecoveryOutcome> {
    recover_with(log, Role::Coordinator, peers)
}

/// Settles every half-executed transaction of a restarting participant.
pub fn recover_participant(
    log: &DurableLog,
    peers: &mut dyn PeerQuery,
) -> BTreeMap<TxnId, RecoveryOutcome> {
    recover_with(log, Role::Participant, peers)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TerminationResult {
    Decided(Decision),
    Blocked,
}

/// One synchronous round of the termination protocol.
pub fn run_termination(
    me: NodeId,
    role: Role,
    meta: &LogMeta,
    local: LogSummary,
    txn: TxnId,
    peers: &mut dyn PeerQuery,
) -> TerminationResult {
    let participants: BTreeSet<NodeId> = meta.participants.iter().copied().collect();
    let mut replies = BTreeMap::new();
    for p in query_targets(me, role, meta.protocol, meta.coordinator, &participants) {
        if let Some(s) = peers.query(p, txn) {
            replies.insert(p, s);
        }
    }
    let o = resolve(&ResolveInput {
        me,
        role,
        protocol: meta.protocol,
        participants: &participants,
        mode: ResolveMode::Termination,
        local,
        replies: &replies,
    });
    match o.decision() {
        Some(d) => TerminationResult::Decided(d),
        None => TerminationResult::Blocked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn meta(p: ProtocolKind) -> LogMeta {
        LogMeta {
            protocol: p,
            coordinator: n(0),
            participants: vec![n(1), n(2), n(3)],
        }
    }

    fn yes() -> LogSummary {
        LogSummary {
            ready: Some(Vote::Yes),
            ..Default::default()
        }
    }

    #[test]
    fn log_rejects_conflicts_and_dedups() {
        let mut log = DurableLog::new(n(1));
        assert_eq!(log.append(TxnId(1), LogKind::ReadyYes, None), Ok(Appended::New(0)));
        assert_eq!(log.append(TxnId(1), LogKind::ReadyYes, None), Ok(Appended::Duplicate));
        assert!(log.append(TxnId(1), LogKind::ReadyNo, None).is_err());
        log.append(TxnId(1), LogKind::TransitCommit, None).unwrap();
        assert!(log.append(TxnId(1), LogKind::AbortLog, None).is_err());
        log.append(TxnId(1), LogKind::CommitLog, None).unwrap();
        assert!(log.append(TxnId(1), LogKind::AbortLog, None).is_err());
        assert_eq!(replay(log.entries()), log.states().clone());
    }

    #[test]
    fn lazy_log_loses_only_unflushed_suffix() {
        let mut log = DurableLog::lazy(n(1));
        log.append(TxnId(1), LogKind::ReadyYes, None).unwrap();
        log.flush();
        log.append(TxnId(1), LogKind::CommitLog, None).unwrap();
        assert_eq!(log.unflushed(), 1);
        log.crash(true);
        assert_eq!(log.entries().len(), 1);
        assert_eq!(log.summary(TxnId(1)), yes());
        assert_eq!(log.half_executed(), vec![TxnId(1)]);
    }

    #[test]
    fn coordinator_of_cf_without_transit_commit_aborts_directly() {
        let mut log = DurableLog::new(n(0));
        log.append(TxnId(5), LogKind::ProposeLog, Some(meta(ProtocolKind::FlacCf))).unwrap();
        let mut peers = |_: NodeId, _: TxnId| Some(yes());
        let o = recover_coordinator(&log, &mut peers);
        assert_eq!(o[&TxnId(5)], RecoveryOutcome::AbortedDirect);
    }

    #[test]
    fn ff_coordinator_adopts_peer_decision_or_aborts_on_missing_yes() {
        let mut log = DurableLog::new(n(0));
        log.append(TxnId(5), LogKind::ProposeLog, Some(meta(ProtocolKind::FlacFf))).unwrap();
        let mut peers = |p: NodeId, _: TxnId| {
            Some(if p == n(2) {
                LogSummary { ready: Some(Vote::Yes), transit: None, decision: Some(Decision::Commit) }
            } else {
                yes()
            })
        };
        assert_eq!(
            recover_coordinator(&log, &mut peers)[&TxnId(5)],
            RecoveryOutcome::AdoptedPeerDecision(Decision::Commit)
        );
        let mut peers = |p: NodeId, _: TxnId| Some(if p == n(3) { LogSummary { ready: Some(Vote::No), ..Default::default() } } else { yes() });
        assert_eq!(
            recover_coordinator(&log, &mut peers)[&TxnId(5)],
            RecoveryOutcome::AbortedByMissingReadyYes
        );
        let mut peers = |_: NodeId, _: TxnId| Some(yes());
        assert_eq!(
            recover_coordinator(&log, &mut peers)[&TxnId(5)],
            RecoveryOutcome::CommittedByAllUndecide
        );
        let mut peers = |p: NodeId, _: TxnId| if p == n(3) { None } else { Some(yes()) };
        assert_eq!(recover_coordinator(&log, &mut peers)[&TxnId(5)], RecoveryOutcome::StillBlocked);
    }

    #[test]
    fn participant_rules() {
        let mut log = DurableLog::new(n(1));
        log.append(TxnId(1), LogKind::ReadyNo, Some(meta(ProtocolKind::FlacFf))).unwrap();
        log.append(TxnId(2), LogKind::ReadyYes, Some(meta(ProtocolKind::FlacCf))).unwrap();
        log.append(TxnId(3), LogKind::ReadyYes, Some(meta(ProtocolKind::FlacFf))).unwrap();
        let mut peers = |p: NodeId, t: TxnId| match (t.0, p.0) {
            (2, 0) => Some(LogSummary { decision: Some(Decision::Abort), ..Default::default() }),
            (3, 0) => Some(LogSummary::default()),
            _ => Some(yes()),
        };
        let o = recover_participant(&log, &mut peers);
        assert_eq!(o[&TxnId(1)], RecoveryOutcome::AbortedDirect);
        assert_eq!(o[&TxnId(2)], RecoveryOutcome::AdoptedPeerDecision(Decision::Abort));
        assert_eq!(o[&TxnId(3)], RecoveryOutcome::CommittedByAllUndecide);
    }

    #[test]
    fn cf_participant_termination_waits_for_coordinator() {
        let m = meta(ProtocolKind::FlacCf);
        let mut peers = |p: NodeId, _: TxnId| if p == n(0) { None } else { Some(yes()) };
        assert_eq!(
            run_termination(n(1), Role::Participant, &m, yes(), TxnId(1), &mut peers),
            TerminationResult::Blocked
        );
        let mut peers = |p: NodeId, _: TxnId| {
            if p == n(0) {
                Some(LogSummary { decision: Some(Decision::Abort), ..Default::default() })
            } else {
                Some(yes())
            }
        };
        assert_eq!(
            run_termination(n(1), Role::Participant, &m, yes(), TxnId(1), &mut peers),
            TerminationResult::Decided(Decision::Abort)
        );
    }

    #[test]
    fn refusal_logs_ready_no() {
        let mut log = DurableLog::new(n(2));
        let (s, refused) = answer_participant_query(&mut log, TxnId(9));
        assert!(refused);
        assert_eq!(s.ready, Some(Vote::No));
        let (_, again) = answer_participant_query(&mut log, TxnId(9));
        assert!(!again);
    }

    #[test]
    fn resolver_backoff_is_capped() {
        let mut r = Resolver::new(
            TxnId(1),
            n(1),
            Role::Participant,
            &meta(ProtocolKind::FlacFf),
            ResolveMode::Termination,
            yes(),
            1_000,
            8_000,
        );
        let ResolverStep::Wait(a) = r.start() else { panic!("blocked at start") };
        assert_eq!(a.len(), 4);
        for _ in 0..10 {
            r.on_retry();
        }
        assert_eq!(r.backoff(), 8_000);
        assert_eq!(r.on_reply(n(2), yes()), ResolverStep::Wait(vec![]));
        assert_eq!(
            r.on_reply(n(3), yes()),
            ResolverStep::Decided(Decision::Commit, RecoveryOutcome::CommittedByAllUndecide)
        );
    }
}
