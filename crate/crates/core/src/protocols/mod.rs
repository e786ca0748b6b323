//! Per-node, per-transaction protocol state machines.
//!
//! A machine owns the volatile state of one node's role in one transaction.
//! `step` consumes one event and returns the actions the node must perform,
//! in order. Machines never touch the network, the clock or the disk; the
//! runtime executes the actions. Identical `(state, event)` pairs always
//! produce identical `(state', actions)`.
//!
//! Action ordering invariants every machine upholds:
//! - `AppendLog(CommitLog | AbortLog)` precedes the matching `DecideLocal`.
//! - Protocols that transmit before deciding append their transit record
//!   before the first decision `Send`.
//! - `DecideLocal` appears at most once per machine.

pub mod cf;
pub mod ff;
pub mod nf;
pub mod twopc;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::delay::{self, DelayMatrix};
use crate::model::{
    Decision, LogKind, LogMeta, Message, Micros, NodeId, Payload, ProtocolKind, Propose,
    ResultSet, ResultTuple, TxnId, TxnOps, Vote,
};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    /// Network-timeout window (W_C*, W_Ci or the vote round trip).
    Window,
    /// Crash timeout while waiting for a decision.
    CrashTimeout,
    /// Coordinator-side cutoff separating late from silent replies.
    Detect,
    /// 2PC coordinator waiting for acknowledgements.
    AckWait,
    /// Termination/recovery query retry.
    Retry,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StartTxn {
    pub ops: BTreeMap<NodeId, TxnOps>,
    pub protocol: ProtocolKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProtocolEvent {
    Deliver(Message),
    TimerFired(TimerKind),
    Start(StartTxn),
}

/// When a participant's reply reached the coordinator.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyTiming {
    InWindow,
    Late,
    Silent,
}

/// Validate-phase evidence handed to the failure detector once per
/// transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidationReport {
    pub txn: TxnId,
    pub protocol: ProtocolKind,
    /// Replies that arrived within the coordinator's window.
    pub in_window: ResultSet,
    pub timing: BTreeMap<NodeId, ReplyTiming>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Send(Message),
    SetTimer(TimerKind, Micros),
    AppendLog(LogKind, Option<LogMeta>),
    DecideLocal(Decision),
    ReplyClient(Decision),
    EnterTermination,
    /// A timer fired and changed the machine's course.
    TimedOut(TimerKind),
    Validated(ValidationReport),
    /// An impossible input was observed; surfaced to the checker.
    Fault(String),
}

/// Read-only context for one step.
#[derive(Clone, Copy, Debug)]
pub struct StepCtx<'a> {
    pub node: NodeId,
    /// Local (possibly skewed) clock reading in µs.
    pub now: i64,
    pub delays: &'a DelayMatrix,
    pub crash_timeout: Micros,
}

/// Local vote oracle: the shard's lock table, or a stub in tests.
pub trait VoteSource {
    fn determine_local_vote(&mut self, txn: TxnId, ops: &TxnOps) -> Vote;
}

impl<F: FnMut(TxnId, &TxnOps) -> Vote> VoteSource for F {
    fn determine_local_vote(&mut self, txn: TxnId, ops: &TxnOps) -> Vote {
        self(txn, ops)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParticipantPhase {
    Idle,
    /// Voted Yes in a coordinator-centric protocol; awaiting the decision.
    Voted,
    WindowOpen,
    /// FLAC_CF: all votes were Yes, waiting for the decision.
    TentativeCommit,
    /// FLAC_FF: window expired, Undecide sent, waiting for the decision.
    AwaitDecision,
    Terminating,
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParticipantState {
    pub txn: TxnId,
    pub node: NodeId,
    pub phase: ParticipantPhase,
    pub protocol: Option<ProtocolKind>,
    pub coordinator: Option<NodeId>,
    pub participants: BTreeSet<NodeId>,
    pub vote: Option<Vote>,
    pub received_votes: BTreeMap<NodeId, Vote>,
    pub decision: Option<Decision>,
    pub window_deadline: Option<i64>,
    pub crash_deadline: Option<i64>,
}

impl ParticipantState {
    pub fn new(txn: TxnId, node: NodeId) -> Self {
        Self {
            txn,
            node,
            phase: ParticipantPhase::Idle,
            protocol: None,
            coordinator: None,
            participants: BTreeSet::new(),
            vote: None,
            received_votes: BTreeMap::new(),
            decision: None,
            window_deadline: None,
            crash_deadline: None,
        }
    }

    /// Rebuilds an undecided machine from durable metadata after a restart.
    pub fn recovered(txn: TxnId, node: NodeId, meta: &LogMeta, vote: Option<Vote>) -> Self {
        let mut s = Self::new(txn, node);
        s.protocol = Some(meta.protocol);
        s.coordinator = Some(meta.coordinator);
        s.participants = meta.participants.iter().copied().collect();
        s.vote = vote;
        s.phase = ParticipantPhase::Terminating;
        s
    }

    pub fn meta(&self) -> Option<LogMeta> {
        Some(LogMeta {
            protocol: self.protocol?,
            coordinator: self.coordinator?,
            participants: self.participants.iter().copied().collect(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.phase == ParticipantPhase::Done
    }

    pub fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        let me = self.node;
        self.participants.iter().copied().filter(move |&p| p != me)
    }

    /// Advances the machine by one event.
    pub fn step(
        &mut self,
        ctx: &StepCtx<'_>,
        event: ProtocolEvent,
        votes: &mut dyn VoteSource,
    ) -> Vec<Action> {
        let mut out = Vec::new();
        if self.phase == ParticipantPhase::Done {
            if let (Some(ProtocolKind::TwoPc), ProtocolEvent::Deliver(m)) = (self.protocol, &event) {
                twopc::ack_if_from_coordinator(self, m, &mut out);
            }
            return out;
        }
        match event {
            ProtocolEvent::Start(_) => out.push(Action::Fault("participant received Start".into())),
            ProtocolEvent::Deliver(m) => match m.payload {
                Payload::Propose(p) => {
                    if self.protocol.is_some() {
                        return out;
                    }
                    self.protocol = Some(p.protocol);
                    self.coordinator = Some(m.from);
                    self.participants = p.participants.iter().copied().collect();
                    let stale: Vec<NodeId> = self
                        .received_votes
                        .keys()
                        .filter(|n| !self.participants.contains(n))
                        .copied()
                        .collect();
                    for n in stale {
                        self.received_votes.remove(&n);
                    }
                    let t_recv = ctx.now;
                    match p.protocol {
                        ProtocolKind::FlacFf => ff::on_propose(self, ctx, &p, t_recv, votes, &mut out),
                        ProtocolKind::FlacCf => cf::on_propose(self, ctx, &p, t_recv, votes, &mut out),
                        ProtocolKind::FlacNf => nf::on_propose(self, ctx, &p, votes, &mut out),
                        ProtocolKind::TwoPc => twopc::on_propose(self, ctx, &p, votes, &mut out),
                    }
                }
                Payload::Vote(v) => {
                    if self.protocol.is_none() {
                        self.received_votes.insert(m.from, v);
                        return out;
                    }
                    if !self.participants.contains(&m.from) {
                        return out;
                    }
                    match self.protocol {
                        Some(ProtocolKind::FlacFf) => ff::on_vote(self, ctx, m.from, v, &mut out),
                        Some(ProtocolKind::FlacCf) => cf::on_vote(self, ctx, m.from, v, &mut out),
                        _ => {}
                    }
                }
                Payload::Decision(d) => {
                    if self.protocol.is_none() {
                        match d {
                            Decision::Abort => {
                                out.push(Action::AppendLog(LogKind::AbortLog, None));
                                self.finish(Decision::Abort, &mut out);
                            }
                            _ => out.push(Action::Fault(format!(
                                "{} learned {:?} for {} before voting",
                                self.node, d, self.txn
                            ))),
                        }
                        return out;
                    }
                    self.on_decision(m.from, d, &mut out);
                }
                _ => {}
            },
            ProtocolEvent::TimerFired(kind) => match self.protocol {
                Some(ProtocolKind::FlacFf) => ff::on_timer(self, ctx, kind, &mut out),
                Some(ProtocolKind::FlacCf) => cf::on_timer(self, ctx, kind, &mut out),
                Some(ProtocolKind::FlacNf) | Some(ProtocolKind::TwoPc) => {
                    if kind == TimerKind::CrashTimeout && self.phase == ParticipantPhase::Voted {
                        out.push(Action::TimedOut(kind));
                        out.push(Action::EnterTermination);
                        self.phase = ParticipantPhase::Terminating;
                    }
                }
                None => {}
            },
        }
        out
    }

    fn on_decision(&mut self, from: NodeId, d: Decision, out: &mut Vec<Action>) {
        if !d.is_final() {
            out.push(Action::Fault(format!("undecide broadcast for {}", self.txn)));
            return;
        }
        if self.phase == ParticipantPhase::Idle {
            return;
        }
        let from_coordinator = Some(from) == self.coordinator;
        if self.protocol == Some(ProtocolKind::TwoPc) && !from_coordinator {
            return;
        }
        if self.protocol == Some(ProtocolKind::FlacCf) && d == Decision::Abort && cf::abort_in_window(self, out) {
            return;
        }
        self.adopt(d, false, out);
    }

    /// Applies a decision learned from a message or from termination.
    ///
    /// `announce` makes a FLAC_FF node forward the decision it resolved on
    /// its own; transmit-before-decide protocols always forward.
    pub fn adopt(&mut self, d: Decision, announce: bool, out: &mut Vec<Action>) {
        if self.is_done() {
            return;
        }
        let Some(protocol) = self.protocol else {
            return;
        };
        if protocol.transmits_before_decide() {
            out.push(Action::AppendLog(LogKind::transit(d), None));
            for p in self.peers().collect::<Vec<_>>() {
                out.push(Action::Send(Message::new(self.txn, self.node, p, Payload::Decision(d))));
            }
        } else if announce && protocol == ProtocolKind::FlacFf {
            let targets: Vec<NodeId> = self.peers().chain(self.coordinator).collect();
            for p in targets {
                out.push(Action::Send(Message::new(self.txn, self.node, p, Payload::Decision(d))));
            }
        }
        out.push(Action::AppendLog(LogKind::decided(d), None));
        self.finish(d, out);
        if protocol == ProtocolKind::TwoPc {
            if let Some(c) = self.coordinator {
                out.push(Action::Send(Message::new(self.txn, self.node, c, Payload::Ack)));
            }
        }
    }

    pub(crate) fn finish(&mut self, d: Decision, out: &mut Vec<Action>) {
        self.decision = Some(d);
        self.phase = ParticipantPhase::Done;
        out.push(Action::DecideLocal(d));
    }

    pub(crate) fn send_result(&self, vote: Vote, d: Decision, out: &mut Vec<Action>) {
        if let Some(c) = self.coordinator {
            let t = ResultTuple {
                node: self.node,
                vote,
                decision: d,
            };
            out.push(Action::Send(Message::new(self.txn, self.node, c, Payload::Result(t))));
        }
    }

    pub(crate) fn broadcast_vote(&self, v: Vote, out: &mut Vec<Action>) {
        for p in self.peers() {
            out.push(Action::Send(Message::new(self.txn, self.node, p, Payload::Vote(v))));
        }
    }

    /// Votes and logs the Ready record carrying the transaction metadata.
    pub(crate) fn vote(&mut self, ops: &TxnOps, votes: &mut dyn VoteSource, out: &mut Vec<Action>) -> Vote {
        let v = votes.determine_local_vote(self.txn, ops);
        self.vote = Some(v);
        self.received_votes.insert(self.node, v);
        out.push(Action::AppendLog(LogKind::ready(v), self.meta()));
        v
    }

    pub(crate) fn open_window(
        &mut self,
        ctx: &StepCtx<'_>,
        p: &Propose,
        t_recv: i64,
        out: &mut Vec<Action>,
    ) {
        let coordinator = self.coordinator.expect("set on propose");
        let w = delay::participant_window(
            self.node,
            p.t_sent,
            t_recv,
            coordinator,
            &self.participants,
            ctx.delays,
        )
        .unwrap_or(0);
        self.window_deadline = Some(t_recv + w as i64);
        self.phase = ParticipantPhase::WindowOpen;
        out.push(Action::SetTimer(TimerKind::Window, w));
    }

    pub(crate) fn arm_crash_timer(&mut self, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
        self.crash_deadline = Some(ctx.now + ctx.crash_timeout as i64);
        out.push(Action::SetTimer(TimerKind::CrashTimeout, ctx.crash_timeout));
    }

    pub(crate) fn any_no(&self) -> bool {
        self.received_votes.values().any(|&v| v == Vote::No)
    }

    pub(crate) fn all_yes(&self) -> bool {
        self.participants
            .iter()
            .all(|p| self.received_votes.get(p) == Some(&Vote::Yes))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordinatorPhase {
    Idle,
    Collecting,
    /// 2PC: decision sent, collecting acknowledgements.
    Deciding,
    Done,
    Termination,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoordinatorState {
    pub txn: TxnId,
    pub node: NodeId,
    pub protocol: ProtocolKind,
    pub phase: CoordinatorPhase,
    pub participants: BTreeSet<NodeId>,
    /// Every result received so far.
    pub results: ResultSet,
    /// Results received within the window.
    pub in_window: ResultSet,
    /// Votes of the coordinator-centric protocols.
    pub votes: BTreeMap<NodeId, Vote>,
    pub arrivals: BTreeMap<NodeId, i64>,
    pub t_sent: i64,
    pub window: Micros,
    pub window_deadline: i64,
    pub decision: Option<Decision>,
    pub acks: BTreeSet<NodeId>,
    pub replied: bool,
    pub reported: bool,
}

impl CoordinatorState {
    pub fn new(txn: TxnId, node: NodeId, protocol: ProtocolKind) -> Self {
        Self {
            txn,
            node,
            protocol,
            phase: CoordinatorPhase::Idle,
            participants: BTreeSet::new(),
            results: ResultSet::new(txn, []),
            in_window: ResultSet::new(txn, []),
            votes: BTreeMap::new(),
            arrivals: BTreeMap::new(),
            t_sent: 0,
            window: 0,
            window_deadline: 0,
            decision: None,
            acks: BTreeSet::new(),
            replied: false,
            reported: true,
        }
    }

    /// Rebuilds an undecided coordinator from its ProposeLog after a restart.
    pub fn recovered(txn: TxnId, node: NodeId, meta: &LogMeta) -> Self {
        let mut s = Self::new(txn, node, meta.protocol);
        s.participants = meta.participants.iter().copied().collect();
        s.results = ResultSet::new(txn, s.participants.iter().copied());
        s.in_window = s.results.clone();
        s.phase = CoordinatorPhase::Termination;
        s
    }

    pub fn meta(&self) -> LogMeta {
        LogMeta {
            protocol: self.protocol,
            coordinator: self.node,
            participants: self.participants.iter().copied().collect(),
        }
    }

    pub fn is_decided(&self) -> bool {
        self.decision.is_some()
    }

    /// True once nothing more can happen for this transaction here.
    pub fn is_finished(&self) -> bool {
        self.phase == CoordinatorPhase::Done && self.reported
    }

    pub fn step(&mut self, ctx: &StepCtx<'_>, event: ProtocolEvent) -> Vec<Action> {
        let mut out = Vec::new();
        match event {
            ProtocolEvent::Start(start) => {
                if self.phase == CoordinatorPhase::Idle {
                    self.start(ctx, start, &mut out);
                }
            }
            ProtocolEvent::Deliver(m) => {
                if !self.participants.contains(&m.from) {
                    return out;
                }
                match m.payload {
                    Payload::Result(t) => {
                        if t.node != m.from {
                            out.push(Action::Fault(format!("{} relayed a result for {}", m.from, t.node)));
                            return out;
                        }
                        self.record_arrival(ctx, m.from);
                        if let Err(e) = self.results.insert(t) {
                            out.push(Action::Fault(e.to_string()));
                            return out;
                        }
                        if self.arrivals[&m.from] - self.t_sent <= self.window as i64 {
                            let _ = self.in_window.insert(t);
                        }
                        match self.protocol {
                            ProtocolKind::FlacFf => ff::on_result(self, ctx, &mut out),
                            ProtocolKind::FlacCf => cf::on_result(self, ctx, &mut out),
                            _ => {}
                        }
                    }
                    Payload::Vote(v) => {
                        self.record_arrival(ctx, m.from);
                        if self.votes.insert(m.from, v).is_none() {
                            let t = match v {
                                Vote::Yes => ResultTuple { node: m.from, vote: v, decision: Decision::Undecide },
                                Vote::No => ResultTuple { node: m.from, vote: v, decision: Decision::Abort },
                            };
                            let _ = self.results.insert(t);
                            if self.arrivals[&m.from] - self.t_sent <= self.window as i64 {
                                let _ = self.in_window.insert(t);
                            }
                        }
                        match self.protocol {
                            ProtocolKind::FlacNf => nf::on_vote(self, ctx, &mut out),
                            ProtocolKind::TwoPc => twopc::on_vote(self, ctx, &mut out),
                            _ => {}
                        }
                    }
                    Payload::Decision(d) => {
                        if d.is_final() && self.decision.is_none() {
                            let targets = self.results.undecided_or_missing();
                            self.decide(ctx, d, targets, &mut out);
                        }
                    }
                    Payload::Ack => {
                        if self.protocol == ProtocolKind::TwoPc {
                            twopc::on_ack(self, m.from, &mut out);
                        }
                    }
                    _ => {}
                }
                self.maybe_report(false, &mut out);
            }
            ProtocolEvent::TimerFired(kind) => {
                match kind {
                    TimerKind::Window => match self.protocol {
                        ProtocolKind::FlacFf => ff::on_window(self, ctx, &mut out),
                        ProtocolKind::FlacCf => cf::on_window(self, ctx, &mut out),
                        ProtocolKind::FlacNf => nf::on_window(self, ctx, &mut out),
                        ProtocolKind::TwoPc => twopc::on_window(self, ctx, &mut out),
                    },
                    TimerKind::Detect => self.maybe_report(true, &mut out),
                    TimerKind::AckWait => twopc::on_ack_timeout(self, &mut out),
                    _ => {}
                }
            }
        }
        out
    }

    fn start(&mut self, ctx: &StepCtx<'_>, start: StartTxn, out: &mut Vec<Action>) {
        self.participants = start.ops.keys().copied().collect();
        self.results = ResultSet::new(self.txn, self.participants.iter().copied());
        self.in_window = self.results.clone();
        self.t_sent = ctx.now;
        self.phase = CoordinatorPhase::Collecting;
        out.push(Action::AppendLog(LogKind::ProposeLog, Some(self.meta())));
        if self.participants.is_empty() {
            self.decide(ctx, Decision::Commit, Vec::new(), out);
            return;
        }
        let participants: Vec<NodeId> = self.participants.iter().copied().collect();
        for (to, ops) in start.ops {
            let p = Propose {
                ops,
                t_sent: self.t_sent,
                participants: participants.clone(),
                protocol: self.protocol,
            };
            out.push(Action::Send(Message::new(self.txn, self.node, to, Payload::Propose(p))));
        }
        let window = match self.protocol {
            ProtocolKind::FlacFf | ProtocolKind::FlacCf => {
                delay::coordinator_window(self.node, &self.participants, ctx.delays)
            }
            ProtocolKind::FlacNf | ProtocolKind::TwoPc => {
                delay::round_trip_window(self.node, &self.participants, ctx.delays)
            }
        }
        .unwrap_or(0);
        self.window = window;
        self.window_deadline = self.t_sent + window as i64;
        out.push(Action::SetTimer(TimerKind::Window, window));
        if self.protocol != ProtocolKind::TwoPc {
            self.reported = false;
            out.push(Action::SetTimer(TimerKind::Detect, ctx.crash_timeout));
        }
    }

    fn record_arrival(&mut self, ctx: &StepCtx<'_>, from: NodeId) {
        self.arrivals.entry(from).or_insert(ctx.now);
    }

    /// Emits the validation report once: when every participant has
    /// answered, or at the crash deadline.
    fn maybe_report(&mut self, deadline: bool, out: &mut Vec<Action>) {
        if self.reported || self.phase == CoordinatorPhase::Idle {
            return;
        }
        let all_in = self.participants.iter().all(|p| self.arrivals.contains_key(p));
        if !all_in && !deadline {
            return;
        }
        let timing = self
            .participants
            .iter()
            .map(|&p| {
                let t = match self.arrivals.get(&p) {
                    Some(&at) if at - self.t_sent <= self.window as i64 => ReplyTiming::InWindow,
                    Some(_) => ReplyTiming::Late,
                    None => ReplyTiming::Silent,
                };
                (p, t)
            })
            .collect();
        self.reported = true;
        out.push(Action::Validated(ValidationReport {
            txn: self.txn,
            protocol: self.protocol,
            in_window: self.in_window.clone(),
            timing,
        }));
    }

    /// Decides, logs, notifies `targets` and answers the client.
    pub fn decide(&mut self, ctx: &StepCtx<'_>, d: Decision, targets: Vec<NodeId>, out: &mut Vec<Action>) {
        if self.decision.is_some() || !d.is_final() {
            return;
        }
        self.decision = Some(d);
        if self.protocol.transmits_before_decide() {
            out.push(Action::AppendLog(LogKind::transit(d), None));
        }
        out.push(Action::AppendLog(LogKind::decided(d), None));
        for to in targets {
            out.push(Action::Send(Message::new(self.txn, self.node, to, Payload::Decision(d))));
        }
        out.push(Action::DecideLocal(d));
        if self.protocol == ProtocolKind::TwoPc && !self.participants.is_empty() {
            self.phase = CoordinatorPhase::Deciding;
            out.push(Action::SetTimer(TimerKind::AckWait, ctx.crash_timeout));
            return;
        }
        self.reply(d, out);
    }

    pub(crate) fn reply(&mut self, d: Decision, out: &mut Vec<Action>) {
        if !self.replied {
            self.replied = true;
            out.push(Action::ReplyClient(d));
        }
        self.phase = CoordinatorPhase::Done;
    }

    /// Answers a peer's log query. Coordinator-centric protocols settle an
    /// undecided transaction as Abort first so the answer is final.
    pub fn answer_query(&mut self, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
        if self.decision.is_none() && self.protocol.coordinator_decides() {
            out.push(Action::TimedOut(TimerKind::CrashTimeout));
            let targets: Vec<NodeId> = self.participants.iter().copied().collect();
            self.decide(ctx, Decision::Abort, targets, out);
        }
    }

    /// Applies a decision reached by the termination or recovery procedure.
    pub fn resolve(&mut self, ctx: &StepCtx<'_>, d: Decision, out: &mut Vec<Action>) {
        let targets: Vec<NodeId> = self.participants.iter().copied().collect();
        self.decide(ctx, d, targets, out);
    }
}
