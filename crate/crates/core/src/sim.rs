//! Deterministic discrete-event network simulator.
//!
//! Events are ordered by `(time, class, insertion sequence)`. At equal time
//! failure-control events run first, then deliveries, then timers, then
//! client issues, so a message arriving exactly at a window deadline is
//! inside the window. All randomness comes from one seeded generator, so a
//! `(seed, scenario)` pair fixes the whole run.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Message, Micros, NodeId, TxnId};
use crate::protocols::TimerKind;
use crate::trace::{FailureTarget, GlobalTrace, TraceEvent};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("failure entry {0}: tau must be positive")]
    ZeroTau(usize),
    #[error("failure entry {0}: period must be at least tau")]
    ShortPeriod(usize),
    #[error("failure entry {0}: crash failures target nodes, not links")]
    CrashOnLink(usize),
    #[error("failure entries {0} and {1} overlap on {2:?}")]
    Overlap(usize, usize, FailureTarget),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Crash,
    Delay,
}

/// `cycles` repetitions of: active for `tau`, inactive until the next
/// period (default period `2·tau`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub kind: FailureKind,
    pub target: FailureTarget,
    pub tau: Micros,
    #[serde(default)]
    pub extra_delay: Micros,
    #[serde(default)]
    pub start: Micros,
    pub cycles: u32,
    #[serde(default)]
    pub period: Option<Micros>,
}

impl FailureEntry {
    pub fn period(&self) -> Micros {
        self.period.unwrap_or(2 * self.tau)
    }

    /// Active intervals `[from, to)`.
    pub fn intervals(&self) -> Vec<(Micros, Micros)> {
        (0..self.cycles as u64)
            .map(|c| {
                let s = self.start + c * self.period();
                (s, s + self.tau)
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSchedule {
    pub entries: Vec<FailureEntry>,
}

impl FailureSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    /// Crash `target` for `tau` in every `2·tau` cycle.
    pub fn crash_cycles(target: NodeId, tau: Micros, cycles: u32) -> Self {
        Self {
            entries: vec![FailureEntry {
                kind: FailureKind::Crash,
                target: FailureTarget::Node(target),
                tau,
                extra_delay: 0,
                start: 0,
                cycles,
                period: None,
            }],
        }
    }

    /// Delay every message to or from `target` by `extra` for `tau` in every
    /// `2·tau` cycle.
    pub fn delay_cycles(target: NodeId, tau: Micros, extra: Micros, cycles: u32) -> Self {
        Self {
            entries: vec![FailureEntry {
                kind: FailureKind::Delay,
                target: FailureTarget::Node(target),
                tau,
                extra_delay: extra,
                start: 0,
                cycles,
                period: None,
            }],
        }
    }

    /// A crash cycle of `crash_tau` followed by a delay cycle of `delay_tau`,
    /// repeated.
    pub fn composite(target: NodeId, crash_tau: Micros, delay_tau: Micros, extra: Micros, cycles: u32) -> Self {
        let period = 2 * crash_tau + 2 * delay_tau;
        Self {
            entries: vec![
                FailureEntry {
                    kind: FailureKind::Crash,
                    target: FailureTarget::Node(target),
                    tau: crash_tau,
                    extra_delay: 0,
                    start: 0,
                    cycles,
                    period: Some(period),
                },
                FailureEntry {
                    kind: FailureKind::Delay,
                    target: FailureTarget::Node(target),
                    tau: delay_tau,
                    extra_delay: extra,
                    start: 2 * crash_tau,
                    cycles,
                    period: Some(period),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        for (i, e) in self.entries.iter().enumerate() {
            if e.tau == 0 {
                return Err(ScheduleError::ZeroTau(i));
            }
            if e.period() < e.tau {
                return Err(ScheduleError::ShortPeriod(i));
            }
            if e.kind == FailureKind::Crash && matches!(e.target, FailureTarget::Link(..)) {
                return Err(ScheduleError::CrashOnLink(i));
            }
        }
        for (i, a) in self.entries.iter().enumerate() {
            for (j, b) in self.entries.iter().enumerate().skip(i + 1) {
                let shared = a.target.nodes().iter().any(|n| b.target.nodes().contains(n));
                if !shared {
                    continue;
                }
                for (s1, e1) in a.intervals() {
                    for (s2, e2) in b.intervals() {
                        if s1 < e2 && s2 < e1 {
                            return Err(ScheduleError::Overlap(i, j, a.target));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Every active interval, tagged with its entry.
    pub fn intervals(&self) -> Vec<(FailureKind, FailureTarget, Micros, Micros, Micros)> {
        let mut v = Vec::new();
        for e in &self.entries {
            for (s, t) in e.intervals() {
                v.push((e.kind, e.target, s, t, e.extra_delay));
            }
        }
        v.sort_by_key(|i| (i.2, i.3, i.0, i.1));
        v
    }

    /// Time after which no failure is active.
    pub fn end(&self) -> Micros {
        self.intervals().iter().map(|i| i.3).max().unwrap_or(0)
    }

    pub fn max_extra_delay(&self) -> Micros {
        self.entries.iter().map(|e| e.extra_delay).max().unwrap_or(0)
    }
}

/// One-way delay of a link: `base` plus uniform jitter in `[0, jitter]`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub base: Micros,
    pub jitter: Micros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SimEvent {
    Deliver(Message),
    Timer {
        node: NodeId,
        txn: TxnId,
        kind: TimerKind,
        epoch: u32,
    },
    Crash(NodeId),
    Recover(NodeId),
    DelayOn {
        target: FailureTarget,
        extra: Micros,
    },
    DelayOff {
        target: FailureTarget,
    },
    Client(u32),
}

impl SimEvent {
    fn class(&self) -> u8 {
        match self {
            SimEvent::Crash(_) | SimEvent::Recover(_) | SimEvent::DelayOn { .. } | SimEvent::DelayOff { .. } => 0,
            SimEvent::Deliver(_) => 1,
            SimEvent::Timer { .. } => 2,
            SimEvent::Client(_) => 3,
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
struct Scheduled {
    at: Micros,
    class: u8,
    seq: u64,
    event: SimEvent,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.class, self.seq).cmp(&(other.at, other.class, other.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Receives the events the world does not fully handle itself.
pub trait Sink {
    fn handle(&mut self, world: &mut SimWorld, event: SimEvent);
}

pub struct SimWorld {
    now: Micros,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    rng: ChaCha8Rng,
    default_link: LinkSpec,
    links: BTreeMap<(NodeId, NodeId), LinkSpec>,
    alive: BTreeMap<NodeId, bool>,
    clock_skew: BTreeMap<NodeId, i64>,
    injections: BTreeMap<FailureTarget, Micros>,
    record_messages: bool,
    pub trace: GlobalTrace,
}

impl SimWorld {
    pub fn new(seed: u64, nodes: impl IntoIterator<Item = NodeId>, default_link: LinkSpec) -> Self {
        Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            default_link,
            links: BTreeMap::new(),
            alive: nodes.into_iter().map(|n| (n, true)).collect(),
            clock_skew: BTreeMap::new(),
            injections: BTreeMap::new(),
            record_messages: true,
            trace: GlobalTrace::new(),
        }
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn set_link(&mut self, a: NodeId, b: NodeId, spec: LinkSpec) {
        self.links.insert(if a <= b { (a, b) } else { (b, a) }, spec);
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> LinkSpec {
        let k = if a <= b { (a, b) } else { (b, a) };
        self.links.get(&k).copied().unwrap_or(self.default_link)
    }

    pub fn set_skew(&mut self, n: NodeId, skew: i64) {
        self.clock_skew.insert(n, skew);
    }

    /// Message send/deliver records can be switched off for long sweeps.
    pub fn set_record_messages(&mut self, on: bool) {
        self.record_messages = on;
    }

    /// The node's clock reading.
    pub fn local_now(&self, n: NodeId) -> i64 {
        self.now as i64 + self.clock_skew.get(&n).copied().unwrap_or(0)
    }

    pub fn is_alive(&self, n: NodeId) -> bool {
        self.alive.get(&n).copied().unwrap_or(false)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn record(&mut self, event: TraceEvent) {
        self.trace.push(self.now, event);
    }

    pub fn schedule(&mut self, at: Micros, event: SimEvent) {
        let at = at.max(self.now);
        self.seq += 1;
        let class = event.class();
        self.queue.push(Reverse(Scheduled {
            at,
            class,
            seq: self.seq,
            event,
        }));
    }

    pub fn set_timer(&mut self, node: NodeId, txn: TxnId, kind: TimerKind, epoch: u32, after: Micros) {
        let at = self.now + after;
        self.schedule(at, SimEvent::Timer { node, txn, kind, epoch });
    }

    /// Extra delay currently injected on the path `a → b`.
    pub fn injected(&self, a: NodeId, b: NodeId) -> Micros {
        self.injections
            .iter()
            .filter(|(t, _)| t.affects(a, b))
            .map(|(_, e)| *e)
            .max()
            .unwrap_or(0)
    }

    /// Schedules delivery at `now + base + jitter + injection`. Sends from a
    /// crashed node are ignored.
    pub fn send(&mut self, m: Message) {
        if !self.is_alive(m.from) {
            return;
        }
        let spec = self.link(m.from, m.to);
        let jitter = if spec.jitter > 0 {
            self.rng.random_range(0..=spec.jitter)
        } else {
            0
        };
        let delay = spec.base + jitter + self.injected(m.from, m.to);
        if self.record_messages {
            self.record(TraceEvent::Send {
                kind: m.kind(),
                txn: m.txn,
                from: m.from,
                to: m.to,
            });
        }
        let at = self.now + delay;
        self.schedule(at, SimEvent::Deliver(m));
    }

    /// Inserts crash/recover and delay on/off events for every interval.
    pub fn apply_failure_schedule(&mut self, fs: &FailureSchedule) -> Result<(), ScheduleError> {
        fs.validate()?;
        for (kind, target, from, to, extra) in fs.intervals() {
            match (kind, target) {
                (FailureKind::Crash, FailureTarget::Node(n)) => {
                    self.schedule(from, SimEvent::Crash(n));
                    self.schedule(to, SimEvent::Recover(n));
                }
                (FailureKind::Delay, t) => {
                    self.schedule(from, SimEvent::DelayOn { target: t, extra });
                    self.schedule(to, SimEvent::DelayOff { target: t });
                }
                (FailureKind::Crash, FailureTarget::Link(..)) => unreachable!("validated"),
            }
        }
        Ok(())
    }

    pub fn next_time(&self) -> Option<Micros> {
        self.queue.peek().map(|Reverse(s)| s.at)
    }

    /// Drains every event with time `<= t`, then sets the clock to `t`.
    pub fn step_until(&mut self, sink: &mut impl Sink, t: Micros) {
        while let Some(Reverse(top)) = self.queue.peek() {
            if top.at > t {
                break;
            }
            let Reverse(s) = self.queue.pop().expect("peeked");
            self.now = s.at;
            self.dispatch(sink, s.event);
        }
        self.now = self.now.max(t);
    }

    fn dispatch(&mut self, sink: &mut impl Sink, event: SimEvent) {
        match event {
            SimEvent::Deliver(m) => {
                let (kind, txn, from, to) = (m.kind(), m.txn, m.from, m.to);
                if self.is_alive(to) {
                    if self.record_messages {
                        self.record(TraceEvent::Deliver { kind, txn, from, to });
                    }
                    sink.handle(self, SimEvent::Deliver(m));
                } else if self.record_messages {
                    self.record(TraceEvent::Drop { kind, txn, from, to });
                }
            }
            SimEvent::Timer { node, .. } => {
                if self.is_alive(node) {
                    sink.handle(self, event);
                }
            }
            SimEvent::Crash(n) => {
                if self.is_alive(n) {
                    self.alive.insert(n, false);
                    self.record(TraceEvent::Crash { node: n });
                    sink.handle(self, event);
                }
            }
            SimEvent::Recover(n) => {
                if !self.is_alive(n) {
                    self.alive.insert(n, true);
                    self.record(TraceEvent::Recover { node: n });
                    sink.handle(self, event);
                }
            }
            SimEvent::DelayOn { target, extra } => {
                self.injections.insert(target, extra);
                self.record(TraceEvent::DelayOn { target, extra_us: extra });
                sink.handle(self, event);
            }
            SimEvent::DelayOff { target } => {
                self.injections.remove(&target);
                self.record(TraceEvent::DelayOff { target });
                sink.handle(self, event);
            }
            SimEvent::Client(_) => sink.handle(self, event),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Payload, Vote};

    struct Log(Vec<(Micros, SimEvent)>);

    impl Sink for Log {
        fn handle(&mut self, w: &mut SimWorld, e: SimEvent) {
            self.0.push((w.now(), e));
        }
    }

    fn m(from: u32, to: u32, txn: u64) -> Message {
        Message::new(TxnId(txn), NodeId(from), NodeId(to), Payload::Vote(Vote::Yes))
    }

    fn world(jitter: Micros) -> SimWorld {
        SimWorld::new(7, [NodeId(0), NodeId(1), NodeId(2)], LinkSpec { base: 10, jitter })
    }

    #[test]
    fn fixed_link_delivers_after_base() {
        let mut w = world(0);
        w.send(m(0, 1, 1));
        let mut log = Log(vec![]);
        w.step_until(&mut log, 100);
        assert_eq!(log.0, vec![(10, SimEvent::Deliver(m(0, 1, 1)))]);
        assert_eq!(w.now(), 100);
        let mut empty = Log(vec![]);
        w.step_until(&mut empty, 200);
        assert!(empty.0.is_empty());
        assert_eq!(w.now(), 200);
    }

    #[test]
    fn injection_adds_extra_delay() {
        let mut w = world(0);
        let fs = FailureSchedule::delay_cycles(NodeId(1), 50, 100, 1);
        w.apply_failure_schedule(&fs).unwrap();
        let mut log = Log(vec![]);
        w.step_until(&mut log, 0);
        w.send(m(0, 1, 1));
        w.send(m(0, 2, 2));
        w.step_until(&mut log, 1_000);
        let delivered: Vec<_> = log
            .0
            .iter()
            .filter_map(|(t, e)| match e {
                SimEvent::Deliver(x) => Some((*t, x.txn.0)),
                _ => None,
            })
            .collect();
        assert_eq!(delivered, vec![(10, 2), (110, 1)]);
    }

    #[test]
    fn jitter_reorders_with_some_seed() {
        let mut reordered = false;
        for seed in 0..50 {
            let mut w = SimWorld::new(seed, [NodeId(0), NodeId(1)], LinkSpec { base: 10, jitter: 10 });
            w.send(m(0, 1, 1));
            w.send(m(0, 1, 2));
            let mut log = Log(vec![]);
            w.step_until(&mut log, 100);
            if let SimEvent::Deliver(first) = &log.0[0].1 {
                reordered |= first.txn == TxnId(2);
            }
        }
        assert!(reordered);
    }

    #[test]
    fn crashed_receiver_consumes_silently() {
        let mut w = world(0);
        w.schedule(5, SimEvent::Crash(NodeId(1)));
        w.send(m(0, 1, 1));
        let mut log = Log(vec![]);
        w.step_until(&mut log, 100);
        assert_eq!(log.0, vec![(5, SimEvent::Crash(NodeId(1)))]);
        assert!(w
            .trace
            .iter()
            .any(|r| matches!(r.event, TraceEvent::Drop { .. })));
    }

    #[test]
    fn same_time_order_is_control_delivery_timer_client() {
        let mut w = world(0);
        w.schedule(10, SimEvent::Client(0));
        w.set_timer(NodeId(1), TxnId(1), TimerKind::Window, 0, 10);
        w.send(m(0, 1, 1));
        w.schedule(10, SimEvent::DelayOff { target: FailureTarget::Node(NodeId(2)) });
        let mut log = Log(vec![]);
        w.step_until(&mut log, 10);
        let classes: Vec<u8> = log.0.iter().map(|(_, e)| e.class()).collect();
        assert_eq!(classes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn schedule_presets() {
        let cf = FailureSchedule::crash_cycles(NodeId(1), 50, 3);
        assert_eq!(cf.entries[0].intervals(), vec![(0, 50), (100, 150), (200, 250)]);
        let nf = FailureSchedule::delay_cycles(NodeId(1), 1000, 20, 2);
        assert_eq!(nf.entries[0].intervals(), vec![(0, 1000), (2000, 3000)]);
        let c = FailureSchedule::composite(NodeId(1), 50, 1000, 20, 2);
        c.validate().unwrap();
        assert_eq!(
            c.intervals().iter().map(|i| (i.0, i.2, i.3)).collect::<Vec<_>>(),
            vec![
                (FailureKind::Crash, 0, 50),
                (FailureKind::Delay, 100, 1100),
                (FailureKind::Crash, 2100, 2150),
                (FailureKind::Delay, 2200, 3200),
            ]
        );
    }

    #[test]
    fn overlapping_entries_rejected() {
        let mut fs = FailureSchedule::crash_cycles(NodeId(1), 50, 2);
        fs.entries.extend(FailureSchedule::delay_cycles(NodeId(1), 30, 5, 1).entries);
        assert!(matches!(fs.validate(), Err(ScheduleError::Overlap(0, 1, _))));
        let link = FailureEntry {
            kind: FailureKind::Crash,
            target: FailureTarget::Link(NodeId(0), NodeId(1)),
            tau: 1,
            extra_delay: 0,
            start: 0,
            cycles: 1,
            period: None,
        };
        assert_eq!(
            FailureSchedule { entries: vec![link] }.validate(),
            Err(ScheduleError::CrashOnLink(0))
        );
    }
}
