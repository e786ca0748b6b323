//! Robustness-level state machines and the coordinator-side detector.
//!
//! Each participant carries a level in {FF, CF, NF}. The detector inspects
//! the validate-phase results of every cross-shard transaction and upgrades
//! the levels of participants whose replies reveal a crash or a network
//! failure. A participant returns to FF after `α` consecutive clean runs at
//! its current level. The protocol of a new transaction follows the most
//! stringent level among its participants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Decision, NodeId, ProtocolKind, ResultSet, Vote};
use crate::protocols::ReplyTiming;

/// Upper bound on α.
pub const MAX_ALPHA: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RlsmError {
    #[error("alpha must lie in 1..={MAX_ALPHA}, got {0}")]
    AlphaOutOfRange(u32),
    #[error("cannot select a protocol for an empty participant set")]
    EmptyParticipants,
    #[error("no level known for {0}")]
    UnknownNode(NodeId),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RobustnessLevel {
    FF,
    CF,
    NF,
}

impl RobustnessLevel {
    pub fn protocol(self) -> ProtocolKind {
        match self {
            RobustnessLevel::FF => ProtocolKind::FlacFf,
            RobustnessLevel::CF => ProtocolKind::FlacCf,
            RobustnessLevel::NF => ProtocolKind::FlacNf,
        }
    }
}

impl fmt::Display for RobustnessLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RlsmEvent {
    CF,
    NF,
    /// Downgrade after the given number of clean runs.
    FFDown(u32),
}

/// Detector rule that produced an event.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionRule {
    /// FLAC_FF, no reply by the crash deadline.
    FfSilent,
    /// FLAC_FF, reply after the window.
    FfLate,
    /// FLAC_FF, complete in-window results containing an Undecide.
    FfUndecide,
    /// FLAC_CF, reply after the window.
    CfLate,
    /// FLAC_CF, complete results with an Abort that no No vote explains.
    CfUnexplainedAbort,
    /// A reply reached the coordinator after the crash deadline from a
    /// participant already taken for crashed: it was slow, not down.
    PastDeadline,
    /// α consecutive clean runs.
    CleanStreak,
}

/// Level transition function. Anything not listed is the identity.
pub fn rlsm_transition(level: RobustnessLevel, e: RlsmEvent) -> RobustnessLevel {
    use RobustnessLevel::*;
    match (level, e) {
        (FF, RlsmEvent::CF) => CF,
        (FF, RlsmEvent::NF) | (CF, RlsmEvent::NF) => NF,
        (CF, RlsmEvent::FFDown(_)) | (NF, RlsmEvent::FFDown(_)) => FF,
        (l, _) => l,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub events: Vec<(NodeId, RlsmEvent, DetectionRule)>,
}

impl DetectionReport {
    pub fn nodes(&self) -> BTreeSet<NodeId> {
        self.events.iter().map(|(n, _, _)| *n).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Failure detection over one transaction's validate-phase results.
///
/// `rt` holds the replies that arrived within the coordinator window;
/// `timing` classifies every participant's reply.
pub fn detect_events(
    protocol: ProtocolKind,
    ct: &BTreeSet<NodeId>,
    rt: &ResultSet,
    timing: &BTreeMap<NodeId, ReplyTiming>,
) -> DetectionReport {
    let mut events = Vec::new();
    let class = |n: &NodeId| timing.get(n).copied().unwrap_or(ReplyTiming::Silent);
    let incomplete = ct.iter().any(|n| rt.get(*n).is_none());
    match protocol {
        ProtocolKind::FlacFf => {
            if incomplete {
                for n in ct.iter().filter(|n| rt.get(**n).is_none()) {
                    match class(n) {
                        ReplyTiming::Silent => events.push((*n, RlsmEvent::CF, DetectionRule::FfSilent)),
                        _ => events.push((*n, RlsmEvent::NF, DetectionRule::FfLate)),
                    }
                }
            } else if rt.contains(Some(Vote::Yes), Decision::Undecide) {
                for n in ct {
                    events.push((*n, RlsmEvent::NF, DetectionRule::FfUndecide));
                }
            }
        }
        ProtocolKind::FlacCf => {
            if incomplete {
                for n in ct.iter().filter(|n| rt.get(**n).is_none()) {
                    if class(n) == ReplyTiming::Late {
                        events.push((*n, RlsmEvent::NF, DetectionRule::CfLate));
                    }
                }
            } else if rt.contains(Some(Vote::Yes), Decision::Abort)
                && !rt.entries().any(|t| t.vote == Vote::No)
            {
                for n in ct {
                    events.push((*n, RlsmEvent::NF, DetectionRule::CfUnexplainedAbort));
                }
            }
        }
        ProtocolKind::FlacNf | ProtocolKind::TwoPc => {}
    }
    DetectionReport { events }
}

/// Level machine of one participant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rlsm {
    pub node: NodeId,
    pub level: RobustnessLevel,
    pub consecutive_ff_runs: u32,
    pub alpha_cf: u32,
    pub alpha_nf: u32,
}

impl Rlsm {
    pub fn new(node: NodeId, alpha_cf: u32, alpha_nf: u32) -> Result<Self, RlsmError> {
        for a in [alpha_cf, alpha_nf] {
            if !(1..=MAX_ALPHA).contains(&a) {
                return Err(RlsmError::AlphaOutOfRange(a));
            }
        }
        Ok(Self {
            node,
            level: RobustnessLevel::FF,
            consecutive_ff_runs: 0,
            alpha_cf,
            alpha_nf,
        })
    }

    /// Applies an upgrade event; any upgrade clears the streak.
    pub fn apply(&mut self, e: RlsmEvent) -> RobustnessLevel {
        let old = self.level;
        self.level = rlsm_transition(self.level, e);
        if matches!(e, RlsmEvent::CF | RlsmEvent::NF) || self.level != old {
            self.consecutive_ff_runs = 0;
        }
        self.level
    }

    fn alpha(&self) -> Option<u32> {
        match self.level {
            RobustnessLevel::FF => None,
            RobustnessLevel::CF => Some(self.alpha_cf),
            RobustnessLevel::NF => Some(self.alpha_nf),
        }
    }
}

/// Counts a run. Returns the downgrade event when the streak reaches α;
/// the caller applies it.
pub fn record_run(rlsm: &mut Rlsm, failure_free: bool) -> Option<RlsmEvent> {
    if !failure_free {
        rlsm.consecutive_ff_runs = 0;
        return None;
    }
    let alpha = rlsm.alpha()?;
    rlsm.consecutive_ff_runs += 1;
    if rlsm.consecutive_ff_runs >= alpha {
        rlsm.consecutive_ff_runs = 0;
        Some(RlsmEvent::FFDown(alpha))
    } else {
        None
    }
}

/// Protocol for a transaction: the most stringent participant level.
pub fn select_protocol(
    ct: &BTreeSet<NodeId>,
    levels: &BTreeMap<NodeId, RobustnessLevel>,
) -> Result<ProtocolKind, RlsmError> {
    let mut max = None;
    for n in ct {
        let l = *levels.get(n).ok_or(RlsmError::UnknownNode(*n))?;
        max = Some(max.map_or(l, |m: RobustnessLevel| m.max(l)));
    }
    max.map(RobustnessLevel::protocol).ok_or(RlsmError::EmptyParticipants)
}

/// One level change, for the audit trail.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelChange {
    pub node: NodeId,
    pub old: RobustnessLevel,
    pub new: RobustnessLevel,
    pub rule: DetectionRule,
}

/// Coordinator-side owner of every participant's RLSM.
#[derive(Clone, Debug)]
pub struct RlsmManager {
    machines: BTreeMap<NodeId, Rlsm>,
    alpha_cf: u32,
    alpha_nf: u32,
}

impl RlsmManager {
    pub fn new(
        participants: impl IntoIterator<Item = NodeId>,
        alpha_cf: u32,
        alpha_nf: u32,
    ) -> Result<Self, RlsmError> {
        let mut machines = BTreeMap::new();
        for n in participants {
            machines.insert(n, Rlsm::new(n, alpha_cf, alpha_nf)?);
        }
        Ok(Self {
            machines,
            alpha_cf,
            alpha_nf,
        })
    }

    pub fn alphas(&self) -> (u32, u32) {
        (self.alpha_cf, self.alpha_nf)
    }

    pub fn levels(&self) -> BTreeMap<NodeId, RobustnessLevel> {
        self.machines.iter().map(|(n, m)| (*n, m.level)).collect()
    }

    pub fn level(&self, n: NodeId) -> Option<RobustnessLevel> {
        self.machines.get(&n).map(|m| m.level)
    }

    pub fn machine(&self, n: NodeId) -> Option<&Rlsm> {
        self.machines.get(&n)
    }

    pub fn select(&self, ct: &BTreeSet<NodeId>) -> Result<ProtocolKind, RlsmError> {
        select_protocol(ct, &self.levels())
    }

    /// Forgets all levels (volatile state lost in a coordinator crash).
    pub fn reset(&mut self) {
        for m in self.machines.values_mut() {
            m.level = RobustnessLevel::FF;
            m.consecutive_ff_runs = 0;
        }
    }

    /// Runs detection for one transaction, applies the events, then counts
    /// the run for every participant. Returns the report and the resulting
    /// level changes in application order.
    pub fn on_validated(
        &mut self,
        protocol: ProtocolKind,
        ct: &BTreeSet<NodeId>,
        rt: &ResultSet,
        timing: &BTreeMap<NodeId, ReplyTiming>,
    ) -> (DetectionReport, Vec<LevelChange>) {
        let report = detect_events(protocol, ct, rt, timing);
        let mut changes = Vec::new();
        for (n, e, rule) in &report.events {
            if let Some(m) = self.machines.get_mut(n) {
                let old = m.level;
                let new = m.apply(*e);
                if new != old {
                    changes.push(LevelChange { node: *n, old, new, rule: *rule });
                }
            }
        }
        let flagged = report.nodes();
        for n in ct {
            let clean = !flagged.contains(n) && timing.get(n) == Some(&ReplyTiming::InWindow);
            if let Some(m) = self.machines.get_mut(n) {
                if let Some(e) = record_run(m, clean) {
                    let old = m.level;
                    let new = m.apply(e);
                    changes.push(LevelChange { node: *n, old, new, rule: DetectionRule::CleanStreak });
                }
            }
        }
        (report, changes)
    }
}

impl RlsmManager {
    /// A reply from `node` arrived after its transaction was already judged
    /// with `node` silent. Raises NF without counting another run.
    pub fn on_reply_past_deadline(&mut self, node: NodeId) -> Option<LevelChange> {
        let m = self.machines.get_mut(&node)?;
        let old = m.level;
        let new = m.apply(RlsmEvent::NF);
        (new != old).then_some(LevelChange {
            node,
            old,
            new,
            rule: DetectionRule::PastDeadline,
        })
    }
}
