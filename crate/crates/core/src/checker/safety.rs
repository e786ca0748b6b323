//! Trace oracle for agreement, validity and termination.
//!
//! Everything is read from the trace: `Begin` fixes `C_T`, votes and
//! decisions come from `Vote` and `Decide`, and failure intervals come from
//! the crash/recover and delay on/off control records. The horizon is the
//! time of the last record.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Decision, Micros, NodeId, TxnId, Vote};
use crate::trace::{FailureTarget, GlobalTrace, TraceEvent};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckError {
    #[error("trace has no run_start record")]
    NoRunStart,
    #[error("trace timestamps decrease at record {0}")]
    NonMonotone(usize),
    #[error("transaction {0} begins twice")]
    DuplicateBegin(TxnId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementViolation {
    pub txn: TxnId,
    pub nodes: (NodeId, NodeId),
    pub decisions: (Decision, Decision),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidityRule {
    /// Commit without a Yes vote from every participant.
    CommitWithoutAllYes,
    /// Abort with no No vote, timeout or overlapping failure.
    UnjustifiedAbort,
    /// A decision for a transaction that never began.
    UnknownTransaction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityViolation {
    pub txn: TxnId,
    pub node: NodeId,
    pub rule: ValidityRule,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationHole {
    pub txn: TxnId,
    pub node: NodeId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub t: Micros,
    pub txn: Option<TxnId>,
    pub node: NodeId,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub agreement_violations: Vec<AgreementViolation>,
    pub validity_violations: Vec<ValidityViolation>,
    pub termination_holes: Vec<TerminationHole>,
    pub faults: Vec<FaultRecord>,
    pub transactions: usize,
    pub commits: usize,
    pub aborts: usize,
    pub horizon: Micros,
}

impl SafetyVerdict {
    /// No agreement or validity violation and no protocol fault.
    pub fn is_safe(&self) -> bool {
        self.agreement_violations.is_empty() && self.validity_violations.is_empty() && self.faults.is_empty()
    }

    pub fn is_live(&self) -> bool {
        self.termination_holes.is_empty()
    }

    pub fn passes(&self) -> bool {
        self.is_safe() && self.is_live()
    }
}

#[derive(Default)]
struct TxnView {
    begin: Option<Micros>,
    coordinator: Option<NodeId>,
    participants: Vec<NodeId>,
    yes: BTreeMap<NodeId, Micros>,
    first_no: Option<Micros>,
    first_timeout: Option<Micros>,
    voters: BTreeSet<NodeId>,
    decisions: Vec<(Micros, NodeId, Decision)>,
}

/// One failure interval `[from, to]`; `to` is `None` while still active.
struct Interval {
    nodes: Vec<NodeId>,
    from: Micros,
    to: Option<Micros>,
}

pub fn check_safety(trace: &GlobalTrace) -> Result<SafetyVerdict, CheckError> {
    trace
        .check_monotone()
        .map_err(|e| match e {
            crate::trace::TraceError::NonMonotone(i) => CheckError::NonMonotone(i),
            _ => CheckError::NonMonotone(0),
        })?;
    if !trace.iter().any(|r| matches!(r.event, TraceEvent::RunStart { .. })) {
        return Err(CheckError::NoRunStart);
    }
    let mut txns: BTreeMap<TxnId, TxnView> = BTreeMap::new();
    let mut alive: BTreeMap<NodeId, bool> = BTreeMap::new();
    let mut intervals: Vec<Interval> = Vec::new();
    let mut open_crash: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut open_delay: BTreeMap<FailureTarget, usize> = BTreeMap::new();
    let mut faults = Vec::new();

    for r in trace.iter() {
        let t = r.t;
        match &r.event {
            TraceEvent::RunStart { nodes, .. } => {
                for n in nodes {
                    alive.insert(*n, true);
                }
            }
            TraceEvent::Begin {
                txn,
                coordinator,
                participants,
                ..
            } => {
                let v = txns.entry(*txn).or_default();
                if v.begin.is_some() {
                    return Err(CheckError::DuplicateBegin(*txn));
                }
                v.begin = Some(t);
                v.coordinator = Some(*coordinator);
                v.participants = participants.clone();
            }
            TraceEvent::Vote { txn, node, vote, .. } => {
                let v = txns.entry(*txn).or_default();
                v.voters.insert(*node);
                match vote {
                    Vote::Yes => {
                        v.yes.entry(*node).or_insert(t);
                    }
                    Vote::No => {
                        v.first_no.get_or_insert(t);
                    }
                }
            }
            TraceEvent::Decide { txn, node, decision } => {
                txns.entry(*txn).or_default().decisions.push((t, *node, *decision));
            }
            TraceEvent::Timeout { txn, .. } => {
                txns.entry(*txn).or_default().first_timeout.get_or_insert(t);
            }
            TraceEvent::Crash { node } => {
                alive.insert(*node, false);
                open_crash.insert(*node, intervals.len());
                intervals.push(Interval {
                    nodes: vec![*node],
                    from: t,
                    to: None,
                });
            }
            TraceEvent::Recover { node } => {
                alive.insert(*node, true);
                if let Some(i) = open_crash.remove(node) {
                    intervals[i].to = Some(t);
                }
            }
            TraceEvent::DelayOn { target, .. } => {
                open_delay.insert(*target, intervals.len());
                intervals.push(Interval {
                    nodes: target.nodes(),
                    from: t,
                    to: None,
                });
            }
            TraceEvent::DelayOff { target } => {
                if let Some(i) = open_delay.remove(target) {
                    intervals[i].to = Some(t);
                }
            }
            TraceEvent::Fault { txn, node, detail } => faults.push(FaultRecord {
                t,
                txn: *txn,
                node: *node,
                detail: detail.clone(),
            }),
            _ => {}
        }
    }

    let mut verdict = SafetyVerdict {
        faults,
        horizon: trace.end_time(),
        ..SafetyVerdict::default()
    };
    for (&txn, v) in &txns {
        let finals: Vec<_> = v
            .decisions
            .iter()
            .filter(|(_, _, d)| d.is_final())
            .copied()
            .collect();
        if v.begin.is_some() {
            verdict.transactions += 1;
        }
        if let Some(&(_, n1, d1)) = finals.first() {
            if let Some(&(_, n2, d2)) = finals.iter().find(|(_, _, d)| *d != d1) {
                verdict.agreement_violations.push(AgreementViolation {
                    txn,
                    nodes: (n1, n2),
                    decisions: (d1, d2),
                });
            }
            match d1 {
                Decision::Commit => verdict.commits += 1,
                _ => verdict.aborts += 1,
            }
        }
        let Some(begin) = v.begin else {
            for &(_, node, _) in &finals {
                verdict.validity_violations.push(ValidityViolation {
                    txn,
                    node,
                    rule: ValidityRule::UnknownTransaction,
                });
            }
            continue;
        };
        let mut involved: BTreeSet<NodeId> = v.participants.iter().copied().collect();
        involved.extend(v.coordinator);
        let mut reported = BTreeSet::new();
        for &(t, node, d) in &finals {
            let ok = match d {
                Decision::Commit => v.participants.iter().all(|p| v.yes.get(p).is_some_and(|&y| y <= t)),
                _ => {
                    v.first_no.is_some_and(|x| x <= t)
                        || v.first_timeout.is_some_and(|x| x <= t)
                        || intervals.iter().any(|i| {
                            i.from <= t && i.to.is_none_or(|e| e >= begin) && i.nodes.iter().any(|n| involved.contains(n))
                        })
                }
            };
            if !ok && reported.insert((node, d)) {
                verdict.validity_violations.push(ValidityViolation {
                    txn,
                    node,
                    rule: if d == Decision::Commit {
                        ValidityRule::CommitWithoutAllYes
                    } else {
                        ValidityRule::UnjustifiedAbort
                    },
                });
            }
        }
        // A node owes a decision if it is alive at the horizon and took part:
        // the coordinator always, a participant once it has voted.
        let decided: BTreeSet<NodeId> = finals.iter().map(|&(_, n, _)| n).collect();
        for n in involved {
            let took_part = Some(n) == v.coordinator || v.voters.contains(&n);
            if took_part && alive.get(&n).copied().unwrap_or(false) && !decided.contains(&n) {
                verdict.termination_holes.push(TerminationHole { txn, node: n });
            }
        }
    }
    Ok(verdict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProtocolKind;

    fn start() -> GlobalTrace {
        let mut t = GlobalTrace::new();
        t.push(
            0,
            TraceEvent::RunStart {
                scenario: "t".into(),
                seed: 0,
                coordinator: NodeId(0),
                nodes: vec![NodeId(0), NodeId(1), NodeId(2)],
                crash_timeout_us: 100,
                max_u_us: 10,
                uniform_delay_us: Some(10),
            },
        );
        t.push(
            0,
            TraceEvent::Begin {
                txn: TxnId(1),
                coordinator: NodeId(0),
                participants: vec![NodeId(1), NodeId(2)],
                protocol: ProtocolKind::FlacFf,
                client: None,
            },
        );
        t
    }

    fn vote(t: &mut GlobalTrace, at: Micros, node: u32, vote: Vote) {
        t.push(
            at,
            TraceEvent::Vote {
                txn: TxnId(1),
                node: NodeId(node),
                vote,
                refusal: false,
            },
        );
    }

    fn decide(t: &mut GlobalTrace, at: Micros, node: u32, decision: Decision) {
        t.push(
            at,
            TraceEvent::Decide {
                txn: TxnId(1),
                node: NodeId(node),
                decision,
            },
        );
    }

    #[test]
    fn clean_commit_passes() {
        let mut t = start();
        vote(&mut t, 10, 1, Vote::Yes);
        vote(&mut t, 10, 2, Vote::Yes);
        for n in 0..3 {
            decide(&mut t, 20, n, Decision::Commit);
        }
        let v = check_safety(&t).unwrap();
        assert!(v.passes(), "{v:?}");
        assert_eq!((v.transactions, v.commits, v.aborts), (1, 1, 0));
    }

    #[test]
    fn forged_disagreement_is_reported() {
        let mut t = start();
        vote(&mut t, 10, 1, Vote::Yes);
        vote(&mut t, 10, 2, Vote::Yes);
        decide(&mut t, 20, 0, Decision::Commit);
        decide(&mut t, 20, 1, Decision::Commit);
        decide(&mut t, 20, 2, Decision::Abort);
        let v = check_safety(&t).unwrap();
        assert_eq!(v.agreement_violations.len(), 1);
        assert_eq!(v.agreement_violations[0].decisions, (Decision::Commit, Decision::Abort));
        assert_eq!(v.validity_violations[0].rule, ValidityRule::UnjustifiedAbort);
    }

    #[test]
    fn commit_needs_every_yes_before_it() {
        let mut t = start();
        vote(&mut t, 10, 1, Vote::Yes);
        decide(&mut t, 20, 1, Decision::Commit);
        vote(&mut t, 30, 2, Vote::Yes);
        let v = check_safety(&t).unwrap();
        assert_eq!(v.validity_violations[0].rule, ValidityRule::CommitWithoutAllYes);
    }

    #[test]
    fn abort_justified_by_failure_overlap() {
        let mut t = start();
        t.push(1, TraceEvent::Crash { node: NodeId(2) });
        vote(&mut t, 10, 1, Vote::Yes);
        t.push(15, TraceEvent::Recover { node: NodeId(2) });
        decide(&mut t, 50, 1, Decision::Abort);
        decide(&mut t, 50, 0, Decision::Abort);
        let v = check_safety(&t).unwrap();
        assert!(v.is_safe(), "{v:?}");
        // Node 2 never voted, so it owes nothing.
        assert!(v.is_live());
    }

    #[test]
    fn undecided_voter_alive_at_horizon_is_a_hole() {
        let mut t = start();
        vote(&mut t, 10, 1, Vote::Yes);
        vote(&mut t, 10, 2, Vote::Yes);
        t.push(11, TraceEvent::Crash { node: NodeId(0) });
        t.push(500, TraceEvent::RunEnd { issued: 1 });
        let v = check_safety(&t).unwrap();
        assert!(v.is_safe());
        let holes: Vec<_> = v.termination_holes.iter().map(|h| h.node.0).collect();
        assert_eq!(holes, vec![1, 2]);
    }

    #[test]
    fn malformed_traces_rejected() {
        assert_eq!(check_safety(&GlobalTrace::new()), Err(CheckError::NoRunStart));
        let mut t = start();
        t.push(
            5,
            TraceEvent::Begin {
                txn: TxnId(1),
                coordinator: NodeId(0),
                participants: vec![],
                protocol: ProtocolKind::FlacFf,
                client: None,
            },
        );
        assert_eq!(check_safety(&t), Err(CheckError::DuplicateBegin(TxnId(1))));
    }
}
