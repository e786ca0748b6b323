//! Message-delay counting on uniform-delay traces.
//!
//! With every link at the same fixed delay `d` and zero processing time,
//! each elapsed interval is an exact multiple of `d`. The coordinator counts
//! from `Begin` to its client reply; a participant counts from the delivery
//! of its `Propose` to its local decision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Decision, MessageKind, Micros, NodeId, Role, TxnId};
use crate::trace::{GlobalTrace, TraceEvent};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DelayCountError {
    #[error("trace has no run_start record")]
    NoRunStart,
    #[error("link delays are not uniform; message delays are undefined")]
    NotUniform,
    #[error("uniform delay is zero")]
    ZeroDelay,
    #[error("{node} on {txn}: {elapsed} us is not a multiple of {d} us")]
    Inexact {
        txn: TxnId,
        node: NodeId,
        elapsed: Micros,
        d: Micros,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayCount {
    pub txn: TxnId,
    pub node: NodeId,
    pub role: Role,
    pub decision: Decision,
    pub delays: u64,
}

fn exact(txn: TxnId, node: NodeId, elapsed: Micros, d: Micros) -> Result<u64, DelayCountError> {
    if !elapsed.is_multiple_of(d) {
        return Err(DelayCountError::Inexact { txn, node, elapsed, d });
    }
    Ok(elapsed / d)
}

/// One count per (transaction, node) that decided. Participants whose
/// `Propose` delivery is not in the trace are skipped.
pub fn count_message_delays(trace: &GlobalTrace) -> Result<Vec<DelayCount>, DelayCountError> {
    let d = trace
        .iter()
        .find_map(|r| match &r.event {
            TraceEvent::RunStart { uniform_delay_us, .. } => Some(*uniform_delay_us),
            _ => None,
        })
        .ok_or(DelayCountError::NoRunStart)?
        .ok_or(DelayCountError::NotUniform)?;
    if d == 0 {
        return Err(DelayCountError::ZeroDelay);
    }
    let mut begin: BTreeMap<TxnId, (Micros, NodeId)> = BTreeMap::new();
    let mut proposed: BTreeMap<(TxnId, NodeId), Micros> = BTreeMap::new();
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in trace.iter() {
        match &r.event {
            TraceEvent::Begin { txn, coordinator, .. } => {
                begin.insert(*txn, (r.t, *coordinator));
            }
            TraceEvent::Deliver {
                kind: MessageKind::Propose,
                txn,
                to,
                ..
            } => {
                proposed.entry((*txn, *to)).or_insert(r.t);
            }
            TraceEvent::ClientReply { txn, decision, .. } => {
                if let Some(&(t0, c)) = begin.get(txn) {
                    out.push(DelayCount {
                        txn: *txn,
                        node: c,
                        role: Role::Coordinator,
                        decision: *decision,
                        delays: exact(*txn, c, r.t - t0, d)?,
                    });
                }
            }
            TraceEvent::Decide { txn, node, decision } => {
                let Some(&t0) = proposed.get(&(*txn, *node)) else {
                    continue;
                };
                if seen.insert((*txn, *node)) {
                    out.push(DelayCount {
                        txn: *txn,
                        node: *node,
                        role: Role::Participant,
                        decision: *decision,
                        delays: exact(*txn, *node, r.t - t0, d)?,
                    });
                }
            }
            _ => {}
        }
    }
    Ok(out)
}
