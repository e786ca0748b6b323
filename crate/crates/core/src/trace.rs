//! Global run trace: one timestamped record per observable event, exported
//! as JSON lines. The checker, the delay counter and the metrics collector
//! all work from this record alone.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Decision, MessageKind, Micros, NodeId, ProtocolKind, TxnId, Vote};
use crate::protocols::TimerKind;
use crate::recovery::RecoveryOutcome;
use crate::rlsm::{DetectionRule, RlsmEvent, RobustnessLevel};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace timestamps decrease at record {0}")]
    NonMonotone(usize),
}

/// What a failure-schedule entry acts on.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureTarget {
    Node(NodeId),
    Link(NodeId, NodeId),
}

impl FailureTarget {
    /// True if a message from `a` to `b` is affected.
    pub fn affects(&self, a: NodeId, b: NodeId) -> bool {
        match *self {
            FailureTarget::Node(n) => n == a || n == b,
            FailureTarget::Link(x, y) => (x == a && y == b) || (x == b && y == a),
        }
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        match *self {
            FailureTarget::Node(n) => vec![n],
            FailureTarget::Link(x, y) => vec![x, y],
        }
    }
}

/// Final outcome of a client's logical transaction.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalOutcome {
    Committed,
    AbortedFinal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    RunStart {
        scenario: String,
        seed: u64,
        coordinator: NodeId,
        nodes: Vec<NodeId>,
        crash_timeout_us: Micros,
        max_u_us: Micros,
        /// Set when every link has the same fixed delay.
        uniform_delay_us: Option<Micros>,
    },
    Send {
        kind: MessageKind,
        txn: TxnId,
        from: NodeId,
        to: NodeId,
    },
    Deliver {
        kind: MessageKind,
        txn: TxnId,
        from: NodeId,
        to: NodeId,
    },
    /// Delivery to a crashed node.
    Drop {
        kind: MessageKind,
        txn: TxnId,
        from: NodeId,
        to: NodeId,
    },
    Begin {
        txn: TxnId,
        coordinator: NodeId,
        participants: Vec<NodeId>,
        protocol: ProtocolKind,
        client: Option<u32>,
    },
    Vote {
        txn: TxnId,
        node: NodeId,
        vote: Vote,
        /// ReadyNo logged while answering a log query.
        refusal: bool,
    },
    Decide {
        txn: TxnId,
        node: NodeId,
        decision: Decision,
    },
    ClientReply {
        txn: TxnId,
        client: u32,
        decision: Decision,
        attempt: u32,
        /// Set on the last attempt of a logical transaction.
        outcome: Option<FinalOutcome>,
        /// From the first attempt's issue to this reply.
        latency_us: Micros,
    },
    Timeout {
        txn: TxnId,
        node: NodeId,
        timer: TimerKind,
    },
    Crash {
        node: NodeId,
    },
    Recover {
        node: NodeId,
    },
    DelayOn {
        target: FailureTarget,
        extra_us: Micros,
    },
    DelayOff {
        target: FailureTarget,
    },
    Detection {
        txn: TxnId,
        node: NodeId,
        event: RlsmEvent,
        rule: DetectionRule,
    },
    LevelChange {
        txn: TxnId,
        node: NodeId,
        old: RobustnessLevel,
        new: RobustnessLevel,
        rule: DetectionRule,
    },
    Resolution {
        txn: TxnId,
        node: NodeId,
        outcome: RecoveryOutcome,
    },
    Fault {
        txn: Option<TxnId>,
        node: NodeId,
        detail: String,
    },
    RunEnd {
        issued: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Micros,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalTrace {
    pub records: Vec<TraceRecord>,
}

impl GlobalTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Micros, event: TraceEvent) {
        debug_assert!(self.records.last().is_none_or(|r| r.t <= t));
        self.records.push(TraceRecord { t, event });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), TraceError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| TraceError::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        Self::read_jsonl(text.as_bytes())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, TraceError> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord =
                serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })?;
            records.push(rec);
        }
        let t = Self { records };
        t.check_monotone()?;
        Ok(t)
    }

    pub fn check_monotone(&self) -> Result<(), TraceError> {
        match self.records.windows(2).position(|w| w[1].t < w[0].t) {
            Some(i) => Err(TraceError::NonMonotone(i + 1)),
            None => Ok(()),
        }
    }

    pub fn end_time(&self) -> Micros {
        self.records.last().map_or(0, |r| r.t)
    }
}
