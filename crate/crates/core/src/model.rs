//! Shared vocabulary of the commit layer: identifiers, votes, decisions,
//! messages, durable log records and validate-phase result sets.
//!
//! Everything here is a plain value type. Messages and log entries have a
//! canonical JSON form (one record per line) whose field order is fixed:
//! `kind, txn, from, to, payload` for messages and `kind, txn, seq, payload`
//! for log entries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Virtual time in microseconds.
pub type Micros = u64;

/// Converts whole milliseconds to [`Micros`].
pub const fn ms(v: u64) -> Micros {
    v * 1000
}

/// Converts fractional milliseconds to [`Micros`], rounding to nearest.
pub fn ms_f64(v: f64) -> Micros {
    (v * 1000.0).round().max(0.0) as Micros
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid result tuple <{vote:?},{decision:?}> from {node}")]
    InvalidResult {
        node: NodeId,
        vote: Vote,
        decision: Decision,
    },
    #[error("{node} is not a participant of {txn}")]
    UnexpectedNode { txn: TxnId, node: NodeId },
    #[error("result set of {0} holds both Commit and Abort")]
    Contradiction(TxnId),
    #[error("decision message must carry Commit or Abort, got {0:?}")]
    UndecidedBroadcast(Decision),
    #[error("malformed message record: {0}")]
    Malformed(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Coordinator,
    Participant,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxnId(pub u64);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// Coordinator-side transaction id counter. Ids are never reused in a run.
#[derive(Debug, Default, Clone)]
pub struct TxnIdAllocator {
    next: u64,
}

impl TxnIdAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&mut self) -> TxnId {
        let id = TxnId(self.next);
        self.next += 1;
        id
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Yes,
    No,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Commit,
    Abort,
    Undecide,
}

impl Decision {
    /// Commit and Abort are final; Undecide never reaches a client.
    pub fn is_final(self) -> bool {
        !matches!(self, Decision::Undecide)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultValidity {
    Valid,
    Invalid,
}

/// `(No, Commit)` and `(No, Undecide)` cannot be produced by a correct
/// participant: a No voter always aborts on its own.
pub fn classify_result(vote: Vote, decision: Decision) -> ResultValidity {
    match (vote, decision) {
        (Vote::No, Decision::Commit) | (Vote::No, Decision::Undecide) => ResultValidity::Invalid,
        _ => ResultValidity::Valid,
    }
}

/// A participant's `<vote, decision>` reply to the coordinator.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResultTuple {
    pub node: NodeId,
    pub vote: Vote,
    pub decision: Decision,
}

impl ResultTuple {
    pub fn new(node: NodeId, vote: Vote, decision: Decision) -> Result<Self, ModelError> {
        match classify_result(vote, decision) {
            ResultValidity::Valid => Ok(Self {
                node,
                vote,
                decision,
            }),
            ResultValidity::Invalid => Err(ModelError::InvalidResult {
                node,
                vote,
                decision,
            }),
        }
    }
}

/// R_T: results collected for one transaction, keyed by participant.
///
/// Invariant: `entries.keys() ⊆ expected` and every entry is a valid tuple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSet {
    pub txn: TxnId,
    entries: BTreeMap<NodeId, ResultTuple>,
    expected: BTreeSet<NodeId>,
}

impl ResultSet {
    pub fn new(txn: TxnId, expected: impl IntoIterator<Item = NodeId>) -> Self {
        Self {
            txn,
            entries: BTreeMap::new(),
            expected: expected.into_iter().collect(),
        }
    }

    /// Inserts a reply. A second reply from the same node replaces the first.
    pub fn insert(&mut self, tuple: ResultTuple) -> Result<(), ModelError> {
        if !self.expected.contains(&tuple.node) {
            return Err(ModelError::UnexpectedNode {
                txn: self.txn,
                node: tuple.node,
            });
        }
        if classify_result(tuple.vote, tuple.decision) == ResultValidity::Invalid {
            return Err(ModelError::InvalidResult {
                node: tuple.node,
                vote: tuple.vote,
                decision: tuple.decision,
            });
        }
        self.entries.insert(tuple.node, tuple);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        result_set_complete(self)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn expected(&self) -> &BTreeSet<NodeId> {
        &self.expected
    }

    pub fn entries(&self) -> impl Iterator<Item = &ResultTuple> {
        self.entries.values()
    }

    pub fn get(&self, node: NodeId) -> Option<&ResultTuple> {
        self.entries.get(&node)
    }

    pub fn missing(&self) -> Vec<NodeId> {
        self.expected
            .iter()
            .filter(|n| !self.entries.contains_key(n))
            .copied()
            .collect()
    }

    pub fn contains(&self, vote: Option<Vote>, decision: Decision) -> bool {
        self.entries
            .values()
            .any(|t| t.decision == decision && vote.is_none_or(|v| v == t.vote))
    }

    /// The explicit decision carried by any entry, if one exists.
    pub fn explicit_decision(&self) -> Result<Option<Decision>, ModelError> {
        let commit = self.contains(None, Decision::Commit);
        let abort = self.contains(None, Decision::Abort);
        match (commit, abort) {
            (true, true) => Err(ModelError::Contradiction(self.txn)),
            (true, false) => Ok(Some(Decision::Commit)),
            (false, true) => Ok(Some(Decision::Abort)),
            (false, false) => Ok(None),
        }
    }

    /// Nodes whose reply did not carry a final decision, plus silent ones.
    pub fn undecided_or_missing(&self) -> Vec<NodeId> {
        self.expected
            .iter()
            .filter(|n| {
                self.entries
                    .get(n)
                    .is_none_or(|t| t.decision == Decision::Undecide)
            })
            .copied()
            .collect()
    }
}

/// True iff every expected node has an entry (vacuously true for empty C_T).
pub fn result_set_complete(rs: &ResultSet) -> bool {
    rs.expected.iter().all(|n| rs.entries.contains_key(n))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    FlacFf,
    FlacCf,
    FlacNf,
    TwoPc,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] = [
        ProtocolKind::FlacFf,
        ProtocolKind::FlacCf,
        ProtocolKind::FlacNf,
        ProtocolKind::TwoPc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::FlacFf => "FLAC_FF",
            ProtocolKind::FlacCf => "FLAC_CF",
            ProtocolKind::FlacNf => "FLAC_NF",
            ProtocolKind::TwoPc => "2PC",
        }
    }

    /// Protocols whose coordinator is the only node able to decide Commit.
    pub fn coordinator_decides(self) -> bool {
        !matches!(self, ProtocolKind::FlacFf)
    }

    /// Protocols that log a transit record and forward decisions before
    /// applying them.
    pub fn transmits_before_decide(self) -> bool {
        matches!(self, ProtocolKind::FlacCf | ProtocolKind::FlacNf)
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-shard part of a transaction body.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnOps {
    pub reads: Vec<u64>,
    pub writes: Vec<(u64, u64)>,
    /// Test hook: the shard votes No regardless of its lock table.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub force_no: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Propose {
    pub ops: TxnOps,
    /// Coordinator clock reading at send time (µs, skewed clock, may be negative).
    pub t_sent: i64,
    pub participants: Vec<NodeId>,
    pub protocol: ProtocolKind,
}

/// What a node's durable log says about one transaction.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ready: Option<Vote>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transit: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
}

impl LogSummary {
    /// The decision this log commits its owner to, if any.
    pub fn known_decision(&self) -> Option<Decision> {
        self.decision.or(self.transit)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Propose,
    VoteMsg,
    DecisionMsg,
    ResultReply,
    LogQuery,
    LogReply,
    Ack,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Propose(Propose),
    Vote(Vote),
    /// Always Commit or Abort.
    Decision(Decision),
    Result(ResultTuple),
    LogQuery,
    LogReply(LogSummary),
    Ack,
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Propose(_) => MessageKind::Propose,
            Payload::Vote(_) => MessageKind::VoteMsg,
            Payload::Decision(_) => MessageKind::DecisionMsg,
            Payload::Result(_) => MessageKind::ResultReply,
            Payload::LogQuery => MessageKind::LogQuery,
            Payload::LogReply(_) => MessageKind::LogReply,
            Payload::Ack => MessageKind::Ack,
        }
    }
}

/// A unicast message. Broadcasts are expanded to one message per receiver.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub txn: TxnId,
    pub from: NodeId,
    pub to: NodeId,
    pub payload: Payload,
}

impl Message {
    pub fn new(txn: TxnId, from: NodeId, to: NodeId, payload: Payload) -> Self {
        Self {
            txn,
            from,
            to,
            payload,
        }
    }

    /// Builds a DecisionMsg, rejecting Undecide.
    pub fn decision(
        txn: TxnId,
        from: NodeId,
        to: NodeId,
        d: Decision,
    ) -> Result<Self, ModelError> {
        if !d.is_final() {
            return Err(ModelError::UndecidedBroadcast(d));
        }
        Ok(Self::new(txn, from, to, Payload::Decision(d)))
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serialization is infallible")
    }
}

impl Serialize for Message {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("Message", 5)?;
        st.serialize_field("kind", &self.kind())?;
        st.serialize_field("txn", &self.txn)?;
        st.serialize_field("from", &self.from)?;
        st.serialize_field("to", &self.to)?;
        match &self.payload {
            Payload::Propose(p) => st.serialize_field("payload", p)?,
            Payload::Vote(v) => st.serialize_field("payload", v)?,
            Payload::Decision(d) => st.serialize_field("payload", d)?,
            Payload::Result(r) => st.serialize_field("payload", r)?,
            Payload::LogReply(s) => st.serialize_field("payload", s)?,
            Payload::LogQuery | Payload::Ack => st.serialize_field("payload", &())?,
        }
        st.end()
    }
}

#[derive(Deserialize)]
struct WireMessage {
    kind: MessageKind,
    txn: TxnId,
    from: NodeId,
    to: NodeId,
    #[serde(default)]
    payload: serde_json::Value,
}

impl<'de> Deserialize<'de> for Message {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let w = WireMessage::deserialize(deserializer)?;
        fn typed<T: serde::de::DeserializeOwned, E: serde::de::Error>(
            v: serde_json::Value,
        ) -> Result<T, E> {
            serde_json::from_value(v).map_err(E::custom)
        }
        let payload = match w.kind {
            MessageKind::Propose => Payload::Propose(typed(w.payload)?),
            MessageKind::VoteMsg => Payload::Vote(typed(w.payload)?),
            MessageKind::DecisionMsg => {
                let d: Decision = typed(w.payload)?;
                if !d.is_final() {
                    return Err(D::Error::custom("decision message carries undecide"));
                }
                Payload::Decision(d)
            }
            MessageKind::ResultReply => {
                let r: ResultTuple = typed(w.payload)?;
                ResultTuple::new(r.node, r.vote, r.decision).map_err(D::Error::custom)?;
                Payload::Result(r)
            }
            MessageKind::LogQuery => Payload::LogQuery,
            MessageKind::LogReply => Payload::LogReply(typed(w.payload)?),
            MessageKind::Ack => Payload::Ack,
        };
        Ok(Message {
            txn: w.txn,
            from: w.from,
            to: w.to,
            payload,
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LogKind {
    ProposeLog,
    ReadyYes,
    ReadyNo,
    TransitCommit,
    TransitAbort,
    CommitLog,
    AbortLog,
}

impl LogKind {
    pub fn ready(v: Vote) -> Self {
        match v {
            Vote::Yes => LogKind::ReadyYes,
            Vote::No => LogKind::ReadyNo,
        }
    }

    pub fn transit(d: Decision) -> Self {
        match d {
            Decision::Commit => LogKind::TransitCommit,
            _ => LogKind::TransitAbort,
        }
    }

    pub fn decided(d: Decision) -> Self {
        match d {
            Decision::Commit => LogKind::CommitLog,
            _ => LogKind::AbortLog,
        }
    }
}

/// Transaction metadata stored with the first log record of a transaction so
/// that recovery can rebuild who to ask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogMeta {
    pub protocol: ProtocolKind,
    pub coordinator: NodeId,
    pub participants: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub kind: LogKind,
    pub txn: TxnId,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<LogMeta>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_matches_the_four_legal_cases() {
        assert_eq!(classify_result(Vote::Yes, Decision::Undecide), ResultValidity::Valid);
        assert_eq!(classify_result(Vote::Yes, Decision::Commit), ResultValidity::Valid);
        assert_eq!(classify_result(Vote::Yes, Decision::Abort), ResultValidity::Valid);
        assert_eq!(classify_result(Vote::No, Decision::Abort), ResultValidity::Valid);
        assert_eq!(classify_result(Vote::No, Decision::Commit), ResultValidity::Invalid);
        assert_eq!(classify_result(Vote::No, Decision::Undecide), ResultValidity::Invalid);
    }

    #[test]
    fn completeness() {
        let n = |i| NodeId(i);
        let mut rs = ResultSet::new(TxnId(1), [n(1), n(2), n(3)]);
        for i in 1..=2 {
            rs.insert(ResultTuple::new(n(i), Vote::Yes, Decision::Undecide).unwrap())
                .unwrap();
        }
        assert!(!rs.is_complete());
        assert_eq!(rs.missing(), vec![n(3)]);
        rs.insert(ResultTuple::new(n(3), Vote::Yes, Decision::Undecide).unwrap())
            .unwrap();
        assert!(rs.is_complete());
        assert!(ResultSet::new(TxnId(2), []).is_complete());
    }

    #[test]
    fn result_set_rejects_strangers_and_detects_contradiction() {
        let mut rs = ResultSet::new(TxnId(7), [NodeId(1), NodeId(2)]);
        let stranger = ResultTuple::new(NodeId(9), Vote::Yes, Decision::Commit).unwrap();
        assert!(matches!(rs.insert(stranger), Err(ModelError::UnexpectedNode { .. })));
        rs.insert(ResultTuple::new(NodeId(1), Vote::Yes, Decision::Commit).unwrap())
            .unwrap();
        assert_eq!(rs.explicit_decision().unwrap(), Some(Decision::Commit));
        rs.insert(ResultTuple::new(NodeId(2), Vote::Yes, Decision::Abort).unwrap())
            .unwrap();
        assert_eq!(rs.explicit_decision(), Err(ModelError::Contradiction(TxnId(7))));
    }

    #[test]
    fn message_json_field_order_and_roundtrip() {
        let m = Message::new(
            TxnId(3),
            NodeId(0),
            NodeId(2),
            Payload::Result(ResultTuple::new(NodeId(2), Vote::Yes, Decision::Undecide).unwrap()),
        );
        let s = m.to_json();
        assert_eq!(
            s,
            r#"{"kind":"ResultReply","txn":3,"from":0,"to":2,"payload":{"node":2,"vote":"yes","decision":"undecide"}}"#
        );
        let back: Message = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let q = Message::new(TxnId(1), NodeId(1), NodeId(0), Payload::LogQuery);
        assert_eq!(
            q.to_json(),
            r#"{"kind":"LogQuery","txn":1,"from":1,"to":0,"payload":null}"#
        );
        assert_eq!(serde_json::from_str::<Message>(&q.to_json()).unwrap(), q);
    }

    #[test]
    fn decision_messages_reject_undecide() {
        assert!(Message::decision(TxnId(1), NodeId(0), NodeId(1), Decision::Undecide).is_err());
        let bad = r#"{"kind":"DecisionMsg","txn":1,"from":0,"to":1,"payload":"undecide"}"#;
        assert!(serde_json::from_str::<Message>(bad).is_err());
        let bad = r#"{"kind":"ResultReply","txn":1,"from":1,"to":0,"payload":{"node":1,"vote":"no","decision":"commit"}}"#;
        assert!(serde_json::from_str::<Message>(bad).is_err());
    }

    #[test]
    fn log_entry_json_field_order() {
        let e = LogEntry {
            kind: LogKind::ReadyYes,
            txn: TxnId(4),
            seq: 9,
            payload: Some(LogMeta {
                protocol: ProtocolKind::FlacCf,
                coordinator: NodeId(0),
                participants: vec![NodeId(1), NodeId(2)],
            }),
        };
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(
            s,
            r#"{"kind":"ReadyYes","txn":4,"seq":9,"payload":{"protocol":"flac_cf","coordinator":0,"participants":[1,2]}}"#
        );
        assert_eq!(serde_json::from_str::<LogEntry>(&s).unwrap(), e);
    }

    #[test]
    fn allocator_is_monotone() {
        let mut a = TxnIdAllocator::new();
        let ids: Vec<_> = (0..5).map(|_| a.allocate()).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }
}
