//! FLAC_NF (Easy Commit): votes go to the coordinator only; the coordinator
//! decides once per transaction and every participant forwards the decision
//! to its peers before applying it.

use super::{Action, CoordinatorPhase, CoordinatorState, ParticipantPhase, ParticipantState, StepCtx, TimerKind, VoteSource};
use crate::model::{Decision, LogKind, Message, Payload, Propose, Vote};

pub(crate) fn on_propose(
    s: &mut ParticipantState,
    ctx: &StepCtx<'_>,
    p: &Propose,
    votes: &mut dyn VoteSource,
    out: &mut Vec<Action>,
) {
    vote_to_coordinator(s, ctx, p, votes, out);
}

/// Shared with 2PC: vote, send it to the coordinator, abort locally on No.
pub(crate) fn vote_to_coordinator(
    s: &mut ParticipantState,
    ctx: &StepCtx<'_>,
    p: &Propose,
    votes: &mut dyn VoteSource,
    out: &mut Vec<Action>,
) {
    let v = s.vote(&p.ops, votes, out);
    if let Some(c) = s.coordinator {
        out.push(Action::Send(Message::new(s.txn, s.node, c, Payload::Vote(v))));
    }
    match v {
        Vote::No => {
            out.push(Action::AppendLog(LogKind::AbortLog, None));
            s.finish(Decision::Abort, out);
        }
        Vote::Yes => {
            s.phase = ParticipantPhase::Voted;
            s.arm_crash_timer(ctx, out);
        }
    }
}

/// Shared with 2PC: a No decides Abort at once, a full Yes set decides Commit.
pub(crate) fn on_vote(c: &mut CoordinatorState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    if c.decision.is_some() || c.phase != CoordinatorPhase::Collecting {
        return;
    }
    let targets: Vec<_> = c.participants.iter().copied().collect();
    if c.votes.values().any(|&v| v == Vote::No) {
        c.decide(ctx, Decision::Abort, targets, out);
    } else if c.participants.iter().all(|p| c.votes.get(p) == Some(&Vote::Yes)) {
        c.decide(ctx, Decision::Commit, targets, out);
    }
}

pub(crate) fn on_window(c: &mut CoordinatorState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    if c.decision.is_none() && c.phase == CoordinatorPhase::Collecting {
        out.push(Action::TimedOut(TimerKind::Window));
        let targets = c.participants.iter().copied().collect();
        c.decide(ctx, Decision::Abort, targets, out);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testkit::*;
    use super::super::*;
    use crate::model::Payload;

    const P: ProtocolKind = ProtocolKind::FlacNf;

    #[test]
    fn coordinator_decides_on_votes() {
        let m = matrix(&[0, 1, 2, 3], 10.0);
        let mut c = CoordinatorState::new(TxnId(1), NodeId(0), P);
        let a = c.step(&ctx(0, 0, &m), start(&[1, 2, 3], P));
        assert!(a.contains(&Action::SetTimer(TimerKind::Window, 20_000)));
        let mut all = Vec::new();
        for i in 1..=3 {
            all.extend(c.step(&ctx(0, 20_000, &m), ProtocolEvent::Deliver(msg(1, i, 0, Payload::Vote(Vote::Yes)))));
        }
        assert_eq!(replied(&all), Some(Decision::Commit));
        assert_eq!(all.iter().filter(|x| **x == Action::AppendLog(LogKind::TransitCommit, None)).count(), 1);
        assert_eq!(sends(&all).len(), 3);
    }

    #[test]
    fn one_no_aborts_everywhere() {
        let m = matrix(&[0, 1, 2, 3], 10.0);
        let mut c = CoordinatorState::new(TxnId(1), NodeId(0), P);
        c.step(&ctx(0, 0, &m), start(&[1, 2, 3], P));
        let a = c.step(&ctx(0, 20_000, &m), ProtocolEvent::Deliver(msg(1, 2, 0, Payload::Vote(Vote::No))));
        assert_eq!(replied(&a), Some(Decision::Abort));
    }

    #[test]
    fn participant_forwards_decision_then_applies() {
        let m = matrix(&[0, 1, 2, 3], 10.0);
        let mut p = ParticipantState::new(TxnId(1), NodeId(1));
        let mut vs = by_force;
        let a = p.step(&ctx(1, 10_000, &m), ProtocolEvent::Deliver(propose(1, &[1, 2, 3], P, false)), &mut vs);
        assert_eq!(sends(&a), vec![(0, Payload::Vote(Vote::Yes))]);
        assert_eq!(p.phase, ParticipantPhase::Voted);
        let a = p.step(&ctx(1, 30_000, &m), ProtocolEvent::Deliver(msg(1, 3, 1, Payload::Decision(Decision::Abort))), &mut vs);
        assert_eq!(
            sends(&a),
            vec![(2, Payload::Decision(Decision::Abort)), (3, Payload::Decision(Decision::Abort))]
        );
        assert_eq!(decided(&a), Some(Decision::Abort));
        assert_log_before_act(&a);
    }

    #[test]
    fn missing_vote_aborts_at_round_trip() {
        let m = matrix(&[0, 1, 2], 10.0);
        let mut c = CoordinatorState::new(TxnId(1), NodeId(0), P);
        c.step(&ctx(0, 0, &m), start(&[1, 2], P));
        c.step(&ctx(0, 20_000, &m), ProtocolEvent::Deliver(msg(1, 1, 0, Payload::Vote(Vote::Yes))));
        let a = c.step(&ctx(0, 20_000, &m), ProtocolEvent::TimerFired(TimerKind::Window));
        assert_eq!(replied(&a), Some(Decision::Abort));
    }
}
