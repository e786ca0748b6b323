//! Two-phase commit baseline. Participants block on the coordinator, and the
//! coordinator answers the client only after every participant acknowledged
//! the decision (or the ack wait timed out).

use super::{nf, Action, CoordinatorPhase, CoordinatorState, ParticipantState, StepCtx, VoteSource};
use crate::model::{Message, NodeId, Payload, Propose};

pub(crate) fn on_propose(
    s: &mut ParticipantState,
    ctx: &StepCtx<'_>,
    p: &Propose,
    votes: &mut dyn VoteSource,
    out: &mut Vec<Action>,
) {
    nf::vote_to_coordinator(s, ctx, p, votes, out);
}

pub(crate) fn on_vote(c: &mut CoordinatorState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    nf::on_vote(c, ctx, out);
}

pub(crate) fn on_window(c: &mut CoordinatorState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    nf::on_window(c, ctx, out);
}

pub(crate) fn on_ack(c: &mut CoordinatorState, from: NodeId, out: &mut Vec<Action>) {
    c.acks.insert(from);
    if c.phase == CoordinatorPhase::Deciding && c.participants.iter().all(|p| c.acks.contains(p)) {
        if let Some(d) = c.decision {
            c.reply(d, out);
        }
    }
}

pub(crate) fn on_ack_timeout(c: &mut CoordinatorState, out: &mut Vec<Action>) {
    if c.phase == CoordinatorPhase::Deciding {
        if let Some(d) = c.decision {
            c.reply(d, out);
        }
    }
}

/// A decided participant re-acknowledges coordinator decisions so the
/// coordinator can finish even if the participant aborted on its own.
pub(crate) fn ack_if_from_coordinator(s: &ParticipantState, m: &Message, out: &mut Vec<Action>) {
    if matches!(m.payload, Payload::Decision(_)) && Some(m.from) == s.coordinator {
        out.push(Action::Send(Message::new(s.txn, s.node, m.from, Payload::Ack)));
    }
}

#[cfg(test)]
mod tests {
    use super::super::testkit::*;
    use super::super::*;
    use crate::model::{Decision, LogKind, Payload, Vote};

    const P: ProtocolKind = ProtocolKind::TwoPc;

    #[test]
    fn reply_waits_for_acks() {
        let m = matrix(&[0, 1, 2], 10.0);
        let mut c = CoordinatorState::new(TxnId(1), NodeId(0), P);
        c.step(&ctx(0, 0, &m), start(&[1, 2], P));
        c.step(&ctx(0, 20_000, &m), ProtocolEvent::Deliver(msg(1, 1, 0, Payload::Vote(Vote::Yes))));
        let a = c.step(&ctx(0, 20_000, &m), ProtocolEvent::Deliver(msg(1, 2, 0, Payload::Vote(Vote::Yes))));
        assert_eq!(decided(&a), Some(Decision::Commit));
        assert!(replied(&a).is_none());
        assert!(!a.contains(&Action::AppendLog(LogKind::TransitCommit, None)));
        c.step(&ctx(0, 40_000, &m), ProtocolEvent::Deliver(msg(1, 1, 0, Payload::Ack)));
        let a = c.step(&ctx(0, 40_000, &m), ProtocolEvent::Deliver(msg(1, 2, 0, Payload::Ack)));
        assert_eq!(replied(&a), Some(Decision::Commit));
    }

    #[test]
    fn ack_timeout_still_replies() {
        let m = matrix(&[0, 1, 2], 10.0);
        let mut c = CoordinatorState::new(TxnId(1), NodeId(0), P);
        c.step(&ctx(0, 0, &m), start(&[1, 2], P));
        c.step(&ctx(0, 20_000, &m), ProtocolEvent::Deliver(msg(1, 1, 0, Payload::Vote(Vote::No))));
        let a = c.step(&ctx(0, 200_000, &m), ProtocolEvent::TimerFired(TimerKind::AckWait));
        assert_eq!(replied(&a), Some(Decision::Abort));
    }

    #[test]
    fn participant_acks_and_no_voter_reacks() {
        let m = matrix(&[0, 1, 2], 10.0);
        let mut p = ParticipantState::new(TxnId(1), NodeId(1));
        let mut vs = by_force;
        p.step(&ctx(1, 10_000, &m), ProtocolEvent::Deliver(propose(1, &[1, 2], P, false)), &mut vs);
        let a = p.step(&ctx(1, 30_000, &m), ProtocolEvent::Deliver(msg(1, 0, 1, Payload::Decision(Decision::Commit))), &mut vs);
        assert_eq!(decided(&a), Some(Decision::Commit));
        assert_eq!(sends(&a), vec![(0, Payload::Ack)]);

        let mut p = ParticipantState::new(TxnId(1), NodeId(1));
        p.step(&ctx(1, 10_000, &m), ProtocolEvent::Deliver(propose(1, &[1, 2], P, true)), &mut vs);
        let a = p.step(&ctx(1, 30_000, &m), ProtocolEvent::Deliver(msg(1, 0, 1, Payload::Decision(Decision::Abort))), &mut vs);
        assert_eq!(sends(&a), vec![(0, Payload::Ack)]);
        assert!(decided(&a).is_none());
    }
}
