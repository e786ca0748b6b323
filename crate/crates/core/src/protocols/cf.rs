//! FLAC_CF: votes are exchanged as in FLAC_FF, but a participant never
//! commits on its own. A complete Yes set only makes it tentatively
//! committable; the decision comes from the coordinator and every node
//! forwards a decision to its peers before applying it.

use super::{
    Action, CoordinatorPhase, CoordinatorState, ParticipantPhase, ParticipantState, StepCtx,
    TimerKind, VoteSource,
};
use crate::model::{Decision, LogKind, Message, NodeId, Payload, Propose, Vote};

pub(crate) fn on_propose(
    s: &mut ParticipantState,
    ctx: &StepCtx<'_>,
    p: &Propose,
    t_recv: i64,
    votes: &mut dyn VoteSource,
    out: &mut Vec<Action>,
) {
    let v = s.vote(&p.ops, votes, out);
    s.broadcast_vote(v, out);
    match v {
        Vote::No => abort(s, Vote::No, out),
        Vote::Yes => {
            s.open_window(ctx, p, t_recv, out);
            check_votes(s, ctx, out);
        }
    }
}

pub(crate) fn on_vote(
    s: &mut ParticipantState,
    ctx: &StepCtx<'_>,
    from: NodeId,
    v: Vote,
    out: &mut Vec<Action>,
) {
    s.received_votes.entry(from).or_insert(v);
    check_votes(s, ctx, out);
}

fn check_votes(s: &mut ParticipantState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    if s.phase != ParticipantPhase::WindowOpen {
        return;
    }
    if s.any_no() {
        abort(s, Vote::Yes, out);
    } else if s.all_yes() {
        s.send_result(Vote::Yes, Decision::Undecide, out);
        s.phase = ParticipantPhase::TentativeCommit;
        s.arm_crash_timer(ctx, out);
    }
}

/// Transit-log, forward Abort to peers, report, decide.
fn abort(s: &mut ParticipantState, vote: Vote, out: &mut Vec<Action>) {
    out.push(Action::AppendLog(LogKind::TransitAbort, None));
    for p in s.peers().collect::<Vec<_>>() {
        out.push(Action::Send(Message::new(s.txn, s.node, p, Payload::Decision(Decision::Abort))));
    }
    out.push(Action::AppendLog(LogKind::AbortLog, None));
    s.send_result(vote, Decision::Abort, out);
    s.finish(Decision::Abort, out);
}

/// A forwarded Abort that overtakes the missing votes still closes the
/// window with an explicit result, so the coordinator sees a full R_T.
pub(crate) fn abort_in_window(s: &mut ParticipantState, out: &mut Vec<Action>) -> bool {
    if s.phase == ParticipantPhase::WindowOpen {
        abort(s, Vote::Yes, out);
        true
    } else {
        false
    }
}

pub(crate) fn on_timer(
    s: &mut ParticipantState,
    _ctx: &StepCtx<'_>,
    kind: TimerKind,
    out: &mut Vec<Action>,
) {
    match (kind, s.phase) {
        (TimerKind::Window, ParticipantPhase::WindowOpen) => {
            out.push(Action::TimedOut(kind));
            abort(s, Vote::Yes, out);
        }
        (TimerKind::CrashTimeout, ParticipantPhase::TentativeCommit) => {
            out.push(Action::TimedOut(kind));
            out.push(Action::EnterTermination);
            s.phase = ParticipantPhase::Terminating;
        }
        _ => {}
    }
}

pub(crate) fn on_result(c: &mut CoordinatorState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    if c.decision.is_none() && c.phase == CoordinatorPhase::Collecting && c.results.is_complete() {
        conclude(c, ctx, out);
    }
}

pub(crate) fn on_window(c: &mut CoordinatorState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    if c.decision.is_none() && c.phase == CoordinatorPhase::Collecting {
        conclude(c, ctx, out);
    }
}

fn conclude(c: &mut CoordinatorState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    match c.results.explicit_decision() {
        Err(e) => out.push(Action::Fault(e.to_string())),
        Ok(Some(Decision::Abort)) => {
            let targets = c.results.undecided_or_missing();
            c.decide(ctx, Decision::Abort, targets, out);
        }
        Ok(Some(_)) => out.push(Action::Fault(format!(
            "FLAC_CF participant reported Commit for {}",
            c.txn
        ))),
        Ok(None) => {
            let targets = c.participants.iter().copied().collect();
            if c.results.is_complete() {
                c.decide(ctx, Decision::Commit, targets, out);
            } else {
                out.push(Action::TimedOut(TimerKind::Window));
                c.decide(ctx, Decision::Abort, targets, out);
            }
        }
    }
}
