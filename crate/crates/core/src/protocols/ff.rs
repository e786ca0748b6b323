//! FLAC_FF: participants exchange votes directly and decide inside their
//! window when they can; the coordinator only collects `<vote, decision>`
//! results and fills in the decision for nodes that stayed undecided.

use super::{
    Action, CoordinatorPhase, CoordinatorState, ParticipantPhase, ParticipantState, StepCtx,
    TimerKind, VoteSource,
};
use crate::model::{Decision, LogKind, NodeId, Propose, Vote};

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
        Vote::No => {
            out.push(Action::AppendLog(LogKind::AbortLog, None));
            s.send_result(Vote::No, Decision::Abort, out);
            s.finish(Decision::Abort, out);
        }
        Vote::Yes => {
            s.open_window(ctx, p, t_recv, out);
            check_votes(s, out);
        }
    }
}

pub(crate) fn on_vote(
    s: &mut ParticipantState,
    _ctx: &StepCtx<'_>,
    from: NodeId,
    v: Vote,
    out: &mut Vec<Action>,
) {
    s.received_votes.entry(from).or_insert(v);
    check_votes(s, out);
}

fn check_votes(s: &mut ParticipantState, out: &mut Vec<Action>) {
    if s.phase != ParticipantPhase::WindowOpen {
        return;
    }
    let d = if s.any_no() {
        Decision::Abort
    } else if s.all_yes() {
        Decision::Commit
    } else {
        return;
    };
    out.push(Action::AppendLog(LogKind::decided(d), None));
    s.send_result(Vote::Yes, d, out);
    s.finish(d, out);
}

pub(crate) fn on_timer(
    s: &mut ParticipantState,
    ctx: &StepCtx<'_>,
    kind: TimerKind,
    out: &mut Vec<Action>,
) {
    match (kind, s.phase) {
        (TimerKind::Window, ParticipantPhase::WindowOpen) => {
            out.push(Action::TimedOut(kind));
            s.send_result(Vote::Yes, Decision::Undecide, out);
            s.phase = ParticipantPhase::AwaitDecision;
            s.arm_crash_timer(ctx, out);
        }
        (TimerKind::CrashTimeout, ParticipantPhase::AwaitDecision) => {
            out.push(Action::TimedOut(kind));
            out.push(Action::EnterTermination);
            s.phase = ParticipantPhase::Terminating;
        }
        _ => {}
    }
}

pub(crate) fn on_result(c: &mut CoordinatorState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    if c.decision.is_some() {
        return;
    }
    match c.phase {
        CoordinatorPhase::Collecting if c.results.is_complete() => conclude(c, ctx, false, out),
        CoordinatorPhase::Termination => {
            let explicit = matches!(c.results.explicit_decision(), Ok(Some(_)));
            if explicit || c.results.is_complete() {
                conclude(c, ctx, false, out);
            }
        }
        _ => {}
    }
}

pub(crate) fn on_window(c: &mut CoordinatorState, ctx: &StepCtx<'_>, out: &mut Vec<Action>) {
    if c.decision.is_none() && c.phase == CoordinatorPhase::Collecting {
        conclude(c, ctx, true, out);
    }
}

fn conclude(c: &mut CoordinatorState, ctx: &StepCtx<'_>, at_window: bool, out: &mut Vec<Action>) {
    match c.results.explicit_decision() {
        Err(e) => out.push(Action::Fault(e.to_string())),
        Ok(Some(d)) => {
            let targets = c.results.undecided_or_missing();
            c.decide(ctx, d, targets, out);
        }
        Ok(None) if c.results.is_complete() => {
            let targets = c.participants.iter().copied().collect();
            c.decide(ctx, Decision::Commit, targets, out);
        }
        Ok(None) => {
            if at_window {
                out.push(Action::TimedOut(TimerKind::Window));
                out.push(Action::EnterTermination);
                c.phase = CoordinatorPhase::Termination;
            }
        }
    }
}
