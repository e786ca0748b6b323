//! Exhaustive explorer for the participant automata of FLAC_FF and FLAC_CF.
//!
//! A global state is the vector of local states, each node's set of received
//! messages and the set of messages still in flight. Delivery moves one
//! in-flight message into its recipient's received set, in any order, so
//! channels reorder freely. Transition guards read the received set and do
//! not consume it: a transmit state that has forwarded a decision still
//! remembers which peers forwarded theirs. The model is failure-free, so no
//! timeout transitions exist.
//!
//! Node 0 is the coordinator; nodes `1..=n` are participants.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FsaError {
    #[error("need at least 2 participants, got {0}")]
    TooFewParticipants(usize),
    #[error("at most {max} participants for exhaustive search, got {got}")]
    TooManyParticipants { got: usize, max: usize },
    #[error("state-space budget of {0} global states exceeded")]
    Budget(usize),
    #[error("automaton for {0} is cyclic")]
    Cyclic(FsaProtocol),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsaProtocol {
    FlacFf,
    FlacCf,
}

impl fmt::Display for FsaProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FsaProtocol::FlacFf => "FLAC_FF",
            FsaProtocol::FlacCf => "FLAC_CF",
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalState {
    Q,
    W,
    R,
    Ta,
    Tc,
    A,
    C,
}

impl LocalState {
    pub fn name(self) -> &'static str {
        match self {
            LocalState::Q => "q",
            LocalState::W => "w",
            LocalState::R => "r",
            LocalState::Ta => "ta",
            LocalState::Tc => "tc",
            LocalState::A => "a",
            LocalState::C => "c",
        }
    }

    pub fn is_final(self) -> bool {
        matches!(self, LocalState::A | LocalState::C)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symbol {
    Propose,
    Yes,
    No,
    Commit,
    Abort,
}

/// Who a guard listens to or an output goes to, relative to the node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Peers {
    Coordinator,
    /// The other participants (every participant, from the coordinator).
    Others,
    /// Coordinator and other participants.
    Everyone,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Guard {
    /// Local nondeterministic choice, such as the vote.
    Internal,
    Any(Symbol, Peers),
    All(Symbol, Peers),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub from: LocalState,
    pub guard: Guard,
    pub to: LocalState,
    pub emit: Vec<(Symbol, Peers)>,
}

fn rule(from: LocalState, guard: Guard, to: LocalState, emit: &[(Symbol, Peers)]) -> Rule {
    Rule {
        from,
        guard,
        to,
        emit: emit.to_vec(),
    }
}

/// Transition relations for the coordinator and participants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FsaSpec {
    pub protocol: FsaProtocol,
    /// Participant states in table order, without `r`.
    pub table_states: Vec<LocalState>,
    pub coordinator: Vec<Rule>,
    pub participant: Vec<Rule>,
    /// The states the protocol's argument calls committable.
    pub committable: BTreeSet<LocalState>,
}

impl FsaSpec {
    pub fn for_protocol(p: FsaProtocol) -> Self {
        match p {
            FsaProtocol::FlacFf => Self::flac_ff(),
            FsaProtocol::FlacCf => Self::flac_cf(),
        }
    }

    /// Participants broadcast votes to each other and decide on their own.
    pub fn flac_ff() -> Self {
        use Guard::*;
        use LocalState::*;
        use Peers::*;
        use Symbol::*;
        Self {
            protocol: FsaProtocol::FlacFf,
            table_states: vec![Q, W, A, C],
            coordinator: vec![
                rule(Q, Internal, W, &[(Propose, Others)]),
                rule(W, All(Yes, Others), C, &[]),
                rule(W, Any(No, Others), A, &[]),
            ],
            participant: vec![
                rule(Q, Any(Propose, Coordinator), R, &[]),
                rule(R, Internal, W, &[(Yes, Everyone)]),
                rule(R, Internal, A, &[(No, Everyone)]),
                rule(W, All(Yes, Others), C, &[]),
                rule(W, Any(No, Others), A, &[]),
            ],
            committable: [C].into(),
        }
    }

    /// Transmit-before-decide: a participant forwards a decision and
    /// finalises once every other participant has forwarded the same.
    pub fn flac_cf() -> Self {
        use Guard::*;
        use LocalState::*;
        use Peers::*;
        use Symbol::*;
        Self {
            protocol: FsaProtocol::FlacCf,
            table_states: vec![Q, W, Ta, Tc, A, C],
            coordinator: vec![
                rule(Q, Internal, W, &[(Propose, Others)]),
                rule(W, All(Yes, Others), C, &[(Commit, Others)]),
                rule(W, Any(No, Others), A, &[(Abort, Others)]),
            ],
            participant: vec![
                rule(Q, Any(Propose, Coordinator), W, &[(Yes, Everyone)]),
                rule(Q, Any(Propose, Coordinator), Ta, &[(No, Coordinator), (Abort, Others)]),
                rule(W, All(Yes, Others), R, &[]),
                rule(W, Any(Commit, Everyone), Tc, &[(Commit, Others)]),
                rule(R, Any(Commit, Everyone), Tc, &[(Commit, Others)]),
                rule(W, Any(Abort, Everyone), Ta, &[(Abort, Others)]),
                rule(Ta, All(Abort, Others), A, &[]),
                rule(Tc, All(Commit, Others), C, &[]),
            ],
            committable: [W, Tc, C].into(),
        }
    }

    /// Every state the participant automaton mentions, table order first.
    pub fn states(&self) -> Vec<LocalState> {
        let mut v = self.table_states.clone();
        for r in &self.participant {
            for s in [r.from, r.to] {
                if !v.contains(&s) {
                    v.push(s);
                }
            }
        }
        v
    }

    /// Acyclicity of both automata, checked by a topological sort.
    pub fn is_acyclic(&self) -> bool {
        [&self.coordinator, &self.participant].iter().all(|rules| {
            let mut edges: BTreeMap<LocalState, BTreeSet<LocalState>> = BTreeMap::new();
            for r in rules.iter() {
                edges.entry(r.from).or_default().insert(r.to);
                edges.entry(r.to).or_default();
            }
            let mut indeg: BTreeMap<LocalState, usize> = edges.keys().map(|&k| (k, 0)).collect();
            for tos in edges.values() {
                for t in tos {
                    *indeg.get_mut(t).expect("node") += 1;
                }
            }
            let mut ready: Vec<_> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
            let mut seen = 0;
            while let Some(s) = ready.pop() {
                seen += 1;
                for t in &edges[&s] {
                    let d = indeg.get_mut(t).expect("node");
                    *d -= 1;
                    if *d == 0 {
                        ready.push(*t);
                    }
                }
            }
            seen == edges.len()
        })
    }
}

const MAX_NODES: usize = MAX_PARTICIPANTS + 1;
const SYMBOLS: [Symbol; 5] = [Symbol::Propose, Symbol::Yes, Symbol::No, Symbol::Commit, Symbol::Abort];

/// Bit index of message `(sym, from, to)`; 5 symbols × 5 × 5 nodes fit in 128.
fn bit(sym: Symbol, from: u8, to: u8) -> u32 {
    let s = SYMBOLS.iter().position(|&x| x == sym).expect("symbol") as u32;
    (s * MAX_NODES as u32 + from as u32) * MAX_NODES as u32 + to as u32
}

/// Compact global state. A message is sent at most once per (symbol,
/// sender, receiver), so two bit sets stand in for the in-flight multiset
/// and the per-node received sets.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
struct Global {
    local: [u8; MAX_NODES],
    in_flight: u128,
    received: u128,
    voted_yes: u8,
}

fn peers_of(me: u8, who: Peers, n: u8) -> impl Iterator<Item = u8> {
    let parts = 1..=n;
    let (coord, others) = match (me, who) {
        (0, Peers::Coordinator) => (false, false),
        (0, _) => (false, true),
        (_, Peers::Coordinator) => (true, false),
        (_, Peers::Others) => (false, true),
        (_, Peers::Everyone) => (true, true),
    };
    let c = if coord { Some(0) } else { None };
    c.into_iter()
        .chain(parts.filter(move |&p| others && p != me))
}

fn guard_holds(g: Guard, me: u8, rx: u128, n: u8) -> bool {
    let has = |s: Symbol, p: u8| rx & (1u128 << bit(s, p, me)) != 0;
    match g {
        Guard::Internal => true,
        Guard::Any(s, who) => peers_of(me, who, n).any(|p| has(s, p)),
        Guard::All(s, who) => peers_of(me, who, n).all(|p| has(s, p)),
    }
}

/// States `x_i` and `y_j` (`i ≠ j`, both participants) that co-exist in some
/// reachable global state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcurrencyMatrix {
    pub protocol: FsaProtocol,
    pub participants: usize,
    /// Row and column order of [`Self::cells`].
    pub states: Vec<LocalState>,
    pub cells: Vec<Vec<bool>>,
}

impl ConcurrencyMatrix {
    fn idx(&self, s: LocalState) -> Option<usize> {
        self.states.iter().position(|&x| x == s)
    }

    pub fn get(&self, x: LocalState, y: LocalState) -> bool {
        match (self.idx(x), self.idx(y)) {
            (Some(i), Some(j)) => self.cells[i][j],
            _ => false,
        }
    }

    /// Concurrency set of `x`.
    pub fn row(&self, x: LocalState) -> BTreeSet<LocalState> {
        self.states.iter().copied().filter(|&y| self.get(x, y)).collect()
    }

    /// The sub-matrix over `states`, in that order.
    pub fn restrict(&self, states: &[LocalState]) -> ConcurrencyMatrix {
        ConcurrencyMatrix {
            protocol: self.protocol,
            participants: self.participants,
            states: states.to_vec(),
            cells: states
                .iter()
                .map(|&x| states.iter().map(|&y| self.get(x, y)).collect())
                .collect(),
        }
    }

    /// Aligned text table with `x` marks, rows `_i` and columns `_j`.
    pub fn to_text(&self) -> String {
        let w = 6;
        let mut s = format!("{:w$}", "");
        for y in &self.states {
            s.push_str(&format!("{:>w$}", format!("{}_j", y.name())));
        }
        s.push('\n');
        for (i, x) in self.states.iter().enumerate() {
            s.push_str(&format!("{:w$}", format!("{}_i", x.name())));
            for j in 0..self.states.len() {
                s.push_str(&format!("{:>w$}", if self.cells[i][j] { "x" } else { "." }));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub reachable: usize,
    /// No transition enabled and nothing in flight.
    pub terminal: usize,
    /// Terminal states with every node in a final state.
    pub final_states: usize,
    /// Terminal states that are not final; zero means no global deadlock.
    pub stuck: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exploration {
    /// Over every participant state, `r` included.
    pub full: ConcurrencyMatrix,
    /// Over the table states only.
    pub table: ConcurrencyMatrix,
    pub r_row: BTreeSet<LocalState>,
    pub census: Census,
    /// States that occur only once every participant has voted Yes.
    pub derived_committable: BTreeSet<LocalState>,
}

pub const MAX_PARTICIPANTS: usize = 4;
pub const DEFAULT_STATE_BUDGET: usize = 2_000_000;

/// Breadth-first enumeration of all reachable global states.
pub fn explore_fsa(spec: &FsaSpec, n: usize) -> Result<Exploration, FsaError> {
    explore_fsa_with_budget(spec, n, DEFAULT_STATE_BUDGET)
}

pub fn explore_fsa_with_budget(spec: &FsaSpec, n: usize, budget: usize) -> Result<Exploration, FsaError> {
    if n < 2 {
        return Err(FsaError::TooFewParticipants(n));
    }
    if n > MAX_PARTICIPANTS {
        return Err(FsaError::TooManyParticipants {
            got: n,
            max: MAX_PARTICIPANTS,
        });
    }
    if !spec.is_acyclic() {
        return Err(FsaError::Cyclic(spec.protocol));
    }
    let nn = n as u8;
    let states = spec.states();
    let k = states.len();
    let pos = |s: LocalState| states.iter().position(|&x| x == s).expect("state listed");
    let mut cells = vec![vec![false; k]; k];
    let mut seen_without_all_yes = vec![false; k];
    let mut seen_at_all = vec![false; k];

    let code = |s: LocalState| pos(s) as u8;
    let rules: [Vec<(u8, Guard, u8, Vec<(Symbol, Peers)>)>; 2] = [&spec.coordinator, &spec.participant].map(|rs| {
        rs.iter()
            .map(|r| (code(r.from), r.guard, code(r.to), r.emit.clone()))
            .collect()
    });
    let is_final: Vec<bool> = states.iter().map(|s| s.is_final()).collect();

    let init = Global {
        local: [code(LocalState::Q); MAX_NODES],
        in_flight: 0,
        received: 0,
        voted_yes: 0,
    };
    let all_yes_mask: u8 = ((1u16 << (n + 1)) - 2) as u8;
    let mut visited: HashSet<Global> = HashSet::new();
    let mut queue = VecDeque::new();
    visited.insert(init);
    queue.push_back(init);
    let mut census = Census {
        reachable: 0,
        terminal: 0,
        final_states: 0,
        stuck: 0,
    };
    let mut succ = Vec::new();

    while let Some(g) = queue.pop_front() {
        census.reachable += 1;
        let all_yes = g.voted_yes == all_yes_mask;
        for i in 1..=n {
            let si = g.local[i] as usize;
            seen_at_all[si] = true;
            if !all_yes {
                seen_without_all_yes[si] = true;
            }
            for j in 1..=n {
                if i != j {
                    cells[si][g.local[j] as usize] = true;
                }
            }
        }

        succ.clear();
        let mut pending = g.in_flight;
        while pending != 0 {
            let b = pending.trailing_zeros();
            pending &= pending - 1;
            let mut h = g;
            h.in_flight &= !(1u128 << b);
            h.received |= 1u128 << b;
            succ.push(h);
        }
        for me in 0..=nn {
            let role = usize::from(me != 0);
            for (from, guard, to, emit) in &rules[role] {
                if *from != g.local[me as usize] || !guard_holds(*guard, me, g.received, nn) {
                    continue;
                }
                let mut h = g;
                h.local[me as usize] = *to;
                for &(sym, who) in emit {
                    if sym == Symbol::Yes && me != 0 {
                        h.voted_yes |= 1 << me;
                    }
                    for to in peers_of(me, who, nn) {
                        h.in_flight |= 1u128 << bit(sym, me, to);
                    }
                }
                succ.push(h);
            }
        }
        if succ.is_empty() {
            census.terminal += 1;
            if (0..=n).all(|i| is_final[g.local[i] as usize]) {
                census.final_states += 1;
            } else {
                census.stuck += 1;
            }
        }
        for &h in &succ {
            if visited.len() >= budget && !visited.contains(&h) {
                return Err(FsaError::Budget(budget));
            }
            if visited.insert(h) {
                queue.push_back(h);
            }
        }
    }

    let full = ConcurrencyMatrix {
        protocol: spec.protocol,
        participants: n,
        states: states.clone(),
        cells,
    };
    let table = full.restrict(&spec.table_states);
    let r_row = full.row(LocalState::R);
    let derived_committable = states
        .iter()
        .enumerate()
        .filter(|&(i, _)| seen_at_all[i] && !seen_without_all_yes[i])
        .map(|(_, &s)| s)
        .collect();
    Ok(Exploration {
        full,
        table,
        r_row,
        census,
        derived_committable,
    })
}

/// Non-blocking test over participant states: (i) no state is concurrent
/// with both `c` and `a`; (ii) no non-committable state is concurrent with
/// `c`. Vacuously true when `c` is unreachable.
pub fn check_nonblocking(matrix: &ConcurrencyMatrix, committable: &BTreeSet<LocalState>) -> bool {
    let with_c = matrix.row(LocalState::C);
    let with_a = matrix.row(LocalState::A);
    let cond_i = with_c.is_disjoint(&with_a);
    let cond_ii = with_c.iter().all(|s| committable.contains(s));
    cond_i && cond_ii
}

#[cfg(test)]
mod tests {
    use super::*;
    use LocalState::*;

    #[test]
    fn specs_are_acyclic() {
        assert!(FsaSpec::flac_ff().is_acyclic());
        assert!(FsaSpec::flac_cf().is_acyclic());
        let mut bad = FsaSpec::flac_ff();
        bad.participant.push(rule(C, Guard::Internal, Q, &[]));
        assert!(!bad.is_acyclic());
        assert_eq!(explore_fsa(&bad, 2), Err(FsaError::Cyclic(FsaProtocol::FlacFf)));
    }

    #[test]
    fn size_limits() {
        let s = FsaSpec::flac_ff();
        assert_eq!(explore_fsa(&s, 1), Err(FsaError::TooFewParticipants(1)));
        assert!(matches!(explore_fsa(&s, 5), Err(FsaError::TooManyParticipants { .. })));
        assert_eq!(explore_fsa_with_budget(&s, 3, 10), Err(FsaError::Budget(10)));
    }

    #[test]
    fn no_global_deadlock() {
        for p in [FsaProtocol::FlacFf, FsaProtocol::FlacCf] {
            let e = explore_fsa(&FsaSpec::for_protocol(p), 2).unwrap();
            assert_eq!(e.census.stuck, 0, "{p}");
            assert_eq!(e.census.terminal, e.census.final_states, "{p}");
        }
    }

    #[test]
    fn matrix_is_symmetric() {
        let e = explore_fsa(&FsaSpec::flac_cf(), 3).unwrap();
        let m = &e.full;
        for x in &m.states {
            for y in &m.states {
                assert_eq!(m.get(*x, *y), m.get(*y, *x));
            }
        }
    }

    #[test]
    fn vacuous_nonblocking_without_commit() {
        let mut spec = FsaSpec::flac_ff();
        spec.participant.retain(|r| r.to != C);
        let e = explore_fsa(&spec, 2).unwrap();
        assert!(e.full.row(C).is_empty());
        assert!(check_nonblocking(&e.full, &BTreeSet::new()));
    }

    #[test]
    fn text_table_layout() {
        let e = explore_fsa(&FsaSpec::flac_ff(), 2).unwrap();
        let t = e.table.to_text();
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].contains("q_j") && lines[0].contains("c_j"));
        assert!(lines[4].starts_with("c_i"));
    }
}
