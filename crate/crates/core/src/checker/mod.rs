//! Correctness oracles: a trace checker for agreement, validity and
//! termination, an exhaustive model checker for the participant automata,
//! and the message-delay counter.

pub mod delays;
pub mod fsa;
pub mod safety;

pub use delays::{count_message_delays, DelayCount, DelayCountError};
pub use fsa::{
    check_nonblocking, explore_fsa, ConcurrencyMatrix, Exploration, FsaError, FsaProtocol, FsaSpec, LocalState,
};
pub use safety::{check_safety, CheckError, SafetyVerdict, TerminationHole, ValidityRule};
