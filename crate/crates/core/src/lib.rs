//! Failure-aware atomic commit protocols, a deterministic network simulator
//! and the checkers that judge runs.

pub mod checker;
pub mod cluster;
pub mod delay;
pub mod experiments;
pub mod kvstore;
pub mod model;
pub mod protocols;
pub mod recovery;
pub mod rlsm;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod tuner;
