//! Message-delay bounds and the timeout windows derived from them.
//!
//! `U(x, y) = σ(x, y) · r` where σ is the largest observed one-way delay of a
//! link and `r` a safety factor. The coordinator window covers the longest
//! propose → vote → result chain; the participant window covers the latest
//! moment a peer vote can still arrive, measured from the local receipt of
//! Propose.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{Micros, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelayError {
    #[error("no delay bound configured between {0} and {1}")]
    UnknownPair(NodeId, NodeId),
    #[error("participant set is empty")]
    EmptyParticipants,
    #[error("network buffer parameter r must be positive and finite, got {0}")]
    InvalidR(f64),
    #[error("sigma for {0}-{1} must be non-negative and finite, got {2}")]
    InvalidSigma(NodeId, NodeId, f64),
    #[error("crash timeout {crash} µs must exceed every network window (max {window} µs)")]
    CrashTimeoutTooSmall { crash: Micros, window: Micros },
}

/// Symmetric σ table (ms) and buffer parameter `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMatrix {
    sigma_ms: BTreeMap<(NodeId, NodeId), f64>,
    nodes: BTreeSet<NodeId>,
    r: f64,
}

impl DelayMatrix {
    pub fn new(r: f64) -> Result<Self, DelayError> {
        if !(r.is_finite() && r > 0.0) {
            return Err(DelayError::InvalidR(r));
        }
        Ok(Self {
            sigma_ms: BTreeMap::new(),
            nodes: BTreeSet::new(),
            r,
        })
    }

    /// Every pair of `nodes` gets the same σ.
    pub fn uniform(
        nodes: impl IntoIterator<Item = NodeId>,
        sigma_ms: f64,
        r: f64,
    ) -> Result<Self, DelayError> {
        let mut m = Self::new(r)?;
        let nodes: Vec<NodeId> = nodes.into_iter().collect();
        for &n in &nodes {
            m.nodes.insert(n);
        }
        for (i, &a) in nodes.iter().enumerate() {
            for &b in &nodes[i + 1..] {
                m.set(a, b, sigma_ms)?;
            }
        }
        Ok(m)
    }

    /// Sets σ for both directions of a link.
    pub fn set(&mut self, a: NodeId, b: NodeId, sigma_ms: f64) -> Result<(), DelayError> {
        if !(sigma_ms.is_finite() && sigma_ms >= 0.0) {
            return Err(DelayError::InvalidSigma(a, b, sigma_ms));
        }
        self.nodes.insert(a);
        self.nodes.insert(b);
        if a != b {
            self.sigma_ms.insert(key(a, b), sigma_ms);
        }
        Ok(())
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn with_r(&self, r: f64) -> Result<Self, DelayError> {
        let mut m = self.clone();
        if !(r.is_finite() && r > 0.0) {
            return Err(DelayError::InvalidR(r));
        }
        m.r = r;
        Ok(m)
    }

    pub fn nodes(&self) -> &BTreeSet<NodeId> {
        &self.nodes
    }

    pub fn sigma_ms(&self, x: NodeId, y: NodeId) -> Result<f64, DelayError> {
        if x == y {
            return if self.nodes.contains(&x) {
                Ok(0.0)
            } else {
                Err(DelayError::UnknownPair(x, y))
            };
        }
        self.sigma_ms
            .get(&key(x, y))
            .copied()
            .ok_or(DelayError::UnknownPair(x, y))
    }

    /// `U(x, y)` in µs; zero for `x == y`.
    pub fn delay_upper_bound(&self, x: NodeId, y: NodeId) -> Result<Micros, DelayError> {
        delay_upper_bound(x, y, self)
    }

    /// Largest `U` over all configured links.
    pub fn max_u(&self) -> Micros {
        self.sigma_ms
            .values()
            .map(|s| to_micros(s * self.r))
            .max()
            .unwrap_or(0)
    }
}

fn key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn to_micros(ms: f64) -> Micros {
    (ms * 1000.0).round() as Micros
}

pub fn delay_upper_bound(x: NodeId, y: NodeId, m: &DelayMatrix) -> Result<Micros, DelayError> {
    Ok(to_micros(m.sigma_ms(x, y)? * m.r))
}

/// `W_C* = max U(C*,Ci) + U(Ci,Cj) + U(Cj,C*)` over ordered pairs, `i = j` included.
pub fn coordinator_window(
    cstar: NodeId,
    ct: &BTreeSet<NodeId>,
    m: &DelayMatrix,
) -> Result<Micros, DelayError> {
    if ct.is_empty() {
        return Err(DelayError::EmptyParticipants);
    }
    let mut best = 0;
    for &i in ct {
        let out = m.delay_upper_bound(cstar, i)?;
        for &j in ct {
            let w = out + m.delay_upper_bound(i, j)? + m.delay_upper_bound(j, cstar)?;
            best = best.max(w);
        }
    }
    Ok(best)
}

/// `W_Ci = max t_sent + U(C*,Cj) + U(Cj,Ci) − t_recv`, clamped at zero.
///
/// `t_sent` is the coordinator's clock reading, `t_recv` the local one; both
/// may carry skew, which only shifts the value and is absorbed by the clamp.
pub fn participant_window(
    i: NodeId,
    t_sent: i64,
    t_recv: i64,
    cstar: NodeId,
    ct: &BTreeSet<NodeId>,
    m: &DelayMatrix,
) -> Result<Micros, DelayError> {
    let mut best: i64 = 0;
    for &j in ct {
        let path = (m.delay_upper_bound(cstar, j)? + m.delay_upper_bound(j, i)?) as i64;
        best = best.max(t_sent + path - t_recv);
    }
    Ok(best.max(0) as Micros)
}

/// Vote-collection window of the coordinator-centric protocols (EC, 2PC):
/// the longest propose → vote round trip.
pub fn round_trip_window(
    cstar: NodeId,
    ct: &BTreeSet<NodeId>,
    m: &DelayMatrix,
) -> Result<Micros, DelayError> {
    if ct.is_empty() {
        return Err(DelayError::EmptyParticipants);
    }
    let mut best = 0;
    for &i in ct {
        best = best.max(m.delay_upper_bound(cstar, i)? + m.delay_upper_bound(i, cstar)?);
    }
    Ok(best)
}

/// Crash timeout used when a scenario does not set one: ten times the
/// largest link bound, floored at 1 ms so zero-delay tests still have one.
pub fn default_crash_timeout(m: &DelayMatrix) -> Micros {
    (10 * m.max_u()).max(1000)
}

/// All windows for one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeoutBundle {
    pub w_coordinator: Micros,
    /// Participant windows assuming receipt at `t_sent + U(C*, i)`.
    pub w_participant: BTreeMap<NodeId, Micros>,
    pub crash_timeout: Micros,
    pub network_timeout_basis: Micros,
}

impl TimeoutBundle {
    pub fn derive(
        cstar: NodeId,
        ct: &BTreeSet<NodeId>,
        m: &DelayMatrix,
        crash_timeout: Option<Micros>,
    ) -> Result<Self, DelayError> {
        let w_coordinator = coordinator_window(cstar, ct, m)?;
        let mut w_participant = BTreeMap::new();
        for &i in ct {
            let recv = m.delay_upper_bound(cstar, i)? as i64;
            w_participant.insert(i, participant_window(i, 0, recv, cstar, ct, m)?);
        }
        let crash_timeout = crash_timeout.unwrap_or_else(|| default_crash_timeout(m));
        let window = w_participant
            .values()
            .copied()
            .chain([w_coordinator])
            .max()
            .unwrap_or(0);
        if crash_timeout <= window {
            return Err(DelayError::CrashTimeoutTooSmall {
                crash: crash_timeout,
                window,
            });
        }
        Ok(Self {
            w_coordinator,
            w_participant,
            crash_timeout,
            network_timeout_basis: m.max_u(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn set(ids: &[u32]) -> BTreeSet<NodeId> {
        ids.iter().map(|&i| n(i)).collect()
    }

    /// Independent brute force over ordered pairs, written without the
    /// library's helpers.
    fn oracle_wc(cstar: u32, ct: &[u32], u: &dyn Fn(u32, u32) -> u64) -> u64 {
        let mut best = 0;
        for &i in ct {
            for &j in ct {
                best = best.max(u(cstar, i) + u(i, j) + u(j, cstar));
            }
        }
        best
    }

    #[test]
    fn upper_bound_examples() {
        let m = DelayMatrix::uniform([n(0), n(1)], 10.0, 1.0).unwrap();
        assert_eq!(m.delay_upper_bound(n(0), n(1)).unwrap(), 10_000);
        let half = m.with_r(0.5).unwrap();
        assert_eq!(half.delay_upper_bound(n(1), n(0)).unwrap(), 5_000);
        assert_eq!(m.delay_upper_bound(n(1), n(1)).unwrap(), 0);
        assert_eq!(
            m.delay_upper_bound(n(1), n(7)),
            Err(DelayError::UnknownPair(n(1), n(7)))
        );
    }

    #[test]
    fn coordinator_window_examples() {
        let m = DelayMatrix::uniform([n(0), n(1), n(2), n(3)], 10.0, 1.0).unwrap();
        let u = |a: u32, b: u32| if a == b { 0 } else { 10_000 };
        assert_eq!(oracle_wc(0, &[1, 2, 3], &u), 30_000);
        assert_eq!(coordinator_window(n(0), &set(&[1, 2, 3]), &m).unwrap(), 30_000);
        assert_eq!(coordinator_window(n(0), &set(&[1]), &m).unwrap(), 20_000);

        let mut m = DelayMatrix::new(1.0).unwrap();
        m.set(n(0), n(1), 5.0).unwrap();
        m.set(n(0), n(2), 10.0).unwrap();
        m.set(n(1), n(2), 20.0).unwrap();
        let u = |a: u32, b: u32| -> u64 {
            match (a.min(b), a.max(b)) {
                (x, y) if x == y => 0,
                (0, 1) => 5_000,
                (0, 2) => 10_000,
                _ => 20_000,
            }
        };
        assert_eq!(oracle_wc(0, &[1, 2], &u), 35_000);
        assert_eq!(coordinator_window(n(0), &set(&[1, 2]), &m).unwrap(), 35_000);
        assert_eq!(
            coordinator_window(n(0), &BTreeSet::new(), &m),
            Err(DelayError::EmptyParticipants)
        );
    }

    #[test]
    fn participant_window_examples() {
        let m = DelayMatrix::uniform([n(0), n(1), n(2), n(3)], 10.0, 1.0).unwrap();
        let ct = set(&[1, 2, 3]);
        assert_eq!(participant_window(n(1), 0, 10_000, n(0), &ct, &m).unwrap(), 10_000);
        assert_eq!(participant_window(n(1), 0, 25_000, n(0), &ct, &m).unwrap(), 0);
        assert_eq!(participant_window(n(1), 0, 10_000, n(0), &set(&[1]), &m).unwrap(), 0);
    }

    #[test]
    fn bundle_orders_crash_timeout_above_windows() {
        let m = DelayMatrix::uniform([n(0), n(1), n(2)], 5.0, 1.0).unwrap();
        let b = TimeoutBundle::derive(n(0), &set(&[1, 2]), &m, None).unwrap();
        assert_eq!(b.w_coordinator, 15_000);
        assert_eq!(b.w_participant[&n(1)], 5_000);
        assert_eq!(b.crash_timeout, 50_000);
        assert!(matches!(
            TimeoutBundle::derive(n(0), &set(&[1, 2]), &m, Some(15_000)),
            Err(DelayError::CrashTimeoutTooSmall { .. })
        ));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(DelayMatrix::new(0.0).is_err());
        assert!(DelayMatrix::new(f64::NAN).is_err());
        let mut m = DelayMatrix::new(1.0).unwrap();
        assert!(m.set(n(0), n(1), -1.0).is_err());
    }
}
