//! TOML scenario files.
//!
//! ```toml
//! name = "cf-50ms"
//! seed = 7
//! participants = 3
//! protocol = "auto"          # or flac_ff, flac_cf, flac_nf, 2pc
//! duration_ms = 1000
//! failures = "cf-50ms"       # preset; see `parse_preset`
//! alpha_cf = "tuned"         # or an integer in 1..=256
//!
//! [network]
//! sigma_ms = 5.0
//! base_ms = 4.0
//! jitter_ms = 1.0
//!
//! [workload]
//! clients = 64
//! skew = 0.5
//!
//! [[failure]]
//! kind = "delay"
//! node = 2
//! tau_ms = 100
//! extra_delay_ms = 20
//! cycles = 3
//! ```
//!
//! Times are milliseconds in the file and microseconds inside.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cluster::{ClusterConfig, ClusterError, NetworkConfig, ProtocolMode, ScriptedTxn};
use crate::kvstore::{RetryPolicy, Workload};
use crate::model::{ms_f64, Micros, NodeId, ProtocolKind, TxnId};
use crate::sim::{FailureEntry, FailureKind, FailureSchedule};
use crate::trace::FailureTarget;
use crate::tuner::TunerConfig;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("bad failure preset {0:?}; expected none, cf-<dur>, nf-<dur> or cf-<dur>+nf-<dur>")]
    BadPreset(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

impl ScenarioError {
    /// Stable machine-readable kind for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            ScenarioError::Parse { .. } => "parse",
            ScenarioError::Io(_) => "io",
            ScenarioError::Invalid { .. } => "invalid",
            ScenarioError::BadPreset(_) => "bad_preset",
            ScenarioError::Cluster(_) => "config",
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            ScenarioError::Parse { line, .. } => Some(*line),
            _ => None,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// A downgrade threshold, fixed or left to the tuner.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Alpha {
    Fixed(u32),
    Tuned,
}

impl Default for Alpha {
    fn default() -> Self {
        Alpha::Fixed(1)
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Alpha::Fixed(a) => s.serialize_u32(*a),
            Alpha::Tuned => s.serialize_str("tuned"),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Alpha::Fixed(n)),
            Raw::S(s) if s == "tuned" => Ok(Alpha::Tuned),
            Raw::S(s) => Err(serde::de::Error::custom(format!("expected an integer or \"tuned\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub kind: FailureKind,
    #[serde(default)]
    pub node: Option<u32>,
    #[serde(default)]
    pub link: Option<[u32; 2]>,
    pub tau_ms: f64,
    #[serde(default)]
    pub extra_delay_ms: f64,
    #[serde(default)]
    pub start_ms: f64,
    #[serde(default = "one")]
    pub cycles: u32,
    #[serde(default)]
    pub period_ms: Option<f64>,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedSpec {
    pub at_ms: f64,
    pub protocol: ProtocolKind,
    pub participants: Vec<u32>,
    #[serde(default)]
    pub force_no: Vec<u32>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeSpec {
    pub txn: u64,
    pub node: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerSection {
    pub budget_s: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Length of one tuning episode's simulation.
    pub episode_ms: f64,
}

impl Default for TunerSection {
    fn default() -> Self {
        let d = TunerConfig::default();
        Self {
            budget_s: d.budget.as_secs_f64(),
            episodes: d.episodes,
            seed: d.seed,
            episode_ms: 1000.0,
        }
    }
}

impl TunerSection {
    pub fn tuner_config(&self) -> Result<TunerConfig, ScenarioError> {
        if !(self.budget_s.is_finite() && self.budget_s >= 0.0) {
            return Err(invalid("tuner.budget_s", "must be a non-negative number"));
        }
        Ok(TunerConfig {
            budget: std::time::Duration::from_secs_f64(self.budget_s),
            episodes: self.episodes,
            seed: self.seed,
            ..TunerConfig::default()
        })
    }
}

fn default_participants() -> u32 {
    3
}
fn default_duration() -> f64 {
    1000.0
}
fn default_true() -> bool {
    true
}
fn default_batch() -> usize {
    32
}
fn default_target() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_participants")]
    pub participants: u32,
    #[serde(default)]
    pub protocol: ProtocolMode,
    #[serde(default = "default_duration")]
    pub duration_ms: f64,
    #[serde(default)]
    pub warmup_ms: f64,
    #[serde(default)]
    pub horizon_ms: Option<f64>,
    #[serde(default)]
    pub crash_timeout_ms: Option<f64>,
    #[serde(default)]
    pub alpha_cf: Alpha,
    #[serde(default)]
    pub alpha_nf: Alpha,
    #[serde(default = "default_true")]
    pub record_messages: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Preset schedule, combined with any explicit `[[failure]]` entries.
    #[serde(default)]
    pub failures: Option<String>,
    /// Node the preset acts on.
    #[serde(default = "default_target")]
    pub failure_target: u32,
    /// Extra one-way delay of the preset's network failures; derived from
    /// the crash timeout when absent.
    #[serde(default)]
    pub nf_extra_ms: Option<f64>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub failure: Vec<FailureSpec>,
    #[serde(default)]
    pub scripted: Vec<ScriptedSpec>,
    /// Node id (as a string key) to clock offset in µs.
    #[serde(default)]
    pub clock_skew_us: BTreeMap<String, i64>,
    #[serde(default)]
    pub forge_decision: Option<ForgeSpec>,
    #[serde(default)]
    pub tuner: TunerSection,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (seed {})", self.name, self.seed)
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Parses `"50ms"`, `"1s"`, `"250us"` into µs.
pub fn parse_duration(s: &str) -> Option<Micros> {
    let s = s.trim();
    let (num, scale) = if let Some(n) = s.strip_suffix("ms") {
        (n, 1_000.0)
    } else if let Some(n) = s.strip_suffix("us") {
        (n, 1.0)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, 1_000_000.0)
    } else {
        return None;
    };
    let v: f64 = num.trim().parse().ok()?;
    (v.is_finite() && v > 0.0).then(|| (v * scale).round() as Micros)
}

/// Builds a τ-cycle schedule covering `[0, duration)` on `target`.
///
/// `cf-50ms` crashes for τ in every 2τ; `nf-1s` delays by `extra` for τ in
/// every 2τ; `cf-50ms+nf-1s` alternates one crash cycle with one delay cycle.
pub fn parse_preset(spec: &str, target: NodeId, duration: Micros, extra: Micros) -> Result<FailureSchedule, ScenarioError> {
    let bad = || ScenarioError::BadPreset(spec.to_string());
    let s = spec.trim().to_ascii_lowercase();
    if s == "none" || s == "failure-free" || s.is_empty() {
        return Ok(FailureSchedule::none());
    }
    let cycles_for = |period: Micros| duration.div_ceil(period.max(1)).max(1) as u32;
    let parts: Vec<&str> = s.split('+').map(str::trim).collect();
    match parts.as_slice() {
        [one] => {
            let (kind, dur) = one.split_once('-').ok_or_else(bad)?;
            let tau = parse_duration(dur).ok_or_else(bad)?;
            match kind {
                "cf" => Ok(FailureSchedule::crash_cycles(target, tau, cycles_for(2 * tau))),
                "nf" => Ok(FailureSchedule::delay_cycles(target, tau, extra, cycles_for(2 * tau))),
                _ => Err(bad()),
            }
        }
        [c, n] => {
            let crash = c.strip_prefix("cf-").and_then(parse_duration).ok_or_else(bad)?;
            let delay = n.strip_prefix("nf-").and_then(parse_duration).ok_or_else(bad)?;
            let period = 2 * crash + 2 * delay;
            Ok(FailureSchedule::composite(target, crash, delay, extra, cycles_for(period)))
        }
        _ => Err(bad()),
    }
}

/// Length of one full failure cycle of a preset; `None` for failure-free
/// or unparseable presets.
pub fn preset_period(spec: &str) -> Option<Micros> {
    let s = spec.trim().to_ascii_lowercase();
    let tau = |p: &str| p.split_once('-').and_then(|(_, d)| parse_duration(d));
    let taus: Option<Vec<Micros>> = s.split('+').map(|p| tau(p.trim())).collect();
    taus.map(|t| 2 * t.iter().sum::<Micros>())
}

impl Scenario {
    pub fn from_toml(src: &str) -> Result<Self, ScenarioError> {
        toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |r| line_col(src, r.start));
            ScenarioError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn needs_tuning(&self) -> bool {
        self.alpha_cf == Alpha::Tuned || self.alpha_nf == Alpha::Tuned
    }

    fn failure_schedule(&self, nf_extra: Micros) -> Result<FailureSchedule, ScenarioError> {
        let mut fs = match &self.failures {
            Some(p) => parse_preset(
                p,
                NodeId(self.failure_target),
                ms_f64(self.duration_ms),
                nf_extra,
            )?,
            None => FailureSchedule::none(),
        };
        for (i, f) in self.failure.iter().enumerate() {
            let field = format!("failure[{i}]");
            let target = match (f.node, f.link) {
                (Some(n), None) => FailureTarget::Node(NodeId(n)),
                (None, Some([a, b])) => FailureTarget::Link(NodeId(a), NodeId(b)),
                _ => return Err(invalid(&field, "exactly one of node or link is required")),
            };
            if !(f.tau_ms > 0.0) {
                return Err(invalid(&field, "tau_ms must be positive"));
            }
            fs.entries.push(FailureEntry {
                kind: f.kind,
                target,
                tau: ms_f64(f.tau_ms),
                extra_delay: ms_f64(f.extra_delay_ms),
                start: ms_f64(f.start_ms),
                cycles: f.cycles,
                period: f.period_ms.map(ms_f64),
            });
        }
        Ok(fs)
    }

    /// The simulator configuration; tuned α values start at 1.
    pub fn to_cluster(&self) -> Result<ClusterConfig, ScenarioError> {
        for (field, v) in [("duration_ms", self.duration_ms), ("warmup_ms", self.warmup_ms)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, "must be a non-negative number"));
            }
        }
        if self.warmup_ms > self.duration_ms {
            return Err(invalid("warmup_ms", "exceeds duration_ms"));
        }
        let alpha = |a: Alpha| match a {
            Alpha::Fixed(v) => v,
            Alpha::Tuned => 1,
        };
        let mut skew = BTreeMap::new();
        for (k, v) in &self.clock_skew_us {
            let n: u32 = k
                .parse()
                .map_err(|_| invalid("clock_skew_us", format!("key {k:?} is not a node id")))?;
            skew.insert(NodeId(n), *v);
        }
        let mut cfg = ClusterConfig {
            name: self.name.clone(),
            seed: self.seed,
            participants: self.participants,
            network: self.network.clone(),
            clock_skew_us: skew,
            crash_timeout: self.crash_timeout_ms.map(ms_f64),
            mode: self.protocol,
            alpha_cf: alpha(self.alpha_cf),
            alpha_nf: alpha(self.alpha_nf),
            workload: self.workload.clone(),
            retry: self.retry,
            failures: FailureSchedule::none(),
            duration: ms_f64(self.duration_ms),
            warmup: ms_f64(self.warmup_ms),
            horizon: self.horizon_ms.map(ms_f64),
            scripted: self
                .scripted
                .iter()
                .map(|s| ScriptedTxn {
                    at: ms_f64(s.at_ms),
                    protocol: s.protocol,
                    participants: s.participants.iter().map(|&p| NodeId(p)).collect(),
                    force_no: s.force_no.iter().map(|&p| NodeId(p)).collect(),
                })
                .collect(),
            record_messages: self.record_messages,
            forge_decision: self.forge_decision.map(|f| (TxnId(f.txn), NodeId(f.node))),
            batch_size: self.batch_size,
        };
        let nf_extra = match self.nf_extra_ms {
            Some(v) if v.is_finite() && v >= 0.0 => ms_f64(v),
            Some(_) => return Err(invalid("nf_extra_ms", "must be a non-negative number")),
            None => cfg.default_nf_extra().map_err(ClusterError::from)?,
        };
        cfg.failures = self.failure_schedule(nf_extra)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "name = \"m\"\nseed = 3\n";

    #[test]
    fn preset_periods() {
        assert_eq!(preset_period("cf-50ms"), Some(100_000));
        assert_eq!(preset_period("nf-1s"), Some(2_000_000));
        assert_eq!(preset_period("cf-50ms+nf-1s"), Some(2_100_000));
        assert_eq!(preset_period("none"), None);
    }

    #[test]
    fn minimal_scenario_uses_defaults() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        let c = s.to_cluster().unwrap();
        assert_eq!(c.participants, 3);
        assert_eq!(c.mode, ProtocolMode::Auto);
        assert_eq!(c.workload, Workload::default());
        assert_eq!(c.duration, 1_000_000);
        assert!(!s.needs_tuning());
    }

    #[test]
    fn seed_is_mandatory() {
        let e = Scenario::from_toml("name = \"m\"\n").unwrap_err();
        assert!(matches!(e, ScenarioError::Parse { .. }), "{e}");
        assert!(e.to_string().contains("seed"));
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let src = "name = \"m\"\nseed = 3\n\n[workload]\nclients = \"many\"\n";
        match Scenario::from_toml(src).unwrap_err() {
            ScenarioError::Parse { line, .. } => assert_eq!(line, 5),
            e => panic!("{e}"),
        }
        match Scenario::from_toml("name = \"m\"\nseed = 3\nbogus = 1\n").unwrap_err() {
            ScenarioError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_nodes_rejected() {
        let src = format!("{MINIMAL}[[failure]]\nkind = \"crash\"\nnode = 9\ntau_ms = 5\n");
        let e = Scenario::from_toml(&src).unwrap().to_cluster().unwrap_err();
        assert!(matches!(e, ScenarioError::Cluster(ClusterError::UnknownNode(NodeId(9)))), "{e}");
    }

    #[test]
    fn tuned_alpha_and_presets() {
        let src = format!("{MINIMAL}alpha_cf = \"tuned\"\nalpha_nf = 7\nfailures = \"cf-50ms+nf-1s\"\nduration_ms = 4200\n");
        let s = Scenario::from_toml(&src).unwrap();
        assert!(s.needs_tuning());
        let c = s.to_cluster().unwrap();
        assert_eq!((c.alpha_cf, c.alpha_nf), (1, 7));
        assert_eq!(c.failures.entries.len(), 2);
        // Period 2.1 s, so two cycles cover 4.2 s.
        assert_eq!(c.failures.entries[0].cycles, 2);
        assert!(Scenario::from_toml(&format!("{MINIMAL}alpha_cf = \"x\"\n")).is_err());
    }

    #[test]
    fn preset_grammar() {
        let n = NodeId(1);
        assert_eq!(parse_preset("none", n, 100, 0).unwrap(), FailureSchedule::none());
        let cf = parse_preset("CF-50ms", n, 1_000_000, 0).unwrap();
        assert_eq!(cf, FailureSchedule::crash_cycles(n, 50_000, 10));
        let nf = parse_preset("nf-1s", n, 1_000_000, 20_000).unwrap();
        assert_eq!(nf, FailureSchedule::delay_cycles(n, 1_000_000, 20_000, 1));
        for bad in ["cf", "xf-5ms", "cf-5", "nf-1s+cf-5ms", "cf-0ms"] {
            assert!(matches!(parse_preset(bad, n, 1, 0), Err(ScenarioError::BadPreset(_))), "{bad}");
        }
        assert_eq!(parse_duration("250us"), Some(250));
        assert_eq!(parse_duration("1.5s"), Some(1_500_000));
    }

    #[test]
    fn toml_roundtrip() {
        let src = format!(
            "{MINIMAL}protocol = \"flac_cf\"\n[[scripted]]\nat_ms = 1\nprotocol = \"two_pc\"\nparticipants = [1, 2]\n[forge_decision]\ntxn = 1\nnode = 2\n"
        );
        let s = Scenario::from_toml(&src).unwrap();
        let again = Scenario::from_toml(&s.to_toml()).unwrap();
        assert_eq!(s, again);
        let c = s.to_cluster().unwrap();
        assert_eq!(c.forge_decision, Some((TxnId(1), NodeId(2))));
        assert_eq!(c.scripted[0].at, 1000);
    }
}
