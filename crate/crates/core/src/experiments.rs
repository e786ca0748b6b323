//! Experiment drivers shared by the CLI and the acceptance tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{check_safety, count_message_delays, CheckError, DelayCountError, SafetyVerdict};
use crate::cluster::{run, ClusterConfig, ClusterError, NetworkConfig, ProtocolMode, RunOutcome, ScriptedTxn};
use crate::kvstore::{write_metrics_csv, MetricsError, MetricsRow, Workload};
use crate::model::{ms, Micros, NodeId, ProtocolKind, Role};
use crate::scenario::{parse_preset, preset_period, ScenarioError};
use crate::sim::FailureSchedule;
use crate::tuner::{tune, TuneResult, TunerConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error(transparent)]
    DelayCount(#[from] DelayCountError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{protocol} {case}: no {role} decision to count")]
    NothingCounted {
        protocol: &'static str,
        case: &'static str,
        role: &'static str,
    },
}

/// Everything one run writes to disk, already serialized.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub outcome: RunOutcome,
    pub verdict: SafetyVerdict,
    pub trace_jsonl: String,
    pub metrics_csv: String,
    pub verdict_json: String,
}

pub fn run_with_artifacts(cfg: &ClusterConfig) -> Result<Artifacts, ExperimentError> {
    let outcome = run(cfg)?;
    let verdict = check_safety(&outcome.trace)?;
    let protocol = match cfg.mode {
        ProtocolMode::Auto => "auto".to_string(),
        ProtocolMode::Fixed(p) => p.name().to_string(),
    };
    let mut csv = Vec::new();
    write_metrics_csv(&[MetricsRow::new(&cfg.name, &protocol, &outcome.metrics)], &mut csv)?;
    Ok(Artifacts {
        trace_jsonl: outcome.trace.to_jsonl(),
        metrics_csv: String::from_utf8(csv).expect("csv is utf-8"),
        verdict_json: serde_json::to_string_pretty(&verdict).expect("verdict serializes"),
        verdict,
        outcome,
    })
}

/// One protocol's message-delay counts. `participant_crash` is `None` where
/// the protocol gives no crash guarantee.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayRow {
    pub protocol: String,
    pub coordinator: u64,
    pub participant_commit: u64,
    pub participant_abort: u64,
    pub participant_crash: Option<u64>,
}

/// Uniform 5 ms links with no jitter, so `U` equals the link delay.
pub fn delay_network() -> NetworkConfig {
    NetworkConfig {
        sigma_ms: 5.0,
        r: 1.0,
        base_ms: 5.0,
        jitter_ms: 0.0,
        links: Vec::new(),
    }
}

fn single_txn(p: ProtocolKind, force_no: &[u32], crashed: Option<u32>) -> ClusterConfig {
    let mut cfg = ClusterConfig {
        name: format!("delaycount-{}", p.name()),
        network: delay_network(),
        mode: ProtocolMode::Fixed(p),
        workload: Workload {
            clients: 0,
            ..Workload::default()
        },
        duration: 0,
        scripted: vec![ScriptedTxn {
            at: 0,
            protocol: p,
            participants: vec![NodeId(1), NodeId(2), NodeId(3)],
            force_no: force_no.iter().map(|&n| NodeId(n)).collect(),
        }],
        ..ClusterConfig::default()
    };
    if let Some(n) = crashed {
        // Down for the whole transaction.
        cfg.failures = FailureSchedule::crash_cycles(NodeId(n), ms(1000), 1);
    }
    cfg
}

fn max_count(
    cfg: &ClusterConfig,
    role: Role,
    skip: &[u32],
    p: ProtocolKind,
    case: &'static str,
) -> Result<u64, ExperimentError> {
    let out = run(cfg)?;
    count_message_delays(&out.trace)?
        .into_iter()
        .filter(|c| c.role == role && !skip.contains(&c.node.0))
        .map(|c| c.delays)
        .max()
        .ok_or(ExperimentError::NothingCounted {
            protocol: p.name(),
            case,
            role: match role {
                Role::Coordinator => "coordinator",
                Role::Participant => "participant",
            },
        })
}

/// Counts the maximum message delays per role and outcome:
/// commit with all Yes, abort caused by one participant's No, and the
/// surviving participants when one participant is down from the start.
pub fn delaycount() -> Result<Vec<DelayRow>, ExperimentError> {
    ProtocolKind::ALL
        .iter()
        .map(|&p| {
            let commit = single_txn(p, &[], None);
            let abort = single_txn(p, &[3], None);
            let crash = (p != ProtocolKind::FlacFf).then(|| single_txn(p, &[], Some(3)));
            Ok(DelayRow {
                protocol: p.name().to_string(),
                coordinator: max_count(&commit, Role::Coordinator, &[], p, "commit")?,
                participant_commit: max_count(&commit, Role::Participant, &[], p, "commit")?,
                participant_abort: max_count(&abort, Role::Participant, &[3], p, "abort")?,
                participant_crash: match crash {
                    Some(c) => Some(max_count(&c, Role::Participant, &[3], p, "crash")?),
                    None => None,
                },
            })
        })
        .collect()
}

pub fn delay_rows_csv(rows: &[DelayRow]) -> String {
    let mut s = String::from("protocol,coordinator,participant_commit,participant_abort,participant_crash\n");
    for r in rows {
        let crash = r.participant_crash.map_or("-".to_string(), |c| c.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.protocol, r.coordinator, r.participant_commit, r.participant_abort, crash
        );
    }
    s
}

/// Base for throughput experiments: 64 closed-loop clients at skew 0.5.
pub fn bench_base(seed: u64, duration: Micros) -> ClusterConfig {
    ClusterConfig {
        name: "bench".into(),
        seed,
        duration,
        record_messages: false,
        workload: Workload {
            clients: 64,
            skew: 0.5,
            ..Workload::default()
        },
        ..ClusterConfig::default()
    }
}

/// Applies a failure preset such as `nf-50ms` to `base` on participant 1.
pub fn with_preset(base: &ClusterConfig, preset: &str, extra: Micros) -> Result<ClusterConfig, ExperimentError> {
    let mut cfg = base.clone();
    cfg.failures = parse_preset(preset, NodeId(1), cfg.duration, extra)?;
    cfg.name = format!("{}-{}", base.name, preset);
    Ok(cfg)
}

/// `with_preset` using the derived network-failure delay.
pub fn with_default_preset(base: &ClusterConfig, preset: &str) -> Result<ClusterConfig, ExperimentError> {
    let extra = base.default_nf_extra().map_err(ClusterError::from)?;
    with_preset(base, preset, extra)
}

/// Committed throughput of `cfg` with the given thresholds.
pub fn episode_throughput(cfg: &ClusterConfig, alpha_cf: u32, alpha_nf: u32) -> f64 {
    let mut c = cfg.clone();
    c.mode = ProtocolMode::Auto;
    c.alpha_cf = alpha_cf;
    c.alpha_nf = alpha_nf;
    c.record_messages = false;
    match run(&c) {
        Ok(out) => out.metrics.tps,
        Err(_) => 0.0,
    }
}

pub fn tune_alphas(cfg: &ClusterConfig, tuner: &TunerConfig) -> TuneResult {
    tune(tuner, |a, b| episode_throughput(cfg, a, b))
}

/// Run length for a preset: one full failure cycle, and at least a second.
pub fn experiment_duration(preset: &str) -> Micros {
    preset_period(preset).unwrap_or(0).max(ms(1000))
}

/// Auto mode as deployed: α tuned on the scenario itself, then run.
pub fn tuned_auto(cfg: &ClusterConfig, tuner: &TunerConfig) -> (TuneResult, f64) {
    let r = tune_alphas(cfg, tuner);
    let tps = episode_throughput(cfg, r.alpha_cf, r.alpha_nf);
    (r, tps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub protocol: String,
    pub seed: u64,
    pub tps: f64,
    pub p99_ms: f64,
    pub commits: u64,
    pub aborts: u64,
    pub retries_mean: f64,
    pub safe: bool,
}

/// Runs every (preset, mode, seed) combination. With a tuner, auto-mode
/// runs first tune (α_CF, α_NF) on their own configuration.
pub fn bench(
    base: &ClusterConfig,
    presets: &[&str],
    modes: &[ProtocolMode],
    seeds: &[u64],
    tuner: Option<&TunerConfig>,
) -> Result<Vec<BenchRow>, ExperimentError> {
    let mut rows = Vec::new();
    for preset in presets {
        for &mode in modes {
            for &seed in seeds {
                let mut cfg = with_default_preset(base, preset)?;
                cfg.mode = mode;
                cfg.seed = seed;
                if let (ProtocolMode::Auto, Some(t)) = (mode, tuner) {
                    let r = tune_alphas(&cfg, t);
                    cfg.alpha_cf = r.alpha_cf;
                    cfg.alpha_nf = r.alpha_nf;
                }
                let out = run(&cfg)?;
                let v = check_safety(&out.trace)?;
                let m = &out.metrics;
                rows.push(BenchRow {
                    scenario: preset.to_string(),
                    protocol: match mode {
                        ProtocolMode::Auto => "auto".into(),
                        ProtocolMode::Fixed(p) => p.name().into(),
                    },
                    seed,
                    tps: m.tps,
                    p99_ms: m.p99_ms,
                    commits: m.committed,
                    aborts: m.aborted_final,
                    retries_mean: (m.retries_mean * 1000.0).round() / 1000.0,
                    safe: v.is_safe(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(MetricsError::from)?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Throughput of every corner of `{1, 256}²` and of the tuned pair.
#[derive(Clone, Debug, Serialize)]
pub struct TuneReport {
    pub preset: String,
    pub alpha_cf: u32,
    pub alpha_nf: u32,
    pub tuned_tps: f64,
    pub corners: BTreeMap<String, f64>,
    pub best_corner_tps: f64,
    pub elapsed_s: f64,
    pub budget_exceeded: bool,
}

pub fn tune_report(cfg: &ClusterConfig, preset: &str, tuner: &TunerConfig) -> TuneReport {
    let started = Instant::now();
    let r = tune_alphas(cfg, tuner);
    let elapsed_s = started.elapsed().as_secs_f64();
    let mut corners = BTreeMap::new();
    for a in [1, 256] {
        for b in [1, 256] {
            corners.insert(format!("{a}/{b}"), episode_throughput(cfg, a, b));
        }
    }
    let best_corner_tps = corners.values().cloned().fold(0.0, f64::max);
    TuneReport {
        preset: preset.to_string(),
        alpha_cf: r.alpha_cf,
        alpha_nf: r.alpha_nf,
        tuned_tps: episode_throughput(cfg, r.alpha_cf, r.alpha_nf),
        corners,
        best_corner_tps,
        elapsed_s,
        budget_exceeded: r.budget_exceeded,
    }
}
