//! `flac`: scenario runner for the commit-protocol simulator.
//!
//! Exit codes: 0 pass, 1 safety violation, 2 configuration error, 3 budget
//! exceeded. Every failure also prints one JSON error record on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use flac::checker::{check_nonblocking, check_safety, explore_fsa, FsaError, FsaProtocol, FsaSpec, SafetyVerdict};
use flac::checker::fsa::explore_fsa_with_budget;
use flac::cluster::{ClusterConfig, ProtocolMode};
use flac::experiments::{
    bench, bench_base, bench_csv, delay_rows_csv, delaycount, experiment_duration, run_with_artifacts, tune_alphas,
};
use flac::model::ms_f64;
use flac::scenario::{Alpha, Scenario, ScenarioError};
use flac::trace::GlobalTrace;
use flac::tuner::{TuneResult, TunerConfig};

#[derive(Parser)]
#[command(name = "flac", version, about = "Failure-aware atomic commit simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write trace.jsonl, metrics.csv and verdict.json.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-verify an existing trace.
    Check {
        trace: PathBuf,
        /// Where to write verdict.json; stdout only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate the participant automata and print the concurrency sets.
    Modelcheck {
        /// flac_ff or flac_cf.
        #[arg(long, default_value = "flac_cf")]
        protocol: String,
        #[arg(long, short, default_value_t = 2)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Maximum number of global states to visit.
        #[arg(long)]
        max_states: Option<usize>,
    },
    /// Tune (α_CF, α_NF) for a scenario.
    Tune {
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scenario's tuner budget.
        #[arg(long)]
        budget_s: Option<f64>,
    },
    /// Message-delay counts per protocol under a uniform-delay network.
    Delaycount {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Throughput sweep over failure presets, protocols and seeds.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "none,cf-50ms,nf-50ms")]
        presets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "auto,flac_ff,flac_cf,flac_nf,2pc")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Run length; defaults to one failure cycle and at least 1 s.
        #[arg(long)]
        duration_ms: Option<f64>,
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        /// Tune (α_CF, α_NF) per auto-mode run instead of using α = 1.
        #[arg(long)]
        tune: bool,
    },
}

/// A failed command: exit code plus the JSON error record.
struct Failure {
    code: u8,
    record: Value,
}

impl Failure {
    fn new(code: u8, kind: &str, message: impl ToString) -> Self {
        Self {
            code,
            record: json!({ "error": kind, "message": message.to_string(), "exit_code": code }),
        }
    }

    fn config(kind: &str, message: impl ToString) -> Self {
        Self::new(2, kind, message)
    }

    fn with(mut self, key: &str, v: Value) -> Self {
        self.record[key] = v;
        self
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let mut f = Failure::config(e.kind(), &e);
        if let ScenarioError::Parse { line, column, .. } = &e {
            f = f.with("line", json!(line)).with("column", json!(column));
        }
        f
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::config("io", format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn safety_failure(v: &SafetyVerdict) -> Failure {
    Failure::new(1, "safety_violation", "agreement or validity violated")
        .with("agreement_violations", json!(v.agreement_violations.len()))
        .with("validity_violations", json!(v.validity_violations.len()))
        .with("faults", json!(v.faults.len()))
}

fn budget_failure(what: &str, r: &TuneResult) -> Failure {
    Failure::new(3, "budget_exceeded", format!("{what} stopped at its wall-clock budget"))
        .with("episodes", json!(r.history.len()))
        .with("elapsed_s", json!(r.elapsed.as_secs_f64()))
}

/// Tunes on episodes of the scenario's own configuration.
fn tune_scenario(s: &Scenario, cfg: &ClusterConfig, budget_s: Option<f64>) -> Result<TuneResult, Failure> {
    let mut tuner: TunerConfig = s.tuner.tuner_config()?;
    if let Some(b) = budget_s {
        if !(b.is_finite() && b >= 0.0) {
            return Err(Failure::config("invalid", "--budget-s must be a non-negative number"));
        }
        tuner.budget = Duration::from_secs_f64(b);
    }
    let mut episode = cfg.clone();
    episode.duration = ms_f64(s.tuner.episode_ms).min(cfg.duration).max(1);
    episode.warmup = episode.warmup.min(episode.duration);
    episode.horizon = None;
    Ok(tune_alphas(&episode, &tuner))
}

fn cmd_run(path: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut s = Scenario::load(path)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let mut cfg = s.to_cluster()?;
    let mut over_budget = None;
    if s.needs_tuning() && cfg.mode == ProtocolMode::Auto {
        let r = tune_scenario(&s, &cfg, None)?;
        if let Alpha::Tuned = s.alpha_cf {
            cfg.alpha_cf = r.alpha_cf;
        }
        if let Alpha::Tuned = s.alpha_nf {
            cfg.alpha_nf = r.alpha_nf;
        }
        if r.budget_exceeded {
            over_budget = Some(r);
        }
    }
    let a = run_with_artifacts(&cfg).map_err(|e| Failure::config("config", e))?;
    write(&out.join("trace.jsonl"), &a.trace_jsonl)?;
    write(&out.join("metrics.csv"), &a.metrics_csv)?;
    write(&out.join("verdict.json"), &format!("{}\n", a.verdict_json))?;
    for (node, log) in &a.outcome.logs {
        write(&out.join("logs").join(format!("node-{}.jsonl", node.0)), &log.to_jsonl())?;
    }
    println!(
        "{}",
        json!({
            "scenario": cfg.name,
            "seed": cfg.seed,
            "alpha_cf": cfg.alpha_cf,
            "alpha_nf": cfg.alpha_nf,
            "tps": a.outcome.metrics.tps,
            "safe": a.verdict.is_safe(),
            "termination_holes": a.verdict.termination_holes.len(),
            "out": out.display().to_string(),
        })
    );
    if !a.verdict.is_safe() {
        return Err(safety_failure(&a.verdict));
    }
    if let Some(r) = over_budget {
        return Err(budget_failure("tuning", &r));
    }
    Ok(())
}

fn cmd_check(path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let trace = GlobalTrace::from_jsonl(&text).map_err(|e| Failure::config("trace", e))?;
    let v = check_safety(&trace).map_err(|e| Failure::config("trace", e))?;
    let body = serde_json::to_string_pretty(&v).expect("verdict serializes");
    match out {
        Some(p) => write(&p.join("verdict.json"), &format!("{body}\n"))?,
        None => println!("{body}"),
    }
    if v.is_safe() {
        Ok(())
    } else {
        Err(safety_failure(&v))
    }
}

fn cmd_modelcheck(protocol: &str, n: usize, out: Option<&Path>, max_states: Option<usize>) -> Result<(), Failure> {
    let p = match protocol.to_ascii_lowercase().as_str() {
        "flac_ff" | "ff" => FsaProtocol::FlacFf,
        "flac_cf" | "cf" => FsaProtocol::FlacCf,
        other => {
            return Err(Failure::config(
                "invalid",
                format!("unknown protocol {other:?}; expected flac_ff or flac_cf"),
            ))
        }
    };
    let spec = FsaSpec::for_protocol(p);
    let ex = match max_states {
        Some(b) => explore_fsa_with_budget(&spec, n, b),
        None => explore_fsa(&spec, n),
    }
    .map_err(|e| match e {
        FsaError::Budget(_) => Failure::new(3, "budget_exceeded", e),
        _ => Failure::config("invalid", e),
    })?;
    let nonblocking = check_nonblocking(&ex.table, &spec.committable);
    print!("{}", ex.table.to_text());
    let record = json!({
        "protocol": p.to_string(),
        "participants": n,
        "nonblocking": nonblocking,
        "census": ex.census,
        "table": ex.table,
        "r_row": ex.r_row,
        "derived_committable": ex.derived_committable,
    });
    println!("{}", json!({ "protocol": p.to_string(), "participants": n, "nonblocking": nonblocking }));
    if let Some(dir) = out {
        let stem = format!("{}-n{n}", p.to_string().to_ascii_lowercase());
        write(&dir.join(format!("{stem}.txt")), &ex.table.to_text())?;
        write(
            &dir.join(format!("{stem}.json")),
            &format!("{}\n", serde_json::to_string_pretty(&record).expect("record serializes")),
        )?;
    }
    Ok(())
}

fn cmd_tune(path: &Path, out: Option<&Path>, budget_s: Option<f64>) -> Result<(), Failure> {
    let s = Scenario::load(path)?;
    let mut cfg = s.to_cluster()?;
    cfg.mode = ProtocolMode::Auto;
    let r = tune_scenario(&s, &cfg, budget_s)?;
    let summary = json!({
        "alpha_cf": r.alpha_cf,
        "alpha_nf": r.alpha_nf,
        "episodes": r.history.len(),
        "elapsed_s": r.elapsed.as_secs_f64(),
        "budget_exceeded": r.budget_exceeded,
    });
    println!("{summary}");
    if let Some(dir) = out {
        write(&dir.join("qtable.json"), &format!("{}\n", r.q.to_json()))?;
        write(&dir.join("alpha.json"), &format!("{summary}\n"))?;
    }
    if r.budget_exceeded {
        return Err(budget_failure("tuning", &r));
    }
    Ok(())
}

fn cmd_delaycount(out: Option<&Path>) -> Result<(), Failure> {
    let rows = delaycount().map_err(|e| Failure::new(1, "delaycount", e))?;
    let csv = delay_rows_csv(&rows);
    print!("{csv}");
    if let Some(dir) = out {
        write(&dir.join("delaycount.csv"), &csv)?;
    }
    Ok(())
}

fn cmd_bench(
    presets: &[String],
    modes: &[String],
    seeds: &[u64],
    duration_ms: Option<f64>,
    out: &Path,
    tune: bool,
) -> Result<(), Failure> {
    let modes: Vec<ProtocolMode> = modes
        .iter()
        .map(|m| m.parse().map_err(|e| Failure::config("invalid", e)))
        .collect::<Result<_, _>>()?;
    if let Some(d) = duration_ms {
        if !(d.is_finite() && d > 0.0) {
            return Err(Failure::config("invalid", "--duration-ms must be positive"));
        }
    }
    let tuner = tune.then(TunerConfig::default);
    let mut rows = Vec::new();
    for preset in presets {
        let duration = duration_ms.map(ms_f64).unwrap_or_else(|| experiment_duration(preset));
        let base = bench_base(seeds.first().copied().unwrap_or(1), duration);
        let r = bench(&base, &[preset.as_str()], &modes, seeds, tuner.as_ref()).map_err(|e| Failure::config("config", e))?;
        rows.extend(r);
    }
    let csv = bench_csv(&rows).map_err(|e| Failure::config("io", e))?;
    write(&out.join("bench.csv"), &csv)?;
    print!("{csv}");
    if let Some(bad) = rows.iter().find(|r| !r.safe) {
        return Err(Failure::new(1, "safety_violation", "a bench run violated safety")
            .with("scenario", json!(bad.scenario))
            .with("protocol", json!(bad.protocol))
            .with("seed", json!(bad.seed)));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let f = Failure::config("usage", e.to_string().trim_end());
            eprintln!("{}", f.record);
            return ExitCode::from(f.code);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match &cli.command {
        Command::Run { scenario, out, seed } => cmd_run(scenario, out, *seed),
        Command::Check { trace, out } => cmd_check(trace, out.as_deref()),
        Command::Modelcheck {
            protocol,
            n,
            out,
            max_states,
        } => cmd_modelcheck(protocol, *n, out.as_deref(), *max_states),
        Command::Tune { scenario, out, budget_s } => cmd_tune(scenario, out.as_deref(), *budget_s),
        Command::Delaycount { out } => cmd_delaycount(out.as_deref()),
        Command::Bench {
            presets,
            modes,
            seeds,
            duration_ms,
            out,
            tune,
        } => cmd_bench(presets, modes, seeds, *duration_ms, out, *tune),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record);
            ExitCode::from(f.code)
        }
    }
}
