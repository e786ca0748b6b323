//! End-to-end checks of the `flac` binary: exit codes, error records and
//! artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn flac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    root.join(name).to_string_lossy().into_owned()
}

fn error_record(o: &Output) -> Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().expect("an error record on stderr");
    serde_json::from_str(line).expect("error record is JSON")
}

fn out_dir(t: &tempfile::TempDir, name: &str) -> PathBuf {
    t.path().join(name)
}

#[test]
fn failure_free_run_passes_and_writes_artifacts() {
    let t = tempfile::tempdir().unwrap();
    let out = out_dir(&t, "ff");
    let o = flac(&["run", &scenario("failure_free.toml"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace.jsonl", "metrics.csv", "verdict.json", "logs/node-0.jsonl"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("verdict.json")).unwrap()).unwrap();
    assert_eq!(v["agreement_violations"].as_array().unwrap().len(), 0);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("scenario,protocol,tps,p99_ms,commits,aborts,retries_mean\n"));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (out_dir(&t, "a"), out_dir(&t, "b"));
    for d in [&a, &b] {
        let o = flac(&["run", &scenario("nf_cycle_auto.toml"), "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["trace.jsonl", "metrics.csv", "verdict.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn forged_decision_exits_one_with_agreement_violation() {
    let t = tempfile::tempdir().unwrap();
    let out = out_dir(&t, "forged");
    let o = flac(&["run", &scenario("forged_decision.toml"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let rec = error_record(&o);
    assert_eq!(rec["error"], "safety_violation");
    assert_eq!(rec["exit_code"], 1);
    assert!(rec["agreement_violations"].as_u64().unwrap() >= 1);

    let check = flac(&["check", out.join("trace.jsonl").to_str().unwrap()]);
    assert_eq!(check.status.code(), Some(1));
    assert_eq!(error_record(&check)["error"], "safety_violation");
}

#[test]
fn auto_mode_under_network_cycles_goes_ff_nf_ff() {
    let t = tempfile::tempdir().unwrap();
    let out = out_dir(&t, "nf");
    let o = flac(&["run", &scenario("nf_cycle_auto.toml"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let mut last: std::collections::BTreeMap<u64, Vec<String>> = Default::default();
    for line in trace.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        if r["type"] == "level_change" {
            let node = r["node"].as_u64().unwrap();
            last.entry(node).or_default().push(r["new"].as_str().unwrap().to_string());
        }
    }
    let ff_nf_ff = last.values().any(|seq| {
        let nf = seq.iter().position(|l| l == "NF");
        nf.is_some_and(|i| seq[i..].iter().any(|l| l == "FF"))
    });
    assert!(ff_nf_ff, "no node went FF -> NF -> FF: {last:?}");
}

#[test]
fn config_errors_exit_two_with_line_numbers() {
    let t = tempfile::tempdir().unwrap();
    let bad = t.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nseed = 1\n\n[workload]\nclients = \"many\"\n").unwrap();
    let o = flac(&["run", bad.to_str().unwrap(), "--out", t.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let rec = error_record(&o);
    assert_eq!(rec["error"], "parse");
    assert_eq!(rec["line"], 5);

    let missing = flac(&["run", "/definitely/not/here.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(error_record(&missing)["error"], "io");

    let usage = flac(&["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_record(&usage)["error"], "usage");

    let mode = flac(&["bench", "--modes", "3pc", "--presets", "none", "--seeds", "1"]);
    assert_eq!(mode.status.code(), Some(2));
}

#[test]
fn budgets_exit_three() {
    let o = flac(&["modelcheck", "--protocol", "flac_cf", "-n", "3", "--max-states", "50"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_record(&o)["error"], "budget_exceeded");

    let o = flac(&["tune", &scenario("cf_cycle_tuned.toml"), "--budget-s", "0"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_record(&o)["error"], "budget_exceeded");
}

#[test]
fn modelcheck_reports_nonblocking() {
    let t = tempfile::tempdir().unwrap();
    let o = flac(&["modelcheck", "--protocol", "flac_cf", "-n", "2", "--out", t.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let summary: Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(summary["nonblocking"], true);
    assert!(t.path().join("flac_cf-n2.json").is_file());

    let o = flac(&["modelcheck", "--protocol", "flac_ff", "-n", "2"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    let summary: Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(summary["nonblocking"], false);
}

#[test]
fn delaycount_prints_the_table() {
    let o = flac(&["delaycount"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        String::from_utf8_lossy(&o.stdout),
        "protocol,coordinator,participant_commit,participant_abort,participant_crash\n\
         FLAC_FF,3,1,1,-\nFLAC_CF,3,3,1,1\nFLAC_NF,2,2,2,2\n2PC,4,2,2,2\n"
    );
}

#[test]
fn bench_writes_csv() {
    let t = tempfile::tempdir().unwrap();
    let o = flac(&[
        "bench", "--presets", "none", "--modes", "auto,2pc", "--seeds", "1", "--duration-ms", "200", "--out",
        t.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(t.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("scenario,protocol,seed,tps,p99_ms,commits,aborts,retries_mean,safe\n"));
}

#[test]
fn tune_emits_alphas() {
    let t = tempfile::tempdir().unwrap();
    let o = flac(&["tune", &scenario("cf_cycle_tuned.toml"), "--out", t.path().to_str().unwrap(), "--budget-s", "30"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap();
    for k in ["alpha_cf", "alpha_nf"] {
        let a = v[k].as_u64().unwrap();
        assert!((1..=256).contains(&a) && a.is_power_of_two());
    }
    assert!(t.path().join("qtable.json").is_file());
}
