//! Tabular q-learning for the downgrade thresholds α_CF and α_NF.
//!
//! For each of the two upgraded levels the learner walks a chain of
//! power-of-two streak buckets `1, 2, 4, ..., 256`. At every bucket it either
//! waits (reward 0, move to the next bucket) or downgrades (terminal, the
//! reward is the throughput observed with α set to that bucket). The cached
//! strategy is the first bucket whose greedy action is Downgrade.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Micros;
use crate::rlsm::{RobustnessLevel, MAX_ALPHA};

/// Streak buckets; the last equals [`MAX_ALPHA`].
pub const BUCKETS: [u32; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];

const _: () = assert!(BUCKETS[BUCKETS.len() - 1] == MAX_ALPHA);

/// Average committed throughput over one batch at one level.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub level: RobustnessLevel,
    pub mu: f64,
}

/// Turns per-transaction outcomes into reward samples. A level change drops
/// the partial batch so every sample describes one level only.
#[derive(Clone, Debug)]
pub struct Collector {
    batch_size: usize,
    level: Option<RobustnessLevel>,
    batch_count: usize,
    batch_committed: u64,
    batch_start: Micros,
    samples: Vec<RewardSample>,
    total_committed: u64,
}

impl Collector {
    pub fn new(batch_size: usize) -> Self {
        Self {
            batch_size: batch_size.max(1),
            level: None,
            batch_count: 0,
            batch_committed: 0,
            batch_start: 0,
            samples: Vec::new(),
            total_committed: 0,
        }
    }

    pub fn ingest(&mut self, level: RobustnessLevel, committed: bool, clock: Micros) -> Option<RewardSample> {
        if self.level != Some(level) || self.batch_count == 0 {
            self.level = Some(level);
            self.batch_count = 0;
            self.batch_committed = 0;
            self.batch_start = clock;
        }
        self.batch_count += 1;
        if committed {
            self.batch_committed += 1;
            self.total_committed += 1;
        }
        if self.batch_count < self.batch_size {
            return None;
        }
        let elapsed = clock.saturating_sub(self.batch_start).max(1) as f64 / 1e6;
        let s = RewardSample {
            level,
            mu: self.batch_committed as f64 / elapsed,
        };
        self.samples.push(s);
        self.batch_count = 0;
        self.batch_committed = 0;
        Some(s)
    }

    pub fn samples(&self) -> &[RewardSample] {
        &self.samples
    }

    /// Commits per second over a whole measurement window.
    pub fn lifetime_mu(&self, window: Micros) -> f64 {
        if window == 0 {
            return 0.0;
        }
        self.total_committed as f64 / (window as f64 / 1e6)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunerAction {
    Wait,
    Downgrade,
}

/// Chain position: an upgraded level and a bucket index into [`BUCKETS`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TunerState {
    pub level: RobustnessLevel,
    pub bucket: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEntry {
    pub level: RobustnessLevel,
    pub streak: u32,
    pub wait: f64,
    pub downgrade: f64,
}

/// Q-values for both chains.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    q: BTreeMap<TunerState, [f64; 2]>,
}

impl QTable {
    pub fn new(init: f64) -> Self {
        let mut q = BTreeMap::new();
        for level in [RobustnessLevel::CF, RobustnessLevel::NF] {
            for bucket in 0..BUCKETS.len() {
                q.insert(TunerState { level, bucket }, [init, init]);
            }
        }
        Self { q }
    }

    fn idx(a: TunerAction) -> usize {
        match a {
            TunerAction::Wait => 0,
            TunerAction::Downgrade => 1,
        }
    }

    pub fn get(&self, s: TunerState, a: TunerAction) -> f64 {
        self.q.get(&s).map_or(0.0, |v| v[Self::idx(a)])
    }

    pub fn set(&mut self, s: TunerState, a: TunerAction, v: f64) {
        self.q.entry(s).or_insert([0.0, 0.0])[Self::idx(a)] = v;
    }

    pub fn max_value(&self, s: TunerState) -> f64 {
        self.get(s, TunerAction::Wait).max(self.get(s, TunerAction::Downgrade))
    }

    /// Greedy action; ties go to Wait. The last bucket can only downgrade.
    pub fn greedy(&self, s: TunerState) -> TunerAction {
        if s.bucket + 1 >= BUCKETS.len() || self.get(s, TunerAction::Downgrade) > self.get(s, TunerAction::Wait) {
            TunerAction::Downgrade
        } else {
            TunerAction::Wait
        }
    }

    pub fn entries(&self) -> Vec<QEntry> {
        self.q
            .iter()
            .map(|(s, v)| QEntry {
                level: s.level,
                streak: BUCKETS[s.bucket],
                wait: v[0],
                downgrade: v[1],
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("q-table serializes")
    }
}

/// One temporal-difference step. `s_next = None` marks a terminal transition.
pub fn qlearn_update(
    q: &mut QTable,
    s: TunerState,
    a: TunerAction,
    reward: f64,
    s_next: Option<TunerState>,
    eta: f64,
    gamma: f64,
) {
    let next = s_next.map_or(0.0, |n| q.max_value(n));
    let old = q.get(s, a);
    q.set(s, a, old + eta * (reward + gamma * next - old));
}

/// Smallest bucket whose greedy action is Downgrade.
pub fn extract_alpha(q: &QTable, level: RobustnessLevel) -> u32 {
    (0..BUCKETS.len())
        .find(|&bucket| q.greedy(TunerState { level, bucket }) == TunerAction::Downgrade)
        .map_or(MAX_ALPHA, |b| BUCKETS[b])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    pub eta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub epsilon_decay: f64,
    pub episodes: usize,
    pub budget: Duration,
    pub seed: u64,
    /// Initial Q-value, relative to the first episode's throughput. The
    /// default 1.0 keeps rarely tried buckets at par instead of behind.
    pub init_q: f64,
    /// Reuse the reward of an (α_CF, α_NF) pair seen before. Valid when the
    /// evaluator is deterministic.
    pub memoize: bool,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            gamma: 1.0,
            epsilon: 0.2,
            epsilon_decay: 0.95,
            episodes: 40,
            budget: Duration::from_secs(5),
            seed: 7,
            init_q: 1.0,
            memoize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Episode {
    pub alpha_cf: u32,
    pub alpha_nf: u32,
    pub mu: f64,
}

#[derive(Clone, Debug)]
pub struct TuneResult {
    pub alpha_cf: u32,
    pub alpha_nf: u32,
    pub q: QTable,
    pub history: Vec<Episode>,
    pub elapsed: Duration,
    pub budget_exceeded: bool,
}

fn walk(q: &QTable, level: RobustnessLevel, eps: f64, forced: Option<usize>, rng: &mut ChaCha8Rng) -> usize {
    if let Some(b) = forced {
        return b;
    }
    let last = BUCKETS.len() - 1;
    for bucket in 0..last {
        let s = TunerState { level, bucket };
        let a = if rng.random_bool(eps) {
            if rng.random_bool(0.5) {
                TunerAction::Downgrade
            } else {
                TunerAction::Wait
            }
        } else {
            q.greedy(s)
        };
        if a == TunerAction::Downgrade {
            return bucket;
        }
    }
    last
}

fn learn(q: &mut QTable, level: RobustnessLevel, stop: usize, reward: f64, cfg: &TunerConfig) {
    let s = TunerState { level, bucket: stop };
    qlearn_update(q, s, TunerAction::Downgrade, reward, None, cfg.eta, cfg.gamma);
    for bucket in (0..stop).rev() {
        let s = TunerState { level, bucket };
        let next = TunerState { level, bucket: bucket + 1 };
        qlearn_update(q, s, TunerAction::Wait, 0.0, Some(next), cfg.eta, cfg.gamma);
    }
}

/// Trains against `episode(α_CF, α_NF) -> μ`.
///
/// The first `2 · BUCKETS.len()` episodes are exploring starts that try every
/// bucket once on each chain; ε-greedy walks follow. Stops early when the
/// wall-clock budget runs out.
pub fn tune(cfg: &TunerConfig, mut episode: impl FnMut(u32, u32) -> f64) -> TuneResult {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut q = QTable::new(cfg.init_q);
    let mut history = Vec::new();
    let mut memo: HashMap<(u32, u32), f64> = HashMap::new();
    let mut scale: Option<f64> = None;
    let mut eps = cfg.epsilon;
    let mut budget_exceeded = false;
    for ep in 0..cfg.episodes {
        if started.elapsed() >= cfg.budget {
            budget_exceeded = true;
            break;
        }
        let n = BUCKETS.len();
        // Exploring starts sweep the CF chain and then the NF chain, each
        // bucket once, with the other chain on its greedy choice. Afterwards
        // the chains take turns exploring so one chain's noise does not
        // swamp the other's reward.
        let (fc, fn_, eps_cf, eps_nf) = if ep < n {
            (Some(ep), None, 0.0, 0.0)
        } else if ep < 2 * n {
            (None, Some(ep - n), 0.0, 0.0)
        } else if ep % 2 == 0 {
            (None, None, eps, 0.0)
        } else {
            (None, None, 0.0, eps)
        };
        let bc = walk(&q, RobustnessLevel::CF, eps_cf, fc, &mut rng);
        let bn = walk(&q, RobustnessLevel::NF, eps_nf, fn_, &mut rng);
        let (a_cf, a_nf) = (BUCKETS[bc], BUCKETS[bn]);
        let mu = match memo.get(&(a_cf, a_nf)) {
            Some(&m) if cfg.memoize => m,
            _ => {
                let m = episode(a_cf, a_nf);
                memo.insert((a_cf, a_nf), m);
                m
            }
        };
        let s = *scale.get_or_insert(if mu > 0.0 { mu } else { 1.0 });
        let reward = mu / s;
        learn(&mut q, RobustnessLevel::CF, bc, reward, cfg);
        learn(&mut q, RobustnessLevel::NF, bn, reward, cfg);
        history.push(Episode {
            alpha_cf: a_cf,
            alpha_nf: a_nf,
            mu,
        });
        if ep >= 2 * n {
            eps *= cfg.epsilon_decay;
        }
    }
    let elapsed = started.elapsed();
    TuneResult {
        alpha_cf: extract_alpha(&q, RobustnessLevel::CF),
        alpha_nf: extract_alpha(&q, RobustnessLevel::NF),
        q,
        history,
        budget_exceeded: budget_exceeded || elapsed > cfg.budget,
        elapsed,
    }
}
