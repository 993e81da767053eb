//! Benchmark harness: the failure-rate grid over strategies, the
//! load-balancing study under a daily availability cycle, and the offloading
//! bound. Every random draw derives from the spec's seed, so the same spec
//! writes byte-identical files; wall-clock time goes to a separate file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancer::{
    choose_start, cover_exists, propose_rebalance, swarm_throughput, upper_bound_estimate, Placement, RebalanceConfig,
    ServerSpec, UPPER_BOUND_EXACT_SERVERS,
};
use crate::client::{ClientConfig, ClientError, InferenceSession, Strategy};
use crate::model::{DecodeMode, Model, ModelConfig, ModelError, SplitMix64};
use crate::netsim::{MessageKind, NetError, NetProfile, SimNetwork, TraceEvent};
use crate::parallel::map_maybe_parallel;
use crate::server::{ComputeMode, ComputeModel, ServerConfig, ServerError};
use crate::swarm::{replicated_spans, SimSwarm};
use crate::transport::Transport;
use crate::types::{BlockRange, Endpoint, ServerId};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    FailureRate,
    LoadBalance,
    OffloadEstimate,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::FailureRate => "failure_rate",
            Experiment::LoadBalance => "load_balance",
            Experiment::OffloadEstimate => "offload_estimate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub seed: u64,
    /// Output directory.
    pub out: PathBuf,
    /// Load-balance study at 206 servers and 70 blocks instead of the desk preset.
    pub full_scale: bool,
    /// Run independent trials on the rayon pool.
    pub parallel_trials: bool,
    pub failure_rate: FailureRateConfig,
    pub load_balance: LoadBalanceConfig,
    pub offload: OffloadConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            experiment: Experiment::FailureRate,
            seed: 0,
            out: PathBuf::from("bench-out"),
            full_scale: false,
            parallel_trials: false,
            failure_rate: FailureRateConfig::default(),
            load_balance: LoadBalanceConfig::default(),
            offload: OffloadConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn new(experiment: Experiment, seed: u64, out: impl Into<PathBuf>) -> Self {
        Self {
            experiment,
            seed,
            out: out.into(),
            ..Default::default()
        }
    }

    /// The load-balance config actually used, after the scale preset.
    pub fn effective_load_balance(&self) -> LoadBalanceConfig {
        if self.full_scale {
            LoadBalanceConfig::full_scale()
        } else {
            self.load_balance.clone()
        }
    }
}

/// Derives an independent seed from `seed` and a list of indices.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut g = SplitMix64::new(seed);
    let mut h = g.next_u64();
    for &p in parts {
        g = SplitMix64::new(h ^ p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        h = g.next_u64();
    }
    h
}

/// One row of the summary CSV; the JSON-lines file carries the extra fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub seed: u64,
    pub p: f64,
    pub length: usize,
    pub strategy: String,
    pub steps_per_s: f64,
    pub bytes_total: u64,
    pub recoveries: u64,
    pub completed: bool,
    pub sim_time_s: f64,
    pub restarts: u64,
    pub failed_calls: u64,
    /// Whether the event trace reproduces steps/s and byte totals; `None`
    /// when the trace hit its cap.
    pub audit: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub const CSV_COLUMNS: [&str; 9] = [
    "experiment",
    "seed",
    "p",
    "length",
    "strategy",
    "steps_per_s",
    "bytes_total",
    "recoveries",
    "completed",
];

// ---------------------------------------------------------------------------
// failure-rate grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureRateConfig {
    pub rates: Vec<f64>,
    pub lengths: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub trials: usize,
    pub stages: usize,
    pub replicas: usize,
    pub blocks_per_stage: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub prefix_len: usize,
    /// `failure_prob` is replaced by each grid rate.
    pub network: NetProfile,
    pub compute: ComputeModel,
    pub compute_mode: ComputeMode,
    /// Client settings; `time_budget_s` is replaced by `budget_s`.
    pub client: ClientConfig,
    /// Simulated seconds after which a run counts as not completed.
    pub budget_s: f64,
    /// Trace events kept per run for the audit.
    pub trace_cap: usize,
}

impl Default for FailureRateConfig {
    fn default() -> Self {
        Self {
            rates: vec![0.0, 1e-4, 1e-3, 1e-2, 5e-2],
            lengths: vec![128, 1024, 2048],
            strategies: vec![Strategy::Restart, Strategy::Cacheless, Strategy::DualCache],
            trials: 1,
            stages: 4,
            replicas: 2,
            blocks_per_stage: 2,
            hidden_dim: 64,
            n_heads: 4,
            vocab_size: 256,
            prefix_len: 1,
            network: NetProfile {
                bandwidth_bps: 1e10,
                rtt_ms: 1.0,
                failure_prob: 0.0,
            },
            compute: ComputeModel::default(),
            compute_mode: ComputeMode::TimingOnly,
            // a lost message says little about the server, so bans stay short
            client: ClientConfig {
                ban_cooldown_s: 0.1,
                ..Default::default()
            },
            budget_s: 1e6,
            trace_cap: 2_000_000,
        }
    }
}

impl FailureRateConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("failure rates must lie in [0, 1]");
        }
        if self.lengths.contains(&0) || self.prefix_len == 0 {
            return bad("lengths and prefix_len must be positive");
        }
        if self.stages == 0 || self.replicas == 0 || self.blocks_per_stage == 0 || self.trials == 0 {
            return bad("stages, replicas, blocks_per_stage and trials must be positive");
        }
        if !(self.budget_s > 0.0) {
            return bad("budget_s must be positive");
        }
        self.network.validate()?;
        Ok(())
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            n_blocks: self.stages * self.blocks_per_stage,
            hidden_dim: self.hidden_dim,
            n_heads: self.n_heads,
            vocab_size: self.vocab_size,
            max_seq_len: self.prefix_len + self.lengths.iter().copied().max().unwrap_or(1),
            seed,
        }
    }

    /// Every grid cell, in output order.
    pub fn cells(&self, seed: u64) -> Vec<Cell> {
        let mut cells = Vec::new();
        for trial in 0..self.trials {
            for (li, &length) in self.lengths.iter().enumerate() {
                for (pi, &p) in self.rates.iter().enumerate() {
                    for &strategy in &self.strategies {
                        cells.push(Cell {
                            p,
                            length,
                            strategy,
                            trial,
                            // shared across strategies: same network draws for a fair comparison
                            seed: derive_seed(seed, &[pi as u64, li as u64, trial as u64]),
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub p: f64,
    pub length: usize,
    pub strategy: Strategy,
    pub trial: usize,
    pub seed: u64,
}

/// What the event trace says about a run's client traffic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSummary {
    pub first_send: f64,
    pub last_done: f64,
    /// Bytes of client requests and replies, probes excluded.
    pub client_bytes: u64,
}

pub fn summarize_trace(trace: &[TraceEvent], client: Endpoint) -> Option<TraceSummary> {
    let mine = trace.iter().filter(|e| e.from == client || e.to == client);
    let mut s: Option<TraceSummary> = None;
    for e in mine {
        let acc = s.get_or_insert(TraceSummary {
            first_send: e.time,
            last_done: e.done,
            client_bytes: 0,
        });
        acc.first_send = acc.first_send.min(e.time);
        acc.last_done = acc.last_done.max(e.done);
        if !matches!(e.kind, MessageKind::Ping | MessageKind::Pong) {
            acc.client_bytes += e.bytes as u64;
        }
    }
    s
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// A finished cell with its wall-clock cost.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub record: RunRecord,
    pub wall_s: f64,
}

fn prefix_tokens(cfg: &FailureRateConfig, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.prefix_len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect()
}

/// Runs one cell: a fresh swarm, one generation, and the trace audit.
pub fn run_cell(cfg: &FailureRateConfig, model: &Model, spec_seed: u64, cell: &Cell) -> Result<CellResult, BenchError> {
    let wall = Instant::now();
    let profile = NetProfile {
        failure_prob: cell.p,
        ..cfg.network
    };
    let net = SimNetwork::new(profile, cell.seed)?.with_trace_cap(cfg.trace_cap);
    let base = ServerConfig {
        model: model.config.clone(),
        compute: cfg.compute,
        compute_mode: cfg.compute_mode,
        ..Default::default()
    };
    let spans = replicated_spans(model.config.n_blocks, cfg.stages, cfg.replicas);
    let mut swarm = SimSwarm::uniform(net, model.blocks.clone(), &spans, &base)?;
    let client = ClientConfig {
        time_budget_s: Some(cfg.budget_s),
        ..cfg.client.clone()
    };
    let mut session = InferenceSession::new(model.config.clone(), model.client.clone(), cell.strategy, client.clone());
    let prefix = prefix_tokens(cfg, cell.seed);
    let t0 = swarm.now();
    let outcome = session.generate(&mut swarm, &prefix, cell.length, DecodeMode::Greedy);
    let elapsed = swarm.now() - t0;
    let (completed, note) = match outcome {
        Ok(_) if elapsed <= cfg.budget_s => (true, None),
        Ok(_) => (false, Some("finished after the budget".to_string())),
        Err(ClientError::BudgetExceeded { .. }) => (false, Some("budget exhausted".to_string())),
        Err(e @ ClientError::SwarmUnavailable { .. }) => (false, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let c = session.counters();
    let steps_per_s = if completed { cell.length as f64 / elapsed } else { 0.0 };
    let audit = match swarm.net().trace() {
        Some(trace) if !swarm.net().trace_truncated() => {
            let s = summarize_trace(trace, Endpoint::Client(client.client_id));
            Some(s.is_some_and(|s| {
                let rate_ok = !completed || same(cell.length as f64 / (s.last_done - s.first_send), steps_per_s);
                rate_ok && s.client_bytes == c.bytes_total()
            }))
        }
        _ => None,
    };
    let record = RunRecord {
        experiment: Experiment::FailureRate.name().into(),
        seed: spec_seed,
        p: cell.p,
        length: cell.length,
        strategy: cell.strategy.name().into(),
        steps_per_s,
        bytes_total: c.bytes_total(),
        recoveries: c.recoveries,
        completed,
        sim_time_s: elapsed,
        restarts: c.restarts,
        failed_calls: c.failed_calls,
        audit,
        note,
    };
    log::info!(
        "{} p={} len={} trial={}: {:.3} steps/s, completed={}",
        record.strategy,
        cell.p,
        cell.length,
        cell.trial,
        steps_per_s,
        completed
    );
    Ok(CellResult {
        record,
        wall_s: wall.elapsed().as_secs_f64(),
    })
}

/// Runs `cells` against one shared model.
pub fn run_cells(cfg: &FailureRateConfig, seed: u64, cells: &[Cell], parallel: bool) -> Result<Vec<CellResult>, BenchError> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config(seed))?;
    map_maybe_parallel(parallel, cells, |c| run_cell(cfg, &model, seed, c))
        .into_iter()
        .collect()
}

pub fn run_failure_rate(spec: &ExperimentSpec) -> Result<Vec<CellResult>, BenchError> {
    let cfg = &spec.failure_rate;
    run_cells(cfg, spec.seed, &cfg.cells(spec.seed), spec.parallel_trials)
}

// ---------------------------------------------------------------------------
// load-balance study

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadBalanceConfig {
    pub servers: usize,
    pub n_blocks: usize,
    pub minutes: usize,
    /// Length of one availability cycle.
    pub period_minutes: usize,
    /// Range each peak's active count is drawn from.
    pub peak_active: [f64; 2],
    pub trough_active: [f64; 2],
    pub max_throughput: f64,
    pub capacity: [usize; 2],
    /// Rebalancing thresholds in percent, one full-balancing run each.
    pub thresholds_pct: Vec<f64>,
    /// Greedy join orders tried by the upper-bound estimate.
    pub upper_bound_orders: usize,
}

/// Fleet size the paper's peak and trough counts refer to.
pub const REFERENCE_FLEET: usize = 206;

impl Default for LoadBalanceConfig {
    fn default() -> Self {
        Self::scaled(52, 18)
    }
}

impl LoadBalanceConfig {
    /// The 206-server, 70-block setup.
    pub fn full_scale() -> Self {
        Self::scaled(REFERENCE_FLEET, 70)
    }

    /// Peak and trough counts scaled down from 100-110 and 15-25 of 206.
    pub fn scaled(servers: usize, n_blocks: usize) -> Self {
        let f = servers as f64 / REFERENCE_FLEET as f64;
        Self {
            servers,
            n_blocks,
            minutes: 360,
            period_minutes: 120,
            peak_active: [100.0 * f, 110.0 * f],
            trough_active: [15.0 * f, 25.0 * f],
            max_throughput: 100.0,
            capacity: [1, 10],
            thresholds_pct: vec![1.0, 20.0],
            upper_bound_orders: 50,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.servers == 0 || self.n_blocks == 0 || self.minutes == 0 || self.period_minutes < 2 {
            return bad("servers, n_blocks, minutes must be positive and period_minutes at least 2");
        }
        if self.capacity[0] == 0 || self.capacity[0] > self.capacity[1] {
            return bad("capacity must be a range [lo, hi] with 1 <= lo <= hi");
        }
        let ordered = |r: [f64; 2]| 0.0 <= r[0] && r[0] <= r[1] && r[1] <= self.servers as f64;
        if !ordered(self.peak_active) || !ordered(self.trough_active) {
            return bad("active ranges must be ordered and within the fleet size");
        }
        if !(self.max_throughput > 0.0) || self.thresholds_pct.iter().any(|t| !(*t >= 0.0)) {
            return bad("max_throughput must be positive and thresholds non-negative");
        }
        Ok(())
    }
}

/// Server specs and the active set at every minute.
#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilitySchedule {
    pub specs: Vec<ServerSpec>,
    pub active: Vec<Vec<usize>>,
}

impl AvailabilitySchedule {
    pub fn generate(cfg: &LoadBalanceConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
        let specs: Vec<ServerSpec> = (0..cfg.servers)
            .map(|_| ServerSpec {
                throughput: rng.gen_range(0.0..cfg.max_throughput),
                capacity: rng.gen_range(cfg.capacity[0]..=cfg.capacity[1]).min(cfg.n_blocks),
            })
            .collect();
        // alternating troughs and peaks every half period, smoothed by a cosine
        let half = cfg.period_minutes as f64 / 2.0;
        let n_ext = (cfg.minutes as f64 / half).ceil() as usize + 2;
        let extremes: Vec<f64> = (0..n_ext)
            .map(|k| {
                let r = if k % 2 == 0 { cfg.trough_active } else { cfg.peak_active };
                rng.gen_range(r[0]..=r[1])
            })
            .collect();
        let mut on = vec![false; cfg.servers];
        let mut active = Vec::with_capacity(cfg.minutes);
        for m in 0..cfg.minutes {
            let x = m as f64 / half;
            let k = x.floor() as usize;
            let frac = x - k as f64;
            let w = (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0;
            let target = (extremes[k] + (extremes[k + 1] - extremes[k]) * w).round() as usize;
            let target = target.min(cfg.servers);
            let mut up: Vec<usize> = (0..cfg.servers).filter(|&i| on[i]).collect();
            let mut down: Vec<usize> = (0..cfg.servers).filter(|&i| !on[i]).collect();
            if up.len() < target {
                down.shuffle(&mut rng);
                for &i in &down[..target - up.len()] {
                    on[i] = true;
                }
            } else if up.len() > target {
                up.shuffle(&mut rng);
                for &i in &up[..up.len() - target] {
                    on[i] = false;
                }
            }
            active.push((0..cfg.servers).filter(|&i| on[i]).collect());
        }
        Self { specs, active }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BalancingStrategy {
    /// Each joining server takes a random contiguous interval.
    NoBalancing,
    /// Joining servers pick the narrowest bottleneck and never move.
    NewServersOnly,
    /// New servers pick greedily and everyone checks for a move every minute.
    Full { threshold_pct: f64 },
}

impl BalancingStrategy {
    pub fn label(&self) -> String {
        match self {
            BalancingStrategy::NoBalancing => "no_balancing".into(),
            BalancingStrategy::NewServersOnly => "new_servers_only".into(),
            BalancingStrategy::Full { threshold_pct } => format!("full_balancing_p{threshold_pct}"),
        }
    }
}

/// One strategy's state at the end of one simulated minute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSample {
    pub strategy: String,
    pub minute: usize,
    pub active: usize,
    pub swarm_throughput: f64,
    pub replacements: u64,
    pub upper_bound_estimate: f64,
    /// Whether the upper bound is the exact optimum rather than an estimate.
    pub upper_bound_exact: bool,
    pub cover_exists: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    /// Rebalancing threshold in percent, for full balancing.
    pub threshold_pct: Option<f64>,
    pub mean_throughput: f64,
    pub zero_fraction: f64,
    pub replacements: u64,
    /// Minutes where a cover existed but throughput was zero.
    pub uncovered_feasible_minutes: usize,
    /// Share of minutes within 25% of the upper-bound estimate.
    pub within_25pct_of_upper_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadBalanceReport {
    pub config: LoadBalanceConfig,
    pub timeline: Vec<TimelineSample>,
    pub summaries: Vec<StrategySummary>,
}

impl LoadBalanceReport {
    pub fn summary(&self, label: &str) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.strategy == label)
    }
}

struct MinuteBound {
    value: f64,
    exact: bool,
    cover: bool,
}

fn simulate_strategy(
    cfg: &LoadBalanceConfig,
    sched: &AvailabilitySchedule,
    bounds: &[MinuteBound],
    strategy: BalancingStrategy,
    seed: u64,
) -> Vec<TimelineSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = cfg.n_blocks;
    let mut placed: BTreeMap<usize, BlockRange> = BTreeMap::new();
    let mut out = Vec::with_capacity(cfg.minutes);
    let placements = |placed: &BTreeMap<usize, BlockRange>| -> Vec<Placement> {
        placed
            .iter()
            .map(|(&i, &r)| Placement {
                id: ServerId(i as u32),
                blocks: r,
                throughput: sched.specs[i].throughput,
            })
            .collect()
    };
    for (minute, now) in sched.active.iter().enumerate() {
        placed.retain(|i, _| now.binary_search(i).is_ok());
        for &i in now {
            if placed.contains_key(&i) {
                continue;
            }
            let k = sched.specs[i].capacity;
            let start = match strategy {
                BalancingStrategy::NoBalancing => rng.gen_range(0..=l - k),
                _ => {
                    let load = crate::balancer::load_of(&placements(&placed), l, None);
                    choose_start(l, k, &load).expect("capacity is clamped to the model")
                }
            };
            placed.insert(i, BlockRange::new(start, start + k));
        }
        let mut replacements = 0;
        if let BalancingStrategy::Full { threshold_pct } = strategy {
            let rc = RebalanceConfig {
                threshold_pct,
                ..Default::default()
            };
            for &i in now {
                let ps = placements(&placed);
                if let Some(r) = propose_rebalance(ServerId(i as u32), &ps, l, &rc) {
                    placed.insert(i, r);
                    replacements += 1;
                }
            }
        }
        let b = &bounds[minute];
        out.push(TimelineSample {
            strategy: strategy.label(),
            minute,
            active: now.len(),
            swarm_throughput: swarm_throughput(&placements(&placed), l),
            replacements,
            upper_bound_estimate: b.value,
            upper_bound_exact: b.exact,
            cover_exists: b.cover,
        });
    }
    out
}

fn summarize(strategy: BalancingStrategy, samples: &[TimelineSample]) -> StrategySummary {
    let n = samples.len().max(1) as f64;
    StrategySummary {
        strategy: strategy.label(),
        threshold_pct: match strategy {
            BalancingStrategy::Full { threshold_pct } => Some(threshold_pct),
            _ => None,
        },
        mean_throughput: samples.iter().map(|s| s.swarm_throughput).sum::<f64>() / n,
        zero_fraction: samples.iter().filter(|s| s.swarm_throughput <= 0.0).count() as f64 / n,
        replacements: samples.iter().map(|s| s.replacements).sum(),
        uncovered_feasible_minutes: samples.iter().filter(|s| s.cover_exists && s.swarm_throughput <= 0.0).count(),
        within_25pct_of_upper_bound: samples
            .iter()
            .filter(|s| s.swarm_throughput >= 0.75 * s.upper_bound_estimate)
            .count() as f64
            / n,
    }
}

pub fn run_load_balance_with(cfg: &LoadBalanceConfig, seed: u64, parallel: bool) -> Result<LoadBalanceReport, BenchError> {
    cfg.validate()?;
    let sched = AvailabilitySchedule::generate(cfg, seed);
    let minutes: Vec<usize> = (0..cfg.minutes).collect();
    let bounds = map_maybe_parallel(parallel, &minutes, |&m| {
        let specs: Vec<ServerSpec> = sched.active[m].iter().map(|&i| sched.specs[i]).collect();
        MinuteBound {
            value: upper_bound_estimate(&specs, cfg.n_blocks, derive_seed(seed, &[2, m as u64]), cfg.upper_bound_orders),
            exact: specs.len() <= UPPER_BOUND_EXACT_SERVERS,
            cover: cover_exists(&specs, cfg.n_blocks),
        }
    });
    let mut strategies = vec![BalancingStrategy::NoBalancing, BalancingStrategy::NewServersOnly];
    strategies.extend(cfg.thresholds_pct.iter().map(|&t| BalancingStrategy::Full { threshold_pct: t }));
    let runs = map_maybe_parallel(parallel, &strategies, |&s| {
        simulate_strategy(cfg, &sched, &bounds, s, derive_seed(seed, &[3]))
    });
    let summaries = strategies
        .iter()
        .zip(&runs)
        .map(|(&s, samples)| summarize(s, samples))
        .collect();
    Ok(LoadBalanceReport {
        config: cfg.clone(),
        timeline: runs.into_iter().flatten().collect(),
        summaries,
    })
}

pub fn run_load_balance(spec: &ExperimentSpec) -> Result<LoadBalanceReport, BenchError> {
    run_load_balance_with(&spec.effective_load_balance(), spec.seed, spec.parallel_trials)
}

// ---------------------------------------------------------------------------
// offloading bound

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffloadCase {
    pub params_bytes: f64,
    pub link_bits_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffloadConfig {
    pub cases: Vec<OffloadCase>,
}

impl Default for OffloadConfig {
    fn default() -> Self {
        Self {
            cases: vec![OffloadCase {
                params_bytes: 176e9,
                link_bits_per_s: 256e9,
            }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffloadEstimate {
    pub seconds_per_pass: f64,
    pub tokens_per_s: f64,
}

/// Time to stream all parameters over the link once, and the token rate
/// that caps sequential generation at.
pub fn estimate_offload_bound(params_bytes: f64, link_bits_per_s: f64) -> Result<OffloadEstimate, BenchError> {
    if !(link_bits_per_s > 0.0 && link_bits_per_s.is_finite()) {
        return Err(BenchError::Config(format!("link speed must be positive, got {link_bits_per_s}")));
    }
    if !(params_bytes > 0.0 && params_bytes.is_finite()) {
        return Err(BenchError::Config(format!("parameter size must be positive, got {params_bytes}")));
    }
    let seconds_per_pass = params_bytes * 8.0 / link_bits_per_s;
    Ok(OffloadEstimate {
        seconds_per_pass,
        tokens_per_s: 1.0 / seconds_per_pass,
    })
}

// ---------------------------------------------------------------------------
// output

/// Replaces `path` with `bytes` so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    let io = |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644)).map_err(io)?;
    }
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, BenchError> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn summary_csv(records: &[RunRecord]) -> Result<Vec<u8>, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record([
            r.experiment.clone(),
            r.seed.to_string(),
            r.p.to_string(),
            r.length.to_string(),
            r.strategy.clone(),
            r.steps_per_s.to_string(),
            r.bytes_total.to_string(),
            r.recoveries.to_string(),
            r.completed.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| BenchError::Config(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct WallTime {
    pub experiment: String,
    pub total_s: f64,
    /// Per-cell wall time, failure-rate grid only.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_record_s: Vec<f64>,
}

/// What [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub records: Vec<RunRecord>,
    pub files: Vec<PathBuf>,
    pub load_balance: Option<LoadBalanceReport>,
}

/// Runs the spec's experiment and writes its files into `spec.out`:
/// `<experiment>.jsonl`, `<experiment>_summary.csv`,
/// `<experiment>_walltime.json`, and `load_balance_timeline.jsonl` for the
/// load-balance study.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<BenchOutput, BenchError> {
    let wall = Instant::now();
    let name = spec.experiment.name();
    let mut files = Vec::new();
    let mut lb = None;
    let (records, per_record_s) = match spec.experiment {
        Experiment::FailureRate => {
            let results = run_failure_rate(spec)?;
            let walls = results.iter().map(|r| r.wall_s).collect();
            (results.into_iter().map(|r| r.record).collect::<Vec<_>>(), walls)
        }
        Experiment::LoadBalance => {
            let report = run_load_balance(spec)?;
            let minutes = report.config.minutes;
            let records: Vec<RunRecord> = report
                .summaries
                .iter()
                .map(|s| {
                    RunRecord {
                        experiment: name.into(),
                        seed: spec.seed,
                        p: s.threshold_pct.map_or(0.0, |t| t / 100.0),
                        length: minutes,
                        strategy: s.strategy.clone(),
                        steps_per_s: s.mean_throughput,
                        bytes_total: 0,
                        recoveries: s.replacements,
                        completed: s.uncovered_feasible_minutes == 0,
                        sim_time_s: minutes as f64 * 60.0,
                        restarts: 0,
                        failed_calls: 0,
                        audit: None,
                        note: Some(format!(
                            "zero_fraction={} within_25pct_of_upper_bound={}",
                            s.zero_fraction, s.within_25pct_of_upper_bound
                        )),
                    }
                })
                .collect();
            let path = spec.out.join("load_balance_timeline.jsonl");
            write_atomic(&path, &to_jsonl(&report.timeline)?)?;
            files.push(path);
            let path = spec.out.join("load_balance_summary.json");
            write_atomic(&path, &serde_json::to_vec_pretty(&report.summaries)?)?;
            files.push(path);
            lb = Some(report);
            (records, Vec::new())
        }
        Experiment::OffloadEstimate => {
            let mut records = Vec::new();
            for c in &spec.offload.cases {
                let e = estimate_offload_bound(c.params_bytes, c.link_bits_per_s)?;
                records.push(RunRecord {
                    experiment: name.into(),
                    seed: spec.seed,
                    p: 0.0,
                    length: 1,
                    strategy: "offload".into(),
                    steps_per_s: e.tokens_per_s,
                    bytes_total: c.params_bytes as u64,
                    recoveries: 0,
                    completed: true,
                    sim_time_s: e.seconds_per_pass,
                    restarts: 0,
                    failed_calls: 0,
                    audit: None,
                    note: Some(format!("link_bits_per_s={}", c.link_bits_per_s)),
                });
            }
            (records, Vec::new())
        }
    };
    let path = spec.out.join(format!("{name}.jsonl"));
    write_atomic(&path, &to_jsonl(&records)?)?;
    files.push(path);
    let path = spec.out.join(format!("{name}_summary.csv"));
    write_atomic(&path, &summary_csv(&records)?)?;
    files.push(path);
    let wt = WallTime {
        experiment: name.into(),
        total_s: wall.elapsed().as_secs_f64(),
        per_record_s,
    };
    let path = spec.out.join(format!("{name}_walltime.json"));
    write_atomic(&path, &serde_json::to_vec_pretty(&wt)?)?;
    files.push(path);
    Ok(BenchOutput {
        records,
        files,
        load_balance: lb,
    })
}
