//! Block placement: greedy choice of the narrowest bottleneck for joining
//! servers, threshold-gated rebalancing with cascade simulation, and an
//! exhaustive optimum for small swarms.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directory::ServerInfo;
use crate::parallel::par_map;
use crate::types::{BlockRange, ServerId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalanceError {
    #[error("cannot place {k} blocks in a model of {n_blocks}")]
    SpanTooLarge { k: usize, n_blocks: usize },
    #[error("span length must be at least 1")]
    EmptySpan,
    #[error("instance with {servers} servers and {n_blocks} blocks is too large for exhaustive search")]
    TooLarge { servers: usize, n_blocks: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RebalanceConfig {
    /// Minimum relative gain, in percent, needed to commit a move.
    pub threshold_pct: f64,
    pub check_period_s: f64,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        Self {
            threshold_pct: 20.0,
            check_period_s: 60.0,
        }
    }
}

/// Overall server throughput: the slower of network and compute.
pub fn measure_throughput(net_tokens_per_s: f64, compute_tokens_per_s: f64) -> f64 {
    net_tokens_per_s.min(compute_tokens_per_s)
}

fn sorted_window(load: &[f64], start: usize, k: usize) -> Vec<f64> {
    let mut w = load[start..start + k].to_vec();
    w.sort_by(f64::total_cmp);
    w
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Start of the `k`-block window whose sorted loads are lexicographically
/// smallest; the leftmost one on ties.
pub fn choose_start(n_blocks: usize, k: usize, load: &[f64]) -> Result<usize, BalanceError> {
    if k == 0 {
        return Err(BalanceError::EmptySpan);
    }
    if k > n_blocks || load.len() < n_blocks {
        return Err(BalanceError::SpanTooLarge { k, n_blocks });
    }
    let mut best = 0;
    let mut best_w = sorted_window(load, 0, k);
    for start in 1..=n_blocks - k {
        let w = sorted_window(load, start, k);
        if lex_cmp(&w, &best_w) == Ordering::Less {
            best = start;
            best_w = w;
        }
    }
    Ok(best)
}

/// A server's current placement as seen by the balancer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub id: ServerId,
    pub blocks: BlockRange,
    pub throughput: f64,
}

impl From<&ServerInfo> for Placement {
    fn from(info: &ServerInfo) -> Self {
        Self {
            id: info.server_id,
            blocks: info.blocks,
            throughput: info.throughput,
        }
    }
}

pub fn load_of(placements: &[Placement], n_blocks: usize, skip: Option<ServerId>) -> Vec<f64> {
    let mut load = vec![0.0; n_blocks];
    for p in placements.iter().filter(|p| Some(p.id) != skip) {
        for t in &mut load[p.blocks.start..p.blocks.end] {
            *t += p.throughput;
        }
    }
    load
}

/// Bottleneck throughput: the least-served block's total, 0 if any block is
/// uncovered.
pub fn swarm_throughput(placements: &[Placement], n_blocks: usize) -> f64 {
    load_of(placements, n_blocks, None)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
        .min(if n_blocks == 0 { 0.0 } else { f64::INFINITY })
}

/// Whether moving a server from `current` to `candidate` is strictly better
/// under the window ordering, given the load of everyone else.
fn window_better(load_without: &[f64], candidate: usize, current: usize, k: usize) -> bool {
    candidate != current
        && lex_cmp(
            &sorted_window(load_without, candidate, k),
            &sorted_window(load_without, current, k),
        ) == Ordering::Less
}

/// Lets every server except `fixed` greedily re-place itself, in ascending id
/// order, until a sweep makes no move or `2 * n` moves have been applied.
/// Returns the number of moves.
pub fn simulate_cascade(placements: &mut [Placement], n_blocks: usize, fixed: Option<ServerId>) -> usize {
    placements.sort_by_key(|p| p.id);
    let budget = 2 * placements.len();
    let mut moves = 0;
    loop {
        let mut moved = false;
        for i in 0..placements.len() {
            let p = placements[i];
            if Some(p.id) == fixed {
                continue;
            }
            let k = p.blocks.len();
            let load = load_of(placements, n_blocks, Some(p.id));
            let start = choose_start(n_blocks, k, &load).expect("placement fits the model");
            if window_better(&load, start, p.blocks.start, k) {
                placements[i].blocks = BlockRange::new(start, start + k);
                moves += 1;
                moved = true;
                if moves >= budget {
                    return moves;
                }
            }
        }
        if !moved {
            return moves;
        }
    }
}

/// The move `self_id` should make, if any: a strictly better window whose
/// simulated cascade raises swarm throughput by at least the threshold.
pub fn propose_rebalance(
    self_id: ServerId,
    placements: &[Placement],
    n_blocks: usize,
    config: &RebalanceConfig,
) -> Option<BlockRange> {
    let me = placements.iter().find(|p| p.id == self_id)?;
    let k = me.blocks.len();
    let load = load_of(placements, n_blocks, Some(self_id));
    let candidate = choose_start(n_blocks, k, &load).ok()?;
    if !window_better(&load, candidate, me.blocks.start, k) {
        return None;
    }
    let current = swarm_throughput(placements, n_blocks);
    let mut hypothetical = placements.to_vec();
    let new_blocks = BlockRange::new(candidate, candidate + k);
    for p in hypothetical.iter_mut().filter(|p| p.id == self_id) {
        p.blocks = new_blocks;
    }
    simulate_cascade(&mut hypothetical, n_blocks, Some(self_id));
    let eventual = swarm_throughput(&hypothetical, n_blocks);
    let required = current * (1.0 + config.threshold_pct / 100.0);
    (eventual > current && eventual >= required).then_some(new_blocks)
}

/// A server to be placed: how many blocks it can hold and how fast it is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerSpec {
    pub capacity: usize,
    pub throughput: f64,
}

/// Servers join one by one in the given order, each taking [`choose_start`]
/// on the load left by its predecessors.
pub fn greedy_join(servers: &[ServerSpec], n_blocks: usize) -> Vec<BlockRange> {
    let mut load = vec![0.0; n_blocks];
    servers
        .iter()
        .map(|s| {
            let k = s.capacity.min(n_blocks);
            let start = choose_start(n_blocks, k, &load).expect("k within model");
            for t in &mut load[start..start + k] {
                *t += s.throughput;
            }
            BlockRange::new(start, start + k)
        })
        .collect()
}

pub fn throughput_of(servers: &[ServerSpec], ranges: &[BlockRange], n_blocks: usize) -> f64 {
    let placements: Vec<Placement> = servers
        .iter()
        .zip(ranges)
        .enumerate()
        .map(|(i, (s, r))| Placement {
            id: ServerId(i as u32),
            blocks: *r,
            throughput: s.throughput,
        })
        .collect();
    swarm_throughput(&placements, n_blocks)
}

/// Whether some contiguous placement covers every block.
pub fn cover_exists(servers: &[ServerSpec], n_blocks: usize) -> bool {
    servers.iter().map(|s| s.capacity.min(n_blocks)).sum::<usize>() >= n_blocks
        && servers.iter().all(|s| s.throughput > 0.0 || s.capacity == 0)
}

pub const BRUTE_FORCE_MAX_SERVERS: usize = 10;
pub const BRUTE_FORCE_MAX_BLOCKS: usize = 14;
/// [`upper_bound_estimate`] is exact up to this many servers, at any depth.
pub const UPPER_BOUND_EXACT_SERVERS: usize = 8;

/// Largest bottleneck any completion of a partial placement could reach.
fn completion_bound(load: &[f64], rest: &[(usize, ServerSpec)]) -> f64 {
    let extra: f64 = rest.iter().map(|(_, s)| s.throughput).sum();
    let mass: f64 = rest.iter().map(|(_, s)| s.throughput * s.capacity as f64).sum();
    let mut sorted = load.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cap = sorted[0] + extra;
    // water-filling: highest level W with sum(max(0, W - l_i)) <= mass
    let mut used = 0.0;
    let mut level = sorted[0];
    for i in 0..sorted.len() {
        let next = if i + 1 < sorted.len() { sorted[i + 1] } else { f64::INFINITY };
        let width = (i + 1) as f64;
        let need = (next - level) * width;
        if used + need >= mass {
            level += (mass - used) / width;
            break;
        }
        used += need;
        level = next;
    }
    level.min(cap)
}

/// Exact maximum swarm throughput over all contiguous placements.
pub fn optimal_assignment_bruteforce(
    servers: &[ServerSpec],
    n_blocks: usize,
) -> Result<(Vec<BlockRange>, f64), BalanceError> {
    if servers.len() > BRUTE_FORCE_MAX_SERVERS || n_blocks > BRUTE_FORCE_MAX_BLOCKS {
        return Err(BalanceError::TooLarge {
            servers: servers.len(),
            n_blocks,
        });
    }
    Ok(exact_optimum(servers, n_blocks))
}

/// Exact optimum without the size guard.
///
/// Starting from the greedy value `T`, repeatedly searches for a placement
/// whose every block carries more than `T`. In that search the leftmost block
/// still at or below `T` must be covered by some remaining server, and since
/// everything to its left is already satisfied, the rightmost start covering
/// it dominates all others. So only the choice of server branches.
fn exact_optimum(servers: &[ServerSpec], n_blocks: usize) -> (Vec<BlockRange>, f64) {
    if n_blocks == 0 || servers.is_empty() {
        return (vec![BlockRange::new(0, 0); servers.len()], 0.0);
    }
    let specs: Vec<ServerSpec> = servers
        .iter()
        .map(|s| ServerSpec {
            capacity: s.capacity.min(n_blocks),
            throughput: s.throughput,
        })
        .collect();
    let mut best = greedy_join(servers, n_blocks);
    let mut best_value = throughput_of(servers, &best, n_blocks);
    if !cover_exists(servers, n_blocks) {
        return (best, best_value);
    }
    // fastest first so the search reaches covers quickly
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.sort_by(|&a, &b| {
        specs[b]
            .throughput
            .total_cmp(&specs[a].throughput)
            .then(specs[b].capacity.cmp(&specs[a].capacity))
            .then(a.cmp(&b))
    });
    let mut search = Above {
        specs: &specs,
        order: &order,
        n_blocks,
        used: vec![false; specs.len()],
        starts: vec![None; specs.len()],
    };
    while let Some(starts) = search.find(best_value) {
        let ranges = complete_placement(&specs, &starts, n_blocks);
        let value = throughput_of(servers, &ranges, n_blocks);
        if value <= best_value {
            break;
        }
        best = ranges;
        best_value = value;
    }
    (best, best_value)
}

/// Search for a placement with every block above a threshold.
struct Above<'a> {
    specs: &'a [ServerSpec],
    order: &'a [usize],
    n_blocks: usize,
    used: Vec<bool>,
    starts: Vec<Option<usize>>,
}

impl Above<'_> {
    fn find(&mut self, threshold: f64) -> Option<Vec<Option<usize>>> {
        self.used.iter_mut().for_each(|u| *u = false);
        self.starts.iter_mut().for_each(|s| *s = None);
        let mut load = vec![0.0; self.n_blocks];
        // sums taken in another order may differ in the last bits
        let threshold = threshold + threshold.abs() * 1e-12;
        self.dfs(&mut load, threshold)
    }

    fn dfs(&mut self, load: &mut [f64], threshold: f64) -> Option<Vec<Option<usize>>> {
        let Some(b) = load.iter().position(|&v| v <= threshold) else {
            return Some(self.starts.clone());
        };
        let rest: Vec<(usize, ServerSpec)> = self
            .order
            .iter()
            .filter(|&&i| !self.used[i] && self.specs[i].throughput > 0.0)
            .map(|&i| (i, self.specs[i]))
            .collect();
        if rest.is_empty() || completion_bound(load, &rest) <= threshold {
            return None;
        }
        for (pos, &(i, spec)) in rest.iter().enumerate() {
            // identical unused servers are interchangeable
            if rest[..pos].iter().any(|(_, s)| *s == spec) {
                continue;
            }
            let k = spec.capacity;
            let start = b.min(self.n_blocks - k);
            // restored from a copy: subtracting back would drift
            let saved = load[start..start + k].to_vec();
            for t in &mut load[start..start + k] {
                *t += spec.throughput;
            }
            self.used[i] = true;
            self.starts[i] = Some(start);
            let found = self.dfs(load, threshold);
            self.used[i] = false;
            self.starts[i] = None;
            load[start..start + k].copy_from_slice(&saved);
            if found.is_some() {
                return found;
            }
        }
        None
    }
}

/// Fills in servers a search left unplaced; they cannot lower the minimum.
fn complete_placement(specs: &[ServerSpec], starts: &[Option<usize>], n_blocks: usize) -> Vec<BlockRange> {
    let mut load = vec![0.0; n_blocks];
    for (spec, st) in specs.iter().zip(starts) {
        if let Some(st) = st {
            for t in &mut load[*st..*st + spec.capacity] {
                *t += spec.throughput;
            }
        }
    }
    specs
        .iter()
        .zip(starts)
        .map(|(spec, st)| {
            let k = spec.capacity;
            let st = st.unwrap_or_else(|| {
                let st = choose_start(n_blocks, k, &load).expect("capacity clamped to the model");
                for t in &mut load[st..st + k] {
                    *t += spec.throughput;
                }
                st
            });
            BlockRange::new(st, st + k)
        })
        .collect()
}

/// Best swarm throughput found by `orders` seeded random join orders (plus the
/// given order) under greedy placement. Exact for up to
/// [`UPPER_BOUND_EXACT_SERVERS`] servers.
pub fn upper_bound_estimate(servers: &[ServerSpec], n_blocks: usize, seed: u64, orders: usize) -> f64 {
    if servers.len() <= UPPER_BOUND_EXACT_SERVERS {
        return exact_optimum(servers, n_blocks).1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..servers.len()).collect();
    let mut orders_list = Vec::with_capacity(orders);
    for _ in 0..orders {
        idx.shuffle(&mut rng);
        orders_list.push(idx.clone());
    }
    let values = par_map(&orders_list, |order| {
        let shuffled: Vec<ServerSpec> = order.iter().map(|&i| servers[i]).collect();
        throughput_of(&shuffled, &greedy_join(&shuffled, n_blocks), n_blocks)
    });
    let base = throughput_of(servers, &greedy_join(servers, n_blocks), n_blocks);
    values.into_iter().fold(base, f64::max)
}
