//! Shortest-chain routing over block boundaries.
//!
//! Nodes are boundaries `0..=L`; every non-banned server contributes an edge
//! for each sub-interval it holds. Edges only point forward, so shortest
//! distances are repaired incrementally by re-relaxing nodes in increasing
//! order from the lowest boundary touched by an update.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directory::ServerInfo;
use crate::types::{BlockRange, ServerId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouteError {
    #[error("no server chain covers {needed}; block {block} has no reachable server")]
    NoRoute { needed: BlockRange, block: usize },
    #[error("interval {needed} is outside the model's {n_blocks} blocks")]
    BadInterval { needed: BlockRange, n_blocks: usize },
}

/// Predicted per-step cost of sending one token through `blocks` blocks.
pub fn edge_cost(client_rtt_ms: f64, blocks: usize, throughput: f64) -> f64 {
    client_rtt_ms + blocks as f64 * (1000.0 / throughput)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteServer {
    pub id: ServerId,
    pub blocks: BlockRange,
    pub throughput: f64,
    pub rtt_ms: f64,
}

impl RouteServer {
    pub fn from_info(info: &ServerInfo, rtt_ms: f64) -> Self {
        Self {
            id: info.server_id,
            blocks: info.blocks,
            throughput: info.throughput,
            rtt_ms,
        }
    }

    fn usable(&self) -> bool {
        self.throughput > 0.0 && self.throughput.is_finite() && self.rtt_ms.is_finite() && self.rtt_ms >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RouteUpdate {
    Join(RouteServer),
    Leave(ServerId),
    Ban(ServerId),
    Unban(ServerId),
    Latency(ServerId, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hop {
    pub server: ServerId,
    pub blocks: BlockRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub hops: Vec<Hop>,
    /// Predicted milliseconds per generation step.
    pub cost_ms: f64,
}

impl Chain {
    pub fn servers(&self) -> impl Iterator<Item = ServerId> + '_ {
        self.hops.iter().map(|h| h.server)
    }

    pub fn covers(&self, needed: BlockRange) -> bool {
        let mut at = needed.start;
        for h in &self.hops {
            if h.blocks.start != at {
                return false;
            }
            at = h.blocks.end;
        }
        at == needed.end
    }
}

/// Shortest distances from one start boundary.
#[derive(Debug, Clone)]
struct PathState {
    dist: Vec<f64>,
    pred: Vec<Option<(ServerId, usize)>>,
    /// Lowest boundary whose outgoing edges changed since the last repair.
    dirty_from: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Router {
    n_blocks: usize,
    servers: BTreeMap<ServerId, RouteServer>,
    banned: BTreeSet<ServerId>,
    paths: HashMap<usize, PathState>,
    repairs: u64,
}

impl Router {
    pub fn new(n_blocks: usize) -> Self {
        Self {
            n_blocks,
            servers: BTreeMap::new(),
            banned: BTreeSet::new(),
            paths: HashMap::new(),
            repairs: 0,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    /// Servers currently contributing edges.
    pub fn active(&self) -> impl Iterator<Item = &RouteServer> {
        self.servers
            .values()
            .filter(|s| !self.banned.contains(&s.id) && s.usable())
    }

    /// Every server in the graph, banned or not.
    pub fn known(&self) -> impl Iterator<Item = ServerId> + '_ {
        self.servers.keys().copied()
    }

    pub fn is_banned(&self, id: ServerId) -> bool {
        self.banned.contains(&id)
    }

    /// Number of node relaxations performed so far.
    pub fn repairs(&self) -> u64 {
        self.repairs
    }

    fn touch(&mut self, blocks: BlockRange) {
        for p in self.paths.values_mut() {
            p.dirty_from = Some(p.dirty_from.map_or(blocks.start, |d| d.min(blocks.start)));
        }
    }

    pub fn apply_update(&mut self, update: RouteUpdate) {
        let touched = match update {
            RouteUpdate::Join(mut s) => {
                s.blocks.end = s.blocks.end.min(self.n_blocks);
                let old = self.servers.insert(s.id, s).map(|o| o.blocks);
                let start = old.map_or(s.blocks.start, |o| o.start.min(s.blocks.start));
                Some(BlockRange::new(start, s.blocks.end.max(start)))
            }
            RouteUpdate::Leave(id) => self.servers.remove(&id).map(|s| s.blocks),
            RouteUpdate::Ban(id) => {
                self.banned.insert(id);
                self.servers.get(&id).map(|s| s.blocks)
            }
            RouteUpdate::Unban(id) => {
                self.banned.remove(&id);
                self.servers.get(&id).map(|s| s.blocks)
            }
            RouteUpdate::Latency(id, rtt) => self.servers.get_mut(&id).map(|s| {
                s.rtt_ms = rtt;
                s.blocks
            }),
        };
        if let Some(b) = touched {
            self.touch(b);
        }
    }

    /// Brings the graph in line with a directory snapshot: unseen servers join,
    /// missing ones leave, changed ones re-join.
    pub fn sync(&mut self, snapshot: &[ServerInfo], rtt_ms: impl Fn(ServerId) -> f64) {
        let live: BTreeMap<ServerId, RouteServer> = snapshot
            .iter()
            .filter(|i| i.counts_toward_load() && i.state == crate::directory::ServerState::Online)
            .map(|i| (i.server_id, RouteServer::from_info(i, rtt_ms(i.server_id))))
            .collect();
        let gone: Vec<ServerId> = self.servers.keys().filter(|id| !live.contains_key(id)).copied().collect();
        for id in gone {
            self.apply_update(RouteUpdate::Leave(id));
        }
        for (id, s) in live {
            if self.servers.get(&id) != Some(&s) {
                self.apply_update(RouteUpdate::Join(s));
            }
        }
    }

    fn relax(&self, dist: &[f64], v: usize) -> (f64, Option<(ServerId, usize)>) {
        let mut best = (f64::INFINITY, None);
        for s in self.active() {
            if s.blocks.start >= v || s.blocks.end < v {
                continue;
            }
            for u in s.blocks.start..v {
                if !dist[u].is_finite() {
                    continue;
                }
                let c = dist[u] + edge_cost(s.rtt_ms, v - u, s.throughput);
                if c < best.0 {
                    best = (c, Some((s.id, u)));
                }
            }
        }
        best
    }

    fn repair(&mut self, start: usize) {
        let n = self.n_blocks;
        let mut state = self.paths.remove(&start).unwrap_or_else(|| {
            let mut dist = vec![f64::INFINITY; n + 1];
            dist[start] = 0.0;
            PathState {
                dist,
                pred: vec![None; n + 1],
                dirty_from: Some(start),
            }
        });
        if let Some(d) = state.dirty_from.take() {
            for v in (d.max(start) + 1)..=n {
                let (c, p) = self.relax(&state.dist, v);
                state.dist[v] = c;
                state.pred[v] = p;
                self.repairs += 1;
            }
        }
        self.paths.insert(start, state);
    }

    /// Cheapest predicted-cost chain covering `needed`.
    pub fn find_best_chain(&mut self, needed: BlockRange) -> Result<Chain, RouteError> {
        if needed.is_empty() || needed.end > self.n_blocks {
            return Err(RouteError::BadInterval {
                needed,
                n_blocks: self.n_blocks,
            });
        }
        self.repair(needed.start);
        let state = &self.paths[&needed.start];
        if !state.dist[needed.end].is_finite() {
            let block = (needed.start..needed.end)
                .find(|&b| !self.active().any(|s| s.blocks.contains(b)))
                .unwrap_or(needed.start);
            return Err(RouteError::NoRoute { needed, block });
        }
        let mut hops = Vec::new();
        let mut v = needed.end;
        while v != needed.start {
            let (server, u) = state.pred[v].expect("finite distance has a predecessor");
            hops.push(Hop {
                server,
                blocks: BlockRange::new(u, v),
            });
            v = u;
        }
        hops.reverse();
        Ok(Chain {
            hops,
            cost_ms: state.dist[needed.end],
        })
    }
}

/// Exponentially smoothed round-trip estimate per server.
#[derive(Debug, Clone, Default)]
pub struct LatencyEstimator {
    alpha: f64,
    estimates: HashMap<ServerId, f64>,
}

impl LatencyEstimator {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            estimates: HashMap::new(),
        }
    }

    pub fn observe(&mut self, id: ServerId, rtt_ms: f64) -> f64 {
        let a = self.alpha;
        let e = self
            .estimates
            .entry(id)
            .and_modify(|e| *e = a * rtt_ms + (1.0 - a) * *e)
            .or_insert(rtt_ms);
        *e
    }

    pub fn get(&self, id: ServerId) -> Option<f64> {
        self.estimates.get(&id).copied()
    }
}
