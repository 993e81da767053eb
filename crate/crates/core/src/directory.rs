//! Announcement board standing in for a DHT: servers publish which blocks
//! they hold and their throughput; readers aggregate per-block load.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{BlockRange, ServerId};

pub const ANNOUNCE_PERIOD_S: f64 = 10.0;
pub const DEFAULT_TTL_S: f64 = 3.0 * ANNOUNCE_PERIOD_S;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DirectoryError {
    #[error("interval {blocks} is outside [0, {n_blocks})")]
    BadInterval { blocks: BlockRange, n_blocks: usize },
    #[error("online server {0} announced non-positive throughput")]
    BadThroughput(ServerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerState {
    /// Loading blocks; already counts toward block load.
    Joining,
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub server_id: ServerId,
    pub address: String,
    pub blocks: BlockRange,
    /// Tokens per second.
    pub throughput: f64,
    pub state: ServerState,
    pub announced_at: f64,
}

impl ServerInfo {
    pub fn counts_toward_load(&self) -> bool {
        matches!(self.state, ServerState::Online | ServerState::Joining)
    }
}

/// Total throughput of live servers holding (or loading) each block.
pub fn block_load(snapshot: &[ServerInfo], n_blocks: usize) -> Vec<f64> {
    let mut load = vec![0.0; n_blocks];
    for info in snapshot.iter().filter(|i| i.counts_toward_load()) {
        for t in &mut load[info.blocks.start..info.blocks.end.min(n_blocks)] {
            *t += info.throughput;
        }
    }
    load
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Directory {
    n_blocks: usize,
    ttl: f64,
    records: BTreeMap<ServerId, ServerInfo>,
}

impl Directory {
    pub fn new(n_blocks: usize) -> Self {
        Self::with_ttl(n_blocks, DEFAULT_TTL_S)
    }

    pub fn with_ttl(n_blocks: usize, ttl: f64) -> Self {
        Self {
            n_blocks,
            ttl,
            records: BTreeMap::new(),
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn ttl(&self) -> f64 {
        self.ttl
    }

    /// Upserts `info`, stamping it with `now`.
    pub fn announce(&mut self, mut info: ServerInfo, now: f64) -> Result<(), DirectoryError> {
        let b = info.blocks;
        if b.start >= b.end || b.end > self.n_blocks {
            return Err(DirectoryError::BadInterval {
                blocks: b,
                n_blocks: self.n_blocks,
            });
        }
        if info.state == ServerState::Online && !(info.throughput > 0.0) {
            return Err(DirectoryError::BadThroughput(info.server_id));
        }
        info.announced_at = now;
        self.records.insert(info.server_id, info);
        Ok(())
    }

    pub fn remove(&mut self, id: ServerId) {
        self.records.remove(&id);
    }

    /// Records whose last announcement is at most one TTL old, by server id.
    pub fn snapshot(&self, now: f64) -> Vec<ServerInfo> {
        self.records
            .values()
            .filter(|r| now - r.announced_at <= self.ttl)
            .cloned()
            .collect()
    }

    pub fn get(&self, id: ServerId, now: f64) -> Option<ServerInfo> {
        self.records
            .get(&id)
            .filter(|r| now - r.announced_at <= self.ttl)
            .cloned()
    }

    pub fn block_load(&self, now: f64) -> Vec<f64> {
        block_load(&self.snapshot(now), self.n_blocks)
    }

    /// Drops expired records for good.
    pub fn purge(&mut self, now: f64) {
        let ttl = self.ttl;
        self.records.retain(|_, r| now - r.announced_at <= ttl);
    }

    pub fn dump_json(&self, now: f64) -> String {
        serde_json::to_string_pretty(&self.snapshot(now)).expect("directory serializes")
    }
}

/// Directory shared between threads; readers get a consistent snapshot.
#[derive(Debug, Clone)]
pub struct SharedDirectory(Arc<RwLock<Directory>>);

impl SharedDirectory {
    pub fn new(dir: Directory) -> Self {
        Self(Arc::new(RwLock::new(dir)))
    }

    pub fn announce(&self, info: ServerInfo, now: f64) -> Result<(), DirectoryError> {
        self.0.write().expect("directory lock").announce(info, now)
    }

    pub fn snapshot(&self, now: f64) -> Vec<ServerInfo> {
        self.0.read().expect("directory lock").snapshot(now)
    }
}

/// Client-local ban list with a cooldown after which servers are eligible again.
#[derive(Debug, Clone)]
pub struct BanList {
    cooldown: f64,
    until: HashMap<ServerId, f64>,
}

impl BanList {
    pub fn new(cooldown: f64) -> Self {
        Self {
            cooldown,
            until: HashMap::new(),
        }
    }

    pub fn cooldown(&self) -> f64 {
        self.cooldown
    }

    pub fn ban(&mut self, id: ServerId, now: f64) {
        self.until.insert(id, now + self.cooldown);
    }

    pub fn unban(&mut self, id: ServerId) {
        self.until.remove(&id);
    }

    pub fn is_banned(&self, id: ServerId, now: f64) -> bool {
        self.until.get(&id).is_some_and(|&t| now < t)
    }

    /// Earliest time at which some currently banned server becomes eligible.
    pub fn next_expiry(&self, now: f64) -> Option<f64> {
        self.until
            .values()
            .copied()
            .filter(|&t| t > now)
            .min_by(f64::total_cmp)
    }

    pub fn banned(&self, now: f64) -> Vec<ServerId> {
        let mut v: Vec<_> = self.until.iter().filter(|(_, &t)| now < t).map(|(&id, _)| id).collect();
        v.sort();
        v
    }
}
