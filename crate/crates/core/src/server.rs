//! Block server: holds a contiguous span of blocks and runs per-session
//! inference state, restores, cache reordering and training passes.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancer::{measure_throughput, propose_rebalance, Placement, RebalanceConfig};
use crate::directory::{ServerInfo, ServerState};
use crate::model::{
    block_backward, block_forward, training_forward, BlockParams, HiddenStates, KvCache, Matrix, ModelConfig,
};
use crate::netsim::tcp::{serve, TcpServerHandle};
use crate::netsim::{hidden_list_checksum, ErrorCode, Message, NetError, NetProfile, RelayTarget, StepInputs, WireMessage};
use crate::types::{BlockRange, ServerId, SessionId};

pub const DEFAULT_SESSION_TTL_S: f64 = 300.0;
pub const MICRO_BATCH_TOKENS: usize = 1024;
/// Forward calls timed by [`BlockServer::self_measure`].
pub const MEASURE_BATCH: usize = 32;

/// Simulated compute cost of a pass through a server's blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComputeModel {
    /// One new token through one block.
    pub per_block_step_s: f64,
    /// Fixed part of a multi-token pass through one block.
    pub batch_base_s: f64,
    pub batch_per_token_s: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        Self {
            per_block_step_s: 0.010,
            batch_base_s: 0.010,
            batch_per_token_s: 0.0005,
        }
    }
}

impl ComputeModel {
    pub fn pass_s(&self, blocks: usize, tokens: usize) -> f64 {
        let per_block = if tokens <= 1 {
            self.per_block_step_s
        } else {
            self.batch_base_s + self.batch_per_token_s * tokens as f64
        };
        blocks as f64 * per_block
    }

    /// Tokens per second through one block in the single-token regime.
    pub fn tokens_per_s(&self) -> f64 {
        1.0 / self.per_block_step_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeMode {
    #[default]
    Exact,
    /// Blocks act as the identity; only time is charged.
    TimingOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureHooks {
    /// Crash once the simulated clock reaches this time.
    pub crash_at: Option<f64>,
    /// Crash instead of answering request number `n + 1`.
    pub crash_after_requests: Option<u64>,
    pub crash_on_restore: bool,
    /// Per-message loss probability override for links to this server.
    pub drop_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub id: u32,
    pub address: String,
    /// Served interval; when absent the server picks one of `capacity` blocks.
    pub blocks: Option<BlockRange>,
    pub capacity: usize,
    pub throughput_override: Option<f64>,
    pub session_ttl_s: f64,
    pub rebalance: RebalanceConfig,
    pub compute: ComputeModel,
    pub compute_mode: ComputeMode,
    pub hooks: FailureHooks,
    pub quantize: bool,
    pub micro_batch_tokens: usize,
    pub model: ModelConfig,
    pub network: NetProfile,
    /// Online intervals `(from, to)` in seconds; empty means always online.
    pub churn: Vec<(f64, f64)>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            id: 0,
            address: String::new(),
            blocks: None,
            capacity: 1,
            throughput_override: None,
            session_ttl_s: DEFAULT_SESSION_TTL_S,
            rebalance: RebalanceConfig::default(),
            compute: ComputeModel::default(),
            compute_mode: ComputeMode::Exact,
            hooks: FailureHooks::default(),
            quantize: false,
            micro_batch_tokens: MICRO_BATCH_TOKENS,
            model: ModelConfig::default(),
            network: NetProfile::default(),
            churn: Vec::new(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error("invalid server config: {0}")]
    Config(String),
    /// The server went down; the caller sees a dropped connection.
    #[error("server {0} crashed")]
    Crashed(ServerId),
}

#[derive(Debug, Clone)]
struct Session {
    range: BlockRange,
    /// `[beam][block]`
    caches: Vec<Vec<KvCache>>,
    positions: usize,
    last_activity: f64,
    relay: Option<RelayTarget>,
}

impl Session {
    fn width(&self) -> usize {
        self.caches.len()
    }
}

/// A server's answer plus the simulated compute time it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub message: Message,
    pub compute_s: f64,
    /// Outputs to push to the next stage in relay mode.
    pub relay: Option<(RelayTarget, Vec<HiddenStates>)>,
}

impl Reply {
    fn now(message: Message) -> Self {
        Self {
            message,
            compute_s: 0.0,
            relay: None,
        }
    }

    fn err(code: ErrorCode, msg: impl Into<String>) -> Self {
        Self::now(Message::error(code, msg))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub requests: u64,
    pub steps: u64,
    pub restores: u64,
    pub restored_rows: u64,
    pub forwards: u64,
    pub backwards: u64,
    pub block_changes: u64,
}

#[derive(Debug, Clone)]
pub struct BlockServer {
    id: ServerId,
    config: ServerConfig,
    params: Arc<Vec<BlockParams>>,
    blocks: BlockRange,
    sessions: HashMap<SessionId, Session>,
    /// Per-block inputs of a training forward, kept for the matching backward.
    forward_records: HashMap<(SessionId, u64), Vec<Vec<Matrix>>>,
    relay_inbox: HashMap<SessionId, VecDeque<Vec<HiddenStates>>>,
    crashed: bool,
    stats: ServerStats,
    next_sweep: f64,
}

impl BlockServer {
    /// Builds a server over the shared weights. `config.blocks` must be set.
    pub fn new(config: ServerConfig, params: Arc<Vec<BlockParams>>) -> Result<Self, ServerError> {
        let n = params.len();
        let blocks = config
            .blocks
            .ok_or_else(|| ServerError::Config("no block interval assigned".into()))?;
        if blocks.is_empty() || blocks.end > n {
            return Err(ServerError::Config(format!("interval {blocks} outside [0, {n})")));
        }
        if config.capacity == 0 {
            return Err(ServerError::Config("capacity must be at least 1".into()));
        }
        if config.compute.per_block_step_s <= 0.0 {
            return Err(ServerError::Config("per-block step time must be positive".into()));
        }
        Ok(Self {
            id: ServerId(config.id),
            config,
            params,
            blocks,
            sessions: HashMap::new(),
            forward_records: HashMap::new(),
            relay_inbox: HashMap::new(),
            crashed: false,
            stats: ServerStats::default(),
            next_sweep: 0.0,
        })
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn blocks(&self) -> BlockRange {
        self.blocks
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    /// Switches between exact and timing-only compute; drops all sessions.
    pub fn set_compute_mode(&mut self, mode: ComputeMode) {
        self.config.compute_mode = mode;
        self.sessions.clear();
        self.forward_records.clear();
    }

    pub fn hooks_mut(&mut self) -> &mut FailureHooks {
        &mut self.config.hooks
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Tokens held by a session, if it is alive.
    pub fn session_positions(&self, session: SessionId) -> Option<usize> {
        self.sessions.get(&session).map(|s| s.positions)
    }

    /// Cache lengths of every `[beam][block]` of a session.
    pub fn session_cache_lens(&self, session: SessionId) -> Option<Vec<Vec<usize>>> {
        self.sessions
            .get(&session)
            .map(|s| s.caches.iter().map(|b| b.iter().map(KvCache::len).collect()).collect())
    }

    /// Hash of the served parameters; never changes while serving.
    pub fn params_hash(&self) -> u64 {
        let mut h = crate::netsim::Fnv1a::new();
        for p in &self.params[self.blocks.start..self.blocks.end] {
            h.write(&p.content_hash().to_le_bytes());
        }
        h.finish()
    }

    /// Loses all volatile state, as after a process crash.
    pub fn crash(&mut self) {
        self.crashed = true;
        self.sessions.clear();
        self.forward_records.clear();
        self.relay_inbox.clear();
    }

    pub fn reset_session(&mut self, session: SessionId) {
        self.sessions.remove(&session);
        self.relay_inbox.remove(&session);
    }

    pub fn expire_sessions(&mut self, now: f64) {
        let ttl = self.config.session_ttl_s;
        self.sessions.retain(|_, s| now - s.last_activity <= ttl);
        self.next_sweep = now + ttl / 4.0;
    }

    /// Expires the session being addressed, and everything else once in a
    /// while.
    fn expire_lazily(&mut self, session: SessionId, now: f64) {
        if now >= self.next_sweep {
            self.expire_sessions(now);
        } else if self
            .sessions
            .get(&session)
            .is_some_and(|s| now - s.last_activity > self.config.session_ttl_s)
        {
            self.sessions.remove(&session);
        }
    }

    /// Accepts outputs pushed by the previous stage.
    pub fn deliver_relay(&mut self, session: SessionId, outputs: Vec<HiddenStates>) {
        if !self.crashed {
            self.relay_inbox.entry(session).or_default().push_back(outputs);
        }
    }

    /// Single-block tokens per second: the override if set, otherwise the
    /// compute model.
    pub fn compute_throughput(&self) -> f64 {
        if let Some(t) = self.config.throughput_override {
            return t;
        }
        self.config.compute.tokens_per_s()
    }

    /// Times [`MEASURE_BATCH`] single-token forwards through the first served
    /// block on the wall clock.
    pub fn benchmark_compute(&self) -> f64 {
        let params = &self.params[self.blocks.start];
        let d = params.hidden_dim();
        let mut cache = KvCache::new(d);
        let start = Instant::now();
        for t in 0..MEASURE_BATCH {
            let mut row = Matrix::zeros(1, d);
            row.row_mut(0).iter_mut().enumerate().for_each(|(i, v)| *v = ((i + t) % 7) as f32 * 0.1);
            let (_, delta) = block_forward(params, &HiddenStates::new(row, t), &cache).expect("cache in sync");
            cache.append(delta);
        }
        MEASURE_BATCH as f64 / start.elapsed().as_secs_f64().max(1e-9)
    }

    /// Tokens per second the link can carry for single-token activations.
    pub fn network_throughput(&self) -> f64 {
        let d = self.params[0].hidden_dim();
        let bytes = 4 * d + crate::netsim::FRAME_OVERHEAD;
        self.config.network.bandwidth_bps / (8.0 * bytes as f64)
    }

    pub fn self_measure(&self) -> f64 {
        if let Some(t) = self.config.throughput_override {
            return t;
        }
        measure_throughput(self.network_throughput(), self.compute_throughput())
    }

    pub fn info(&self, now: f64) -> ServerInfo {
        ServerInfo {
            server_id: self.id,
            address: self.config.address.clone(),
            blocks: self.blocks,
            throughput: self.self_measure(),
            state: if self.crashed { ServerState::Offline } else { ServerState::Online },
            announced_at: now,
        }
    }

    /// One balancer check: moves to a better span if the cascade simulation
    /// clears the threshold. Sessions on the old span are dropped.
    pub fn rebalance_check(&mut self, snapshot: &[ServerInfo]) -> Option<BlockRange> {
        let mut placements: Vec<Placement> = snapshot
            .iter()
            .filter(|i| i.counts_toward_load() && i.server_id != self.id)
            .map(Placement::from)
            .collect();
        placements.push(Placement {
            id: self.id,
            blocks: self.blocks,
            throughput: self.self_measure(),
        });
        let n = self.params.len();
        let next = propose_rebalance(self.id, &placements, n, &self.config.rebalance)?;
        self.move_to(next);
        Some(next)
    }

    pub fn move_to(&mut self, blocks: BlockRange) {
        if blocks != self.blocks {
            self.blocks = blocks;
            self.sessions.clear();
            self.forward_records.clear();
            self.relay_inbox.clear();
            self.stats.block_changes += 1;
        }
    }

    fn served(&self, range: BlockRange) -> &[BlockParams] {
        &self.params[range.start..range.end]
    }

    fn run_blocks(&self, range: BlockRange, caches: &mut [KvCache], x: HiddenStates) -> Result<HiddenStates, crate::model::ModelError> {
        match self.config.compute_mode {
            ComputeMode::TimingOnly => Ok(x),
            ComputeMode::Exact => crate::model::forward_through(self.served(range), x, caches),
        }
    }

    /// Handles one request. `Err` means the server crashed and the caller
    /// sees no reply.
    pub fn handle(&mut self, session: SessionId, msg: Message, now: f64) -> Result<Reply, ServerError> {
        if self.crashed {
            return Err(ServerError::Crashed(self.id));
        }
        if self.config.hooks.crash_at.is_some_and(|t| now >= t)
            || self
                .config
                .hooks
                .crash_after_requests
                .is_some_and(|n| self.stats.requests >= n)
            || (self.config.hooks.crash_on_restore && matches!(msg, Message::Restore(_)))
        {
            self.crash();
            return Err(ServerError::Crashed(self.id));
        }
        self.stats.requests += 1;
        self.expire_lazily(session, now);
        let reply = match msg {
            Message::OpenSession {
                start,
                end,
                width,
                relay,
            } => self.open(session, start, end, width, relay, now),
            Message::Step(inputs) => self.step(session, inputs, now),
            Message::Restore(history) => self.restore(session, history, now),
            Message::Reorder(indices) => self.reorder(session, &indices, now),
            Message::Forward { request, inputs } => self.train_forward(session, request, inputs, now),
            Message::Backward { request, grads } => self.train_backward(session, request, grads, now),
            Message::Ping => Reply::now(Message::Pong(Some(self.info(now)))),
            Message::Close => {
                self.reset_session(session);
                self.forward_records.retain(|(s, _), _| *s != session);
                Reply::now(Message::Close)
            }
            other => Reply::err(ErrorCode::BadRequest, format!("servers do not accept {:?}", other.kind())),
        };
        debug_assert!(self.caches_consistent());
        Ok(reply)
    }

    fn caches_consistent(&self) -> bool {
        self.config.compute_mode == ComputeMode::TimingOnly
            || self
                .sessions
                .values()
                .all(|s| s.caches.iter().flatten().all(|c| c.len() == s.positions))
    }

    fn open(&mut self, session: SessionId, start: usize, end: usize, width: usize, relay: Option<RelayTarget>, now: f64) -> Reply {
        let range = BlockRange::new(start, end);
        if range.is_empty() || !self.blocks.covers(&range) {
            return Reply::err(ErrorCode::NotServing, format!("{} serves {}, not {range}", self.id, self.blocks));
        }
        if width == 0 {
            return Reply::err(ErrorCode::BadRequest, "width must be at least 1");
        }
        let d = self.params[0].hidden_dim();
        self.relay_inbox.remove(&session);
        self.sessions.insert(
            session,
            Session {
                range,
                caches: vec![vec![KvCache::new(d); range.len()]; width],
                positions: 0,
                last_activity: now,
                relay,
            },
        );
        Reply::now(Message::OpenSession {
            start,
            end,
            width,
            relay,
        })
    }

    fn check_inputs(&self, s: &Session, inputs: &[HiddenStates], offset: usize) -> Option<Reply> {
        let d = self.params[0].hidden_dim();
        if inputs.len() != s.width() {
            return Some(Reply::err(
                ErrorCode::BadRequest,
                format!("expected {} beams, got {}", s.width(), inputs.len()),
            ));
        }
        let rows = inputs[0].rows();
        if rows == 0 || inputs.iter().any(|h| h.rows() != rows || h.hidden_dim() != d) {
            return Some(Reply::err(ErrorCode::BadRequest, "beam inputs must share a non-empty [rows × hidden] shape"));
        }
        if let Some(h) = inputs.iter().find(|h| h.position_offset != offset) {
            return Some(Reply::err(
                ErrorCode::Desync,
                format!("input offset {} but session holds {offset} positions", h.position_offset),
            ));
        }
        if offset + rows > self.config.model.max_seq_len {
            return Some(Reply::err(
                ErrorCode::Capacity,
                format!("{} positions exceed the limit of {}", offset + rows, self.config.model.max_seq_len),
            ));
        }
        None
    }

    fn step(&mut self, session: SessionId, inputs: StepInputs, now: f64) -> Reply {
        let Some(mut s) = self.sessions.remove(&session) else {
            return Reply::err(ErrorCode::NoSession, format!("no session {session:x}"));
        };
        let inputs = match inputs {
            StepInputs::Inline(v) => v,
            StepInputs::Relayed { checksum } => {
                let pushed = self.relay_inbox.get_mut(&session).and_then(|q| {
                    while q.front().is_some_and(|v| v.first().map(|h| h.position_offset) != Some(s.positions)) {
                        q.pop_front();
                    }
                    q.pop_front()
                });
                match pushed {
                    None => {
                        self.sessions.insert(session, s);
                        return Reply::err(ErrorCode::MissingRelay, "no relayed inputs for this position");
                    }
                    Some(v) if hidden_list_checksum(&v, self.config.quantize) != checksum => {
                        self.sessions.insert(session, s);
                        return Reply::err(ErrorCode::ChecksumMismatch, "relayed inputs differ from the client's copy");
                    }
                    Some(v) => v,
                }
            }
        };
        if let Some(err) = self.check_inputs(&s, &inputs, s.positions) {
            self.sessions.insert(session, s);
            return err;
        }
        let rows = inputs[0].rows();
        let mut outputs = Vec::with_capacity(inputs.len());
        for (x, caches) in inputs.into_iter().zip(s.caches.iter_mut()) {
            match self.run_blocks(s.range, caches, x) {
                Ok(y) => outputs.push(y),
                Err(e) => return Reply::err(ErrorCode::Desync, e.to_string()),
            }
        }
        s.positions += rows;
        s.last_activity = now;
        self.stats.steps += 1;
        let compute_s = self.config.compute.pass_s(s.range.len(), rows * s.width());
        let relay = s.relay.map(|t| (t, outputs.clone()));
        self.sessions.insert(session, s);
        Reply {
            message: Message::StepResult(outputs),
            compute_s,
            relay,
        }
    }

    /// Rebuilds a session from the full history of its inputs in one batched
    /// pass. Also serves stateless full-sequence recomputation.
    fn restore(&mut self, session: SessionId, history: Vec<HiddenStates>, now: f64) -> Reply {
        let Some(mut s) = self.sessions.remove(&session) else {
            return Reply::err(ErrorCode::NoSession, format!("no session {session:x}"));
        };
        let d = self.params[0].hidden_dim();
        s.caches = vec![vec![KvCache::new(d); s.range.len()]; s.width()];
        s.positions = 0;
        self.relay_inbox.remove(&session);
        if history.is_empty() || history.iter().all(|h| h.rows() == 0) {
            s.last_activity = now;
            self.sessions.insert(session, s);
            return Reply::now(Message::StepResult(Vec::new()));
        }
        if let Some(err) = self.check_inputs(&s, &history, 0) {
            self.sessions.insert(session, s);
            return err;
        }
        let rows = history[0].rows();
        let mut outputs = Vec::with_capacity(history.len());
        for (x, caches) in history.into_iter().zip(s.caches.iter_mut()) {
            match self.run_blocks(s.range, caches, x) {
                Ok(y) => outputs.push(y),
                Err(e) => return Reply::err(ErrorCode::Desync, e.to_string()),
            }
        }
        s.positions = rows;
        s.last_activity = now;
        self.stats.restores += 1;
        self.stats.restored_rows += rows as u64;
        let compute_s = self.config.compute.pass_s(s.range.len(), rows * s.width());
        self.sessions.insert(session, s);
        Reply {
            message: Message::StepResult(outputs),
            compute_s,
            relay: None,
        }
    }

    fn reorder(&mut self, session: SessionId, indices: &[u32], now: f64) -> Reply {
        let Some(s) = self.sessions.get_mut(&session) else {
            return Reply::err(ErrorCode::NoSession, format!("no session {session:x}"));
        };
        let width = s.width() as u32;
        if indices.is_empty() || indices.iter().any(|&i| i == 0 || i > width) {
            return Reply::err(ErrorCode::BadRequest, format!("reorder indices must lie in [1, {width}]"));
        }
        s.caches = gather(&s.caches, indices);
        s.last_activity = now;
        Reply::now(Message::Reorder(indices.to_vec()))
    }

    fn micro_batches(&self, inputs: &[HiddenStates]) -> Vec<std::ops::Range<usize>> {
        let limit = self.config.micro_batch_tokens.max(1);
        let mut out = Vec::new();
        let mut start = 0;
        let mut tokens = 0;
        for (i, h) in inputs.iter().enumerate() {
            if tokens > 0 && tokens + h.rows() > limit {
                out.push(start..i);
                start = i;
                tokens = 0;
            }
            tokens += h.rows();
        }
        if start < inputs.len() {
            out.push(start..inputs.len());
        }
        out
    }

    fn training_cost(&self, range: BlockRange, inputs: &[HiddenStates]) -> f64 {
        self.micro_batches(inputs)
            .into_iter()
            .map(|mb| {
                let tokens: usize = inputs[mb].iter().map(HiddenStates::rows).sum();
                self.config.compute.pass_s(range.len(), tokens)
            })
            .sum()
    }

    fn train_forward(&mut self, session: SessionId, request: u64, inputs: Vec<HiddenStates>, now: f64) -> Reply {
        let Some(s) = self.sessions.get_mut(&session) else {
            return Reply::err(ErrorCode::NoSession, format!("no session {session:x}"));
        };
        s.last_activity = now;
        let range = s.range;
        let d = self.params[0].hidden_dim();
        if inputs.iter().any(|h| h.hidden_dim() != d || h.rows() == 0 || h.position_offset != 0) {
            return Reply::err(ErrorCode::BadRequest, "training inputs must be whole sequences");
        }
        let compute_s = self.training_cost(range, &inputs);
        let mut records = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());
        for h in inputs {
            let mut per_block = Vec::with_capacity(range.len());
            let mut x = h.data;
            for p in self.served(range) {
                let y = match self.config.compute_mode {
                    ComputeMode::Exact => training_forward(p, &x),
                    ComputeMode::TimingOnly => x.clone(),
                };
                per_block.push(std::mem::replace(&mut x, y));
            }
            records.push(per_block);
            outputs.push(HiddenStates::new(x, 0));
        }
        self.forward_records.insert((session, request), records);
        self.stats.forwards += 1;
        Reply {
            message: Message::StepResult(outputs),
            compute_s,
            relay: None,
        }
    }

    fn train_backward(&mut self, session: SessionId, request: u64, grads: Vec<HiddenStates>, now: f64) -> Reply {
        let Some(s) = self.sessions.get_mut(&session) else {
            return Reply::err(ErrorCode::NoSession, format!("no session {session:x}"));
        };
        s.last_activity = now;
        let range = s.range;
        let Some(records) = self.forward_records.remove(&(session, request)) else {
            return Reply::err(ErrorCode::NoForwardRecord, format!("no forward pass {request} to differentiate"));
        };
        if records.len() != grads.len() {
            return Reply::err(ErrorCode::BadRequest, "gradient batch does not match the forward batch");
        }
        let compute_s = 2.0 * self.training_cost(range, &grads);
        let mut out = Vec::with_capacity(grads.len());
        for (per_block, g) in records.iter().zip(grads) {
            let mut g = g;
            for (p, x) in self.served(range).iter().zip(per_block).rev() {
                g = match self.config.compute_mode {
                    ComputeMode::Exact => match block_backward(p, &HiddenStates::new(x.clone(), 0), &g) {
                        Ok(v) => v,
                        Err(e) => return Reply::err(ErrorCode::BadRequest, e.to_string()),
                    },
                    ComputeMode::TimingOnly => g,
                };
            }
            out.push(g);
        }
        self.stats.backwards += 1;
        Reply {
            message: Message::StepResult(out),
            compute_s,
            relay: None,
        }
    }
}

/// Gather with one-based indices: new row `i` is old row `indices[i] - 1`.
pub fn gather<T: Clone>(rows: &[T], indices: &[u32]) -> Vec<T> {
    indices.iter().map(|&i| rows[i as usize - 1].clone()).collect()
}

/// Serves a block server over TCP. Request times are wall-clock seconds since
/// the call.
pub fn serve_tcp(server: Arc<Mutex<BlockServer>>, listener: std::net::TcpListener) -> std::io::Result<TcpServerHandle> {
    let started = Instant::now();
    let quantize = server.lock().expect("server lock").config.quantize;
    serve(listener, move |wire: WireMessage| {
        let session = wire.session_id;
        let reply = match Message::from_wire(&wire) {
            Ok(msg) => {
                let now = started.elapsed().as_secs_f64();
                match server.lock().expect("server lock").handle(session, msg, now) {
                    Ok(r) => r.message,
                    Err(e) => Message::error(ErrorCode::NotServing, e.to_string()),
                }
            }
            Err(NetError::ChecksumMismatch) => Message::error(ErrorCode::ChecksumMismatch, "frame checksum mismatch"),
            Err(e) => Message::error(ErrorCode::BadRequest, e.to_string()),
        };
        reply.to_wire(session, quantize)
    })
}
