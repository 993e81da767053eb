//! Client side: chain selection, the generation strategies, failure recovery,
//! beam search and soft-prompt fine-tuning.

mod finetune;
mod inference;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directory::BanList;
use crate::model::{HiddenStates, Matrix, ModelError};
use crate::netsim::{ErrorCode, Message};
use crate::router::{Chain, Hop, RouteError, RouteUpdate, Router};
use crate::transport::Transport;
use crate::types::{BlockRange, ServerId, SessionId};

pub use finetune::{copy_task_batch, FinetuneSession};
pub use inference::{InferenceSession, RecoveryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Server-side attention caches plus client-side input history.
    DualCache,
    /// Start over from the prefix on any failure.
    Restart,
    /// Send the whole sequence every step.
    Cacheless,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Restart, Strategy::Cacheless, Strategy::DualCache];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::DualCache => "dual-cache",
            Strategy::Restart => "restart",
            Strategy::Cacheless => "cacheless",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dual-cache" | "dual_cache" => Ok(Strategy::DualCache),
            "restart" => Ok(Strategy::Restart),
            "cacheless" => Ok(Strategy::Cacheless),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub client_id: u32,
    /// Chain re-selections allowed per step before giving up.
    pub retry_budget: usize,
    pub ban_cooldown_s: f64,
    /// Ask servers to push step outputs straight to the next stage.
    pub relay: bool,
    /// Give up once this much transport time has passed in one call.
    pub time_budget_s: Option<f64>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            client_id: 0,
            retry_budget: 10,
            ban_cooldown_s: 2.0,
            relay: false,
            time_budget_s: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("no usable chain for {needed} after {attempts} attempts: {reason}")]
    SwarmUnavailable {
        needed: BlockRange,
        attempts: usize,
        reason: String,
    },
    #[error("time budget of {budget_s} s exhausted after {elapsed_s:.1} s")]
    BudgetExceeded { budget_s: f64, elapsed_s: f64 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub messages: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Framed bytes of STEP requests, per generated token.
    pub step_bytes_per_step: Vec<u64>,
    /// Activation payload of RESTORE requests issued during recovery.
    pub restore_activation_bytes: u64,
    pub recoveries: u64,
    pub restarts: u64,
    pub failed_calls: u64,
    pub relay_fallbacks: u64,
}

impl Counters {
    pub fn bytes_total(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }
}

/// How a single RPC went wrong.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum RpcFail {
    /// No reply: lost, refused or crashed. The server is presumed failed.
    Lost(ServerId),
    /// The server answered with an error.
    Remote(ServerId, ErrorCode, String),
}

impl RpcFail {
    pub(crate) fn server(&self) -> ServerId {
        match self {
            RpcFail::Lost(s) | RpcFail::Remote(s, _, _) => *s,
        }
    }
}

/// One pipeline stage as the client sees it.
#[derive(Debug, Clone)]
pub(crate) struct Stage {
    pub server: ServerId,
    pub blocks: BlockRange,
    pub session: SessionId,
    /// Inputs sent so far, one matrix per beam.
    pub history: Vec<Matrix>,
    /// The previous stage pushes its outputs here.
    pub relay_in: bool,
}

impl Stage {
    pub fn positions(&self) -> usize {
        self.history.first().map_or(0, |m| m.rows)
    }

    pub fn history_states(&self) -> Vec<HiddenStates> {
        self.history.iter().map(|m| HiddenStates::new(m.clone(), 0)).collect()
    }
}

/// Routing, bans and RPC bookkeeping shared by inference and training.
#[derive(Debug, Clone)]
pub(crate) struct Pathfinder {
    pub config: ClientConfig,
    pub router: Router,
    pub bans: BanList,
    pub counters: Counters,
    next_session: u64,
}

impl Pathfinder {
    pub fn new(n_blocks: usize, config: ClientConfig) -> Self {
        Self {
            bans: BanList::new(config.ban_cooldown_s),
            router: Router::new(n_blocks),
            config,
            counters: Counters::default(),
            next_session: 1,
        }
    }

    pub fn new_session(&mut self) -> SessionId {
        let id = ((self.config.client_id as u128) << 64) | self.next_session as u128;
        self.next_session += 1;
        id
    }

    pub fn ban<T: Transport>(&mut self, t: &T, server: ServerId) {
        self.bans.ban(server, t.now());
        self.router.apply_update(RouteUpdate::Ban(server));
    }

    fn refresh<T: Transport>(&mut self, t: &mut T) {
        let snapshot = t.directory();
        let client = self.config.client_id;
        let rtts: BTreeMap<ServerId, f64> = snapshot
            .iter()
            .filter_map(|i| t.rtt_ms(client, i.server_id).map(|r| (i.server_id, r)))
            .collect();
        let reachable: Vec<_> = snapshot
            .into_iter()
            .filter(|i| rtts.contains_key(&i.server_id))
            .collect();
        self.router.sync(&reachable, |id| rtts[&id]);
        let now = t.now();
        let known: Vec<ServerId> = self.router.known().collect();
        for id in known {
            let banned = self.bans.is_banned(id, now);
            if banned != self.router.is_banned(id) {
                self.router
                    .apply_update(if banned { RouteUpdate::Ban(id) } else { RouteUpdate::Unban(id) });
            }
        }
    }

    /// Best chain for `needed`, waiting out bans if nothing else is left.
    pub fn route<T: Transport>(&mut self, t: &mut T, needed: BlockRange, attempts: &mut usize) -> Result<Chain, ClientError> {
        loop {
            self.refresh(t);
            match self.router.find_best_chain(needed) {
                Ok(chain) => return Ok(chain),
                Err(RouteError::BadInterval { .. }) => {
                    return Err(ClientError::Protocol(format!("cannot route {needed}")));
                }
                Err(e @ RouteError::NoRoute { .. }) => {
                    *attempts += 1;
                    let wait = self.bans.next_expiry(t.now());
                    match wait {
                        Some(when) if *attempts <= self.config.retry_budget => t.advance_to(when),
                        _ => {
                            return Err(ClientError::SwarmUnavailable {
                                needed,
                                attempts: *attempts,
                                reason: e.to_string(),
                            })
                        }
                    }
                }
            }
        }
    }

    pub fn rpc<T: Transport>(&mut self, t: &mut T, server: ServerId, session: SessionId, msg: Message) -> Result<Message, RpcFail> {
        let q = t.quantize();
        self.counters.messages += 1;
        self.counters.bytes_sent += msg.framed_len(q) as u64;
        match t.call(self.config.client_id, server, session, msg) {
            Ok(reply) => {
                self.counters.bytes_received += reply.framed_len(q) as u64;
                match reply {
                    Message::Error { code, message } => Err(RpcFail::Remote(server, code, message)),
                    other => Ok(other),
                }
            }
            Err(_) => {
                self.counters.failed_calls += 1;
                Err(RpcFail::Lost(server))
            }
        }
    }

    /// Opens sessions along `hops`. The last hop relays to `relay_tail` when
    /// relaying is on. On failure returns the server that failed.
    pub fn open_hops<T: Transport>(
        &mut self,
        t: &mut T,
        hops: &[Hop],
        width: usize,
        relay_tail: Option<(ServerId, SessionId)>,
    ) -> Result<Vec<Stage>, RpcFail> {
        let sessions: Vec<SessionId> = hops.iter().map(|_| self.new_session()).collect();
        let mut stages = Vec::with_capacity(hops.len());
        for (k, hop) in hops.iter().enumerate() {
            let next = if k + 1 < hops.len() {
                Some((hops[k + 1].server, sessions[k + 1]))
            } else {
                relay_tail
            };
            let relay = next
                .filter(|_| self.config.relay)
                .map(|(server, session)| crate::netsim::RelayTarget { server, session });
            let open = Message::OpenSession {
                start: hop.blocks.start,
                end: hop.blocks.end,
                width,
                relay,
            };
            match self.rpc(t, hop.server, sessions[k], open)? {
                Message::OpenSession { .. } => {}
                other => {
                    return Err(RpcFail::Remote(hop.server, ErrorCode::BadRequest, format!("unexpected {:?}", other.kind())));
                }
            }
            stages.push(Stage {
                server: hop.server,
                blocks: hop.blocks,
                session: sessions[k],
                history: vec![Matrix::zeros(0, 0); width],
                relay_in: k > 0 && self.config.relay,
            });
        }
        Ok(stages)
    }

    /// Routes and opens a full chain over `needed`, banning servers that
    /// refuse and retrying.
    pub fn build_chain<T: Transport>(&mut self, t: &mut T, needed: BlockRange, width: usize) -> Result<Vec<Stage>, ClientError> {
        let mut attempts = 0;
        loop {
            let chain = self.route(t, needed, &mut attempts)?;
            match self.open_hops(t, &chain.hops, width, None) {
                Ok(stages) => return Ok(stages),
                Err(f) => {
                    self.check_protocol(&f)?;
                    self.ban(t, f.server());
                    attempts += 1;
                    if attempts > self.config.retry_budget {
                        return Err(ClientError::SwarmUnavailable {
                            needed,
                            attempts,
                            reason: format!("{} failed while opening", f.server()),
                        });
                    }
                }
            }
        }
    }

    /// Errors that mean the client itself is wrong.
    pub fn check_protocol(&self, f: &RpcFail) -> Result<(), ClientError> {
        match f {
            RpcFail::Remote(s, ErrorCode::BadRequest, m) => Err(ClientError::Protocol(format!("{s}: {m}"))),
            _ => Ok(()),
        }
    }

    pub fn close_all<T: Transport>(&mut self, t: &mut T, stages: &[Stage]) {
        for s in stages {
            let _ = self.rpc(t, s.server, s.session, Message::Close);
        }
    }

    pub fn check_budget<T: Transport>(&self, t: &T, started: f64) -> Result<(), ClientError> {
        match self.config.time_budget_s {
            Some(budget) if t.now() - started > budget => Err(ClientError::BudgetExceeded {
                budget_s: budget,
                elapsed_s: t.now() - started,
            }),
            _ => Ok(()),
        }
    }
}

/// Unwraps a STEP_RESULT with the expected number of entries.
pub(crate) fn step_outputs(msg: Message, width: usize, server: ServerId) -> Result<Vec<HiddenStates>, ClientError> {
    match msg {
        Message::StepResult(v) if v.len() == width => Ok(v),
        other => Err(ClientError::Protocol(format!(
            "{server} answered {:?} where {width} outputs were expected",
            other.kind()
        ))),
    }
}
