//! In-process swarm on the simulated network: block servers, the directory
//! and a virtual clock behind the [`Transport`] interface.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::directory::{Directory, ServerInfo, ANNOUNCE_PERIOD_S};
use crate::model::BlockParams;
use crate::netsim::{Message, NetError, SimNetwork};
use crate::server::{BlockServer, ComputeMode, ServerConfig, ServerError};
use crate::transport::{CallFailure, Transport};
use crate::types::{BlockRange, Endpoint, ServerId, SessionId};

pub struct SimSwarm {
    net: SimNetwork,
    servers: BTreeMap<ServerId, BlockServer>,
    directory: Directory,
    quantize: bool,
    reset_on_drop: bool,
    last_announce: f64,
}

impl SimSwarm {
    pub fn new(net: SimNetwork, n_blocks: usize) -> Self {
        Self {
            net,
            servers: BTreeMap::new(),
            directory: Directory::new(n_blocks),
            quantize: false,
            reset_on_drop: true,
            last_announce: f64::NEG_INFINITY,
        }
    }

    pub fn with_quantization(mut self, quantize: bool) -> Self {
        self.quantize = quantize;
        self
    }

    /// When set (the default), a lost request also discards the server's
    /// session, as if the pipeline stage had been reset.
    pub fn with_reset_on_drop(mut self, reset: bool) -> Self {
        self.reset_on_drop = reset;
        self
    }

    /// A swarm of servers with the given spans over shared weights.
    pub fn uniform(
        net: SimNetwork,
        params: Arc<Vec<BlockParams>>,
        spans: &[BlockRange],
        base: &ServerConfig,
    ) -> Result<Self, ServerError> {
        let mut swarm = Self::new(net, params.len());
        for (i, span) in spans.iter().enumerate() {
            let cfg = ServerConfig {
                id: i as u32,
                address: format!("sim://{i}"),
                blocks: Some(*span),
                capacity: span.len(),
                ..base.clone()
            };
            swarm.add_server(BlockServer::new(cfg, params.clone())?);
        }
        Ok(swarm)
    }

    pub fn add_server(&mut self, server: BlockServer) {
        let now = self.net.now();
        let id = server.id();
        if !self.net.is_online(Endpoint::Server(id), now) || server.is_crashed() {
            self.servers.insert(id, server);
            return;
        }
        self.directory
            .announce(server.info(now), now)
            .expect("servers hold valid spans");
        self.servers.insert(id, server);
    }

    pub fn net(&self) -> &SimNetwork {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut SimNetwork {
        &mut self.net
    }

    pub fn server(&self, id: ServerId) -> Option<&BlockServer> {
        self.servers.get(&id)
    }

    pub fn server_mut(&mut self, id: ServerId) -> Option<&mut BlockServer> {
        self.servers.get_mut(&id)
    }

    pub fn servers(&self) -> impl Iterator<Item = &BlockServer> {
        self.servers.values()
    }

    pub fn set_compute_mode(&mut self, mode: ComputeMode) {
        for s in self.servers.values_mut() {
            s.set_compute_mode(mode);
        }
    }

    /// Crashes a server: its state is gone and its endpoint refuses traffic.
    pub fn kill(&mut self, id: ServerId) {
        if let Some(s) = self.servers.get_mut(&id) {
            s.crash();
        }
        self.net.crash(Endpoint::Server(id));
        self.directory.remove(id);
    }

    /// Re-announces every live server at the current time.
    pub fn announce_all(&mut self) {
        let now = self.net.now();
        for s in self.servers.values() {
            if s.is_crashed() || !self.net.is_online(Endpoint::Server(s.id()), now) {
                continue;
            }
            self.directory.announce(s.info(now), now).expect("valid span");
        }
        self.last_announce = now;
    }

    pub fn snapshot(&mut self) -> Vec<ServerInfo> {
        let now = self.net.now();
        if now - self.last_announce >= ANNOUNCE_PERIOD_S {
            self.announce_all();
        }
        self.directory.snapshot(now)
    }

    /// One balancer round: every live server, in id order, checks whether to
    /// move and re-announces at once if it did.
    pub fn rebalance_round(&mut self) -> Vec<(ServerId, BlockRange)> {
        let mut moves = Vec::new();
        let ids: Vec<ServerId> = self.servers.keys().copied().collect();
        for id in ids {
            let now = self.net.now();
            let snapshot = self.snapshot();
            let server = self.servers.get_mut(&id).expect("known id");
            if server.is_crashed() || !self.net.is_online(Endpoint::Server(id), now) {
                continue;
            }
            if let Some(next) = server.rebalance_check(&snapshot) {
                self.directory.announce(server.info(now), now).expect("valid span");
                moves.push((id, next));
            }
        }
        moves
    }

    fn fail(&mut self, server: ServerId, cause: NetError) -> CallFailure {
        CallFailure { server, cause }
    }
}

impl Transport for SimSwarm {
    fn now(&self) -> f64 {
        self.net.now()
    }

    fn advance_to(&mut self, t: f64) {
        self.net.advance_to(t);
    }

    fn directory(&mut self) -> Vec<ServerInfo> {
        self.snapshot()
    }

    fn rtt_ms(&mut self, client: u32, server: ServerId) -> Option<f64> {
        self.net.ping(Endpoint::Client(client), Endpoint::Server(server)).ok()
    }

    fn call(&mut self, client: u32, server: ServerId, session: SessionId, mut msg: Message) -> Result<Message, CallFailure> {
        let from = Endpoint::Client(client);
        let to = Endpoint::Server(server);
        let q = self.quantize;
        let bytes = msg.framed_len(q);
        let kind = msg.kind();
        let override_p = self.servers.get(&server).and_then(|s| s.config().hooks.drop_prob);
        let base_p = self.net.profile().failure_prob;
        if let Some(p) = override_p {
            self.net.set_failure_prob(p);
        }
        let sent = self.net.send(from, to, kind, bytes);
        if override_p.is_some() {
            self.net.set_failure_prob(base_p);
        }
        match sent {
            Ok(arrival) => self.net.advance_to(arrival),
            Err(NetError::Dropped { detected_at }) => {
                self.net.advance_to(detected_at);
                if self.reset_on_drop {
                    if let Some(s) = self.servers.get_mut(&server) {
                        s.reset_session(session);
                    }
                }
                return Err(self.fail(server, NetError::Dropped { detected_at }));
            }
            Err(e) => {
                // a refused connection costs one round trip to notice
                let rtt = self.net.rtt_ms(from, to) / 1000.0;
                self.net.advance(rtt);
                return Err(self.fail(server, e));
            }
        }
        msg.apply_wire_transform(q);
        let now = self.net.now();
        let Some(srv) = self.servers.get_mut(&server) else {
            return Err(self.fail(server, NetError::Offline(to)));
        };
        let reply = match srv.handle(session, msg, now) {
            Ok(r) => r,
            Err(_) => {
                self.net.crash(to);
                self.directory.remove(server);
                let detected_at = now + self.net.loss_timeout_s(from, to, bytes);
                self.net.advance_to(detected_at);
                return Err(self.fail(server, NetError::Dropped { detected_at }));
            }
        };
        self.net.advance(reply.compute_s);
        if let Some((target, outputs)) = reply.relay {
            let push = Message::StepResult(outputs);
            let pushed = self
                .net
                .send(to, Endpoint::Server(target.server), push.kind(), push.framed_len(q));
            if pushed.is_ok() {
                let mut push = push;
                push.apply_wire_transform(q);
                if let (Some(t), Message::StepResult(v)) = (self.servers.get_mut(&target.server), push) {
                    t.deliver_relay(target.session, v);
                }
            }
        }
        let mut response = reply.message;
        match self.net.send(to, from, response.kind(), response.framed_len(q)) {
            Ok(arrival) => self.net.advance_to(arrival),
            Err(NetError::Dropped { detected_at }) => {
                self.net.advance_to(detected_at);
                return Err(self.fail(server, NetError::Dropped { detected_at }));
            }
            Err(e) => return Err(self.fail(server, e)),
        }
        response.apply_wire_transform(q);
        Ok(response)
    }

    fn quantize(&self) -> bool {
        self.quantize
    }
}

/// `stages` contiguous spans of near-equal length covering `n_blocks`, each
/// listed `replicas` times in a row.
pub fn replicated_spans(n_blocks: usize, stages: usize, replicas: usize) -> Vec<BlockRange> {
    let mut spans = Vec::with_capacity(stages * replicas);
    for s in 0..stages {
        let span = BlockRange::new(s * n_blocks / stages, (s + 1) * n_blocks / stages);
        spans.extend(std::iter::repeat(span).take(replicas));
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_tile_the_model() {
        let spans = replicated_spans(8, 4, 2);
        assert_eq!(spans.len(), 8);
        assert_eq!(spans[0], BlockRange::new(0, 2));
        assert_eq!(spans[1], BlockRange::new(0, 2));
        assert_eq!(spans[7], BlockRange::new(6, 8));
        let odd = replicated_spans(30, 4, 1);
        assert_eq!(odd.iter().map(BlockRange::len).collect::<Vec<_>>(), vec![7, 8, 7, 8]);
    }
}
