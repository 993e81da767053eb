//! What a client needs from the network: request/response calls to servers,
//! a directory view, latency probes and a clock.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::directory::ServerInfo;
use crate::netsim::tcp::TcpConnection;
use crate::netsim::{Message, NetError};
use crate::router::LatencyEstimator;
use crate::types::{ServerId, SessionId};

/// A call that produced no reply: lost, refused, or the server died.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("call to {server} failed: {cause}")]
pub struct CallFailure {
    pub server: ServerId,
    pub cause: NetError,
}

pub trait Transport {
    /// Seconds on the transport's clock.
    fn now(&self) -> f64;
    /// Waits until `t`.
    fn advance_to(&mut self, t: f64);
    fn directory(&mut self) -> Vec<ServerInfo>;
    /// Round trip to a server in milliseconds, `None` if unreachable.
    fn rtt_ms(&mut self, client: u32, server: ServerId) -> Option<f64>;
    fn call(&mut self, client: u32, server: ServerId, session: SessionId, msg: Message) -> Result<Message, CallFailure>;
    /// Whether activations travel quantized.
    fn quantize(&self) -> bool;
}

/// Real-network transport. Servers are discovered by pinging known
/// addresses; each PONG carries the server's current announcement.
pub struct TcpTransport {
    addresses: Vec<String>,
    known: BTreeMap<ServerId, String>,
    conns: HashMap<ServerId, TcpConnection>,
    latency: LatencyEstimator,
    timeout: Duration,
    quantize: bool,
    started: Instant,
}

impl TcpTransport {
    pub fn new(addresses: Vec<String>, timeout: Duration, quantize: bool) -> Self {
        Self {
            addresses,
            known: BTreeMap::new(),
            conns: HashMap::new(),
            latency: LatencyEstimator::new(0.5),
            timeout,
            quantize,
            started: Instant::now(),
        }
    }

    fn connection(&mut self, server: ServerId) -> Result<&mut TcpConnection, NetError> {
        if !self.conns.contains_key(&server) {
            let addr = self
                .known
                .get(&server)
                .ok_or_else(|| NetError::Config(format!("unknown server {server}")))?;
            let conn = TcpConnection::connect(addr, self.timeout, self.quantize)?;
            self.conns.insert(server, conn);
        }
        Ok(self.conns.get_mut(&server).expect("just inserted"))
    }
}

impl Transport for TcpTransport {
    fn now(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn advance_to(&mut self, t: f64) {
        let wait = t - self.now();
        if wait > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }

    fn directory(&mut self) -> Vec<ServerInfo> {
        let mut out = Vec::new();
        for addr in self.addresses.clone() {
            let Ok(mut conn) = TcpConnection::connect(&addr, self.timeout, self.quantize) else {
                continue;
            };
            let started = Instant::now();
            if let Ok(Message::Pong(Some(mut info))) = conn.call(0, &Message::Ping) {
                self.latency
                    .observe(info.server_id, started.elapsed().as_secs_f64() * 1000.0);
                info.address = addr.clone();
                info.announced_at = self.now();
                self.known.insert(info.server_id, addr);
                out.push(info);
            }
        }
        out
    }

    fn rtt_ms(&mut self, _client: u32, server: ServerId) -> Option<f64> {
        if let Some(rtt) = self.connection(server).ok().and_then(|c| c.ping().ok()) {
            return Some(self.latency.observe(server, rtt));
        }
        self.conns.remove(&server);
        None
    }

    fn call(&mut self, _client: u32, server: ServerId, session: SessionId, msg: Message) -> Result<Message, CallFailure> {
        let result = self.connection(server).and_then(|c| c.call(session, &msg));
        result.map_err(|cause| {
            self.conns.remove(&server);
            CallFailure { server, cause }
        })
    }

    fn quantize(&self) -> bool {
        self.quantize
    }
}
