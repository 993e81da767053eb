use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wire::MessageKind;
use super::NetError;
use crate::types::{Endpoint, ServerId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetProfile {
    pub bandwidth_bps: f64,
    pub rtt_ms: f64,
    /// Per-message failure probability.
    pub failure_prob: f64,
}

impl Default for NetProfile {
    fn default() -> Self {
        Self {
            bandwidth_bps: 1e9,
            rtt_ms: 1.0,
            failure_prob: 0.0,
        }
    }
}

impl NetProfile {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(NetError::Config("bandwidth must be positive".into()));
        }
        if !(self.rtt_ms >= 0.0 && self.rtt_ms.is_finite()) {
            return Err(NetError::Config("rtt must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_prob) {
            return Err(NetError::Config("failure probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn transfer_s(&self, bytes: usize) -> f64 {
        bytes as f64 * 8.0 / self.bandwidth_bps
    }

    /// One-way delivery delay of a `bytes`-long frame.
    pub fn one_way_s(&self, rtt_ms: f64, bytes: usize) -> f64 {
        rtt_ms / 2000.0 + self.transfer_s(bytes)
    }

    /// How long a sender waits for an acknowledgment before declaring loss.
    pub fn loss_timeout_s(&self, rtt_ms: f64, bytes: usize) -> f64 {
        rtt_ms * 4.0 / 1000.0 + 2.0 * self.transfer_s(bytes)
    }
}

/// On/off timelines per server in simulated seconds. Servers without an
/// entry are always on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChurnSchedule {
    pub intervals: BTreeMap<ServerId, Vec<(f64, f64)>>,
}

impl ChurnSchedule {
    pub fn add(&mut self, server: ServerId, on: f64, off: f64) -> Result<(), NetError> {
        if !(on < off) {
            return Err(NetError::Config(format!("interval [{on}, {off}) is empty")));
        }
        let list = self.intervals.entry(server).or_default();
        if let Some(&(_, last_off)) = list.last() {
            if on < last_off {
                return Err(NetError::Config(format!(
                    "interval [{on}, {off}) for {server} overlaps or precedes an earlier one"
                )));
            }
        }
        list.push((on, off));
        Ok(())
    }

    pub fn is_online(&self, server: ServerId, t: f64) -> bool {
        match self.intervals.get(&server) {
            None => true,
            Some(list) => list.iter().any(|&(on, off)| on <= t && t < off),
        }
    }

    /// All on/off transitions, ordered by time then server id.
    pub fn transitions(&self) -> Vec<(f64, ServerId, bool)> {
        let mut out: Vec<_> = self
            .intervals
            .iter()
            .flat_map(|(&s, list)| list.iter().flat_map(move |&(on, off)| [(on, s, true), (off, s, false)]))
            .collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureScope {
    /// Only activation-carrying requests may be lost.
    Activations,
    AllMessages,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub messages: u64,
    pub bytes: u64,
    pub drops: u64,
    pub connection_errors: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Delivered,
    Dropped,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// When the frame left the sender.
    pub time: f64,
    /// Arrival for delivered frames, loss detection for dropped ones, the
    /// send time otherwise.
    pub done: f64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: MessageKind,
    pub bytes: usize,
    pub outcome: Outcome,
}

/// Deterministic network with a virtual clock.
///
/// Callers drive time explicitly: [`SimNetwork::send`] reports when a frame
/// would arrive (or when its loss is detected) and the caller advances the
/// clock to that instant. Arrivals on a link are FIFO.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    now: f64,
    profile: NetProfile,
    scope: FailureScope,
    rtt_overrides: HashMap<Endpoint, f64>,
    churn: ChurnSchedule,
    crashed: HashSet<Endpoint>,
    rng: ChaCha8Rng,
    links: BTreeMap<(Endpoint, Endpoint), LinkStats>,
    last_arrival: HashMap<(Endpoint, Endpoint), f64>,
    trace: Option<Vec<TraceEvent>>,
    trace_cap: usize,
    trace_truncated: bool,
    ping_deadline_ms: f64,
}

impl SimNetwork {
    pub fn new(profile: NetProfile, seed: u64) -> Result<Self, NetError> {
        profile.validate()?;
        Ok(Self {
            now: 0.0,
            profile,
            scope: FailureScope::Activations,
            rtt_overrides: HashMap::new(),
            churn: ChurnSchedule::default(),
            crashed: HashSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            links: BTreeMap::new(),
            last_arrival: HashMap::new(),
            trace: None,
            trace_cap: usize::MAX,
            trace_truncated: false,
            ping_deadline_ms: 5_000.0,
        })
    }

    pub fn with_scope(mut self, scope: FailureScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Stops recording after `cap` events; see [`SimNetwork::trace_truncated`].
    pub fn with_trace_cap(mut self, cap: usize) -> Self {
        self.trace = Some(Vec::new());
        self.trace_cap = cap;
        self
    }

    pub fn trace_truncated(&self) -> bool {
        self.trace_truncated
    }

    pub fn set_churn(&mut self, churn: ChurnSchedule) {
        self.churn = churn;
    }

    pub fn churn(&self) -> &ChurnSchedule {
        &self.churn
    }

    pub fn set_rtt(&mut self, endpoint: Endpoint, rtt_ms: f64) {
        self.rtt_overrides.insert(endpoint, rtt_ms);
    }

    pub fn set_ping_deadline_ms(&mut self, ms: f64) {
        self.ping_deadline_ms = ms;
    }

    pub fn profile(&self) -> &NetProfile {
        &self.profile
    }

    pub fn set_failure_prob(&mut self, p: f64) {
        self.profile.failure_prob = p;
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn advance(&mut self, seconds: f64) {
        debug_assert!(seconds >= 0.0);
        self.now += seconds;
    }

    pub fn advance_to(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }

    pub fn rtt_ms(&self, a: Endpoint, b: Endpoint) -> f64 {
        let ra = self.rtt_overrides.get(&a).copied();
        let rb = self.rtt_overrides.get(&b).copied();
        match (ra, rb) {
            (Some(x), Some(y)) => x.max(y),
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => self.profile.rtt_ms,
        }
    }

    /// Marks an endpoint as permanently down (crash injection).
    pub fn crash(&mut self, endpoint: Endpoint) {
        self.crashed.insert(endpoint);
    }

    pub fn is_online(&self, endpoint: Endpoint, t: f64) -> bool {
        if self.crashed.contains(&endpoint) {
            return false;
        }
        match endpoint {
            Endpoint::Server(id) => self.churn.is_online(id, t),
            _ => true,
        }
    }

    pub fn loss_timeout_s(&self, from: Endpoint, to: Endpoint, bytes: usize) -> f64 {
        self.profile.loss_timeout_s(self.rtt_ms(from, to), bytes)
    }

    fn record(&mut self, from: Endpoint, to: Endpoint, kind: MessageKind, bytes: usize, outcome: Outcome, done: f64) {
        let stats = self.links.entry((from, to)).or_default();
        stats.messages += 1;
        stats.bytes += bytes as u64;
        match outcome {
            Outcome::Dropped => stats.drops += 1,
            Outcome::Offline => stats.connection_errors += 1,
            Outcome::Delivered => {}
        }
        if let Some(trace) = self.trace.as_mut() {
            if trace.len() >= self.trace_cap {
                self.trace_truncated = true;
                return;
            }
            trace.push(TraceEvent {
                time: self.now,
                done,
                from,
                to,
                kind,
                bytes,
                outcome,
            });
        }
    }

    /// Sends a `bytes`-long frame at the current time.
    ///
    /// Returns the arrival time. A lost frame yields [`NetError::Dropped`]
    /// carrying the time at which the sender notices; a destination that is
    /// offline yields [`NetError::Offline`].
    pub fn send(&mut self, from: Endpoint, to: Endpoint, kind: MessageKind, bytes: usize) -> Result<f64, NetError> {
        if !self.is_online(to, self.now) {
            self.record(from, to, kind, bytes, Outcome::Offline, self.now);
            return Err(NetError::Offline(to));
        }
        let lossy = match self.scope {
            FailureScope::Activations => kind.carries_activations(),
            FailureScope::AllMessages => true,
        };
        let p = self.profile.failure_prob;
        let rtt = self.rtt_ms(from, to);
        if lossy && p > 0.0 && (p >= 1.0 || self.rng.gen::<f64>() < p) {
            let detected_at = self.now + self.profile.loss_timeout_s(rtt, bytes);
            self.record(from, to, kind, bytes, Outcome::Dropped, detected_at);
            return Err(NetError::Dropped { detected_at });
        }
        let mut arrival = self.now + self.profile.one_way_s(rtt, bytes);
        let last = self.last_arrival.entry((from, to)).or_insert(f64::NEG_INFINITY);
        if arrival < *last {
            arrival = *last;
        }
        *last = arrival;
        self.record(from, to, kind, bytes, Outcome::Delivered, arrival);
        Ok(arrival)
    }

    /// Round-trip time to `to` in milliseconds. The simulator reports the
    /// link's configured value exactly and does not advance the clock.
    pub fn ping(&mut self, from: Endpoint, to: Endpoint) -> Result<f64, NetError> {
        let header = super::wire::FRAME_OVERHEAD;
        if !self.is_online(to, self.now) {
            self.record(from, to, MessageKind::Ping, header, Outcome::Offline, self.now);
            return Err(NetError::Unreachable {
                deadline_ms: self.ping_deadline_ms,
            });
        }
        let rtt = self.rtt_ms(from, to);
        if rtt > self.ping_deadline_ms {
            return Err(NetError::Unreachable {
                deadline_ms: self.ping_deadline_ms,
            });
        }
        let now = self.now;
        self.record(from, to, MessageKind::Ping, header, Outcome::Delivered, now);
        self.record(to, from, MessageKind::Pong, header, Outcome::Delivered, now);
        Ok(rtt)
    }

    pub fn link(&self, from: Endpoint, to: Endpoint) -> LinkStats {
        self.links.get(&(from, to)).copied().unwrap_or_default()
    }

    pub fn links(&self) -> &BTreeMap<(Endpoint, Endpoint), LinkStats> {
        &self.links
    }

    pub fn total_bytes(&self) -> u64 {
        self.links.values().map(|s| s.bytes).sum()
    }

    pub fn trace(&self) -> Option<&[TraceEvent]> {
        self.trace.as_deref()
    }
}

/// Time-ordered event queue; events at equal times pop in insertion order.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
}

#[derive(Debug)]
struct Entry<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, event: E) {
        self.heap.push(Entry {
            time,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(f64, E)> {
        self.heap.pop().map(|e| (e.time, e.event))
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
