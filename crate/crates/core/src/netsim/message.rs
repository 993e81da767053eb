//! Typed protocol messages and their payload encodings.

use serde::{Deserialize, Serialize};

use super::quant::{dequantize_hidden, quantize_hidden, quantized_body_len, QuantizedHidden};
use super::wire::{fnv1a, MessageKind, WireMessage, FRAME_OVERHEAD};
use super::NetError;
use crate::directory::ServerInfo;
use crate::model::{HiddenStates, Matrix};
use crate::types::{ServerId, SessionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum ErrorCode {
    NotServing = 1,
    Desync = 2,
    NoSession = 3,
    BadRequest = 4,
    Capacity = 5,
    NoForwardRecord = 6,
    MissingRelay = 7,
    ChecksumMismatch = 8,
}

impl ErrorCode {
    fn from_u8(v: u8) -> Option<Self> {
        use ErrorCode::*;
        Some(match v {
            1 => NotServing,
            2 => Desync,
            3 => NoSession,
            4 => BadRequest,
            5 => Capacity,
            6 => NoForwardRecord,
            7 => MissingRelay,
            8 => ChecksumMismatch,
            _ => return None,
        })
    }
}

/// Where a server should push its step outputs in relay mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayTarget {
    pub server: ServerId,
    pub session: SessionId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepInputs {
    Inline(Vec<HiddenStates>),
    /// Inputs were pushed by the previous stage; `checksum` is what the
    /// client received from it.
    Relayed { checksum: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    OpenSession {
        start: usize,
        end: usize,
        width: usize,
        relay: Option<RelayTarget>,
    },
    Step(StepInputs),
    StepResult(Vec<HiddenStates>),
    Restore(Vec<HiddenStates>),
    /// One-based gather indices.
    Reorder(Vec<u32>),
    Forward { request: u64, inputs: Vec<HiddenStates> },
    Backward { request: u64, grads: Vec<HiddenStates> },
    Ping,
    Pong(Option<ServerInfo>),
    Announce(ServerInfo),
    Close,
    Error { code: ErrorCode, message: String },
}

const HIDDEN_HEADER: usize = 8 + 4 + 4 + 1;

fn hidden_len(h: &HiddenStates, quantize: bool) -> usize {
    let n = h.data.data.len();
    HIDDEN_HEADER + if quantize { 4 + quantized_body_len(n) } else { 4 * n }
}

fn hidden_list_len(list: &[HiddenStates], quantize: bool) -> usize {
    4 + list.iter().map(|h| hidden_len(h, quantize)).sum::<usize>()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_hidden_list(out: &mut Vec<u8>, list: &[HiddenStates], quantize: bool) {
    put_u32(out, list.len());
    for h in list {
        out.extend_from_slice(&(h.position_offset as u64).to_le_bytes());
        put_u32(out, h.data.rows);
        put_u32(out, h.data.cols);
        if quantize {
            out.push(1);
            let q = quantize_hidden(h);
            put_u32(out, q.block_size);
            for s in &q.scales {
                out.extend_from_slice(&s.to_le_bytes());
            }
            out.extend(q.codes.iter().map(|&c| c as u8));
        } else {
            out.push(0);
            for v in &h.data.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// Encoded hidden-state list; the unit both sides hash in relay mode.
pub fn encode_hidden_list(list: &[HiddenStates], quantize: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(hidden_list_len(list, quantize));
    put_hidden_list(&mut out, list, quantize);
    out
}

pub fn hidden_list_checksum(list: &[HiddenStates], quantize: bool) -> u64 {
    fnv1a(&encode_hidden_list(list, quantize))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.buf.len() < n {
            return Err(NetError::Malformed("payload truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128, NetError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, NetError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| NetError::Malformed("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn hidden_list(&mut self) -> Result<Vec<HiddenStates>, NetError> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let offset = self.u64()? as usize;
            let rows = self.u32()?;
            let cols = self.u32()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| NetError::Malformed("size overflow".into()))?;
            match self.u8()? {
                0 => {
                    let data = self.f32s(n)?;
                    out.push(HiddenStates::new(Matrix::from_vec(rows, cols, data), offset));
                }
                1 => {
                    let block_size = self.u32()?;
                    if block_size == 0 {
                        return Err(NetError::Malformed("zero quantization block".into()));
                    }
                    let scales = self.f32s(n.div_ceil(block_size))?;
                    let codes = self.take(n)?.iter().map(|&b| b as i8).collect();
                    out.push(dequantize_hidden(&QuantizedHidden {
                        block_size,
                        scales,
                        codes,
                        rows,
                        cols,
                        position_offset: offset,
                    }));
                }
                other => return Err(NetError::Malformed(format!("unknown hidden encoding {other}"))),
            }
        }
        Ok(out)
    }

    fn finish(self) -> Result<(), NetError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(NetError::Malformed("trailing payload bytes".into()))
        }
    }
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::OpenSession { .. } => MessageKind::OpenSession,
            Message::Step(_) => MessageKind::Step,
            Message::StepResult(_) => MessageKind::StepResult,
            Message::Restore(_) => MessageKind::Restore,
            Message::Reorder(_) => MessageKind::Reorder,
            Message::Forward { .. } => MessageKind::Forward,
            Message::Backward { .. } => MessageKind::Backward,
            Message::Ping => MessageKind::Ping,
            Message::Pong(_) => MessageKind::Pong,
            Message::Announce(_) => MessageKind::Announce,
            Message::Close => MessageKind::Close,
            Message::Error { .. } => MessageKind::Error,
        }
    }

    /// Hidden-state rows carried by this message, if any.
    pub fn hidden(&self) -> Option<&[HiddenStates]> {
        match self {
            Message::Step(StepInputs::Inline(v))
            | Message::StepResult(v)
            | Message::Restore(v)
            | Message::Forward { inputs: v, .. }
            | Message::Backward { grads: v, .. } => Some(v),
            _ => None,
        }
    }

    fn hidden_mut(&mut self) -> Option<&mut Vec<HiddenStates>> {
        match self {
            Message::Step(StepInputs::Inline(v))
            | Message::StepResult(v)
            | Message::Restore(v)
            | Message::Forward { inputs: v, .. }
            | Message::Backward { grads: v, .. } => Some(v),
            _ => None,
        }
    }

    /// Payload length computed from shapes, equal to `encode_payload().len()`.
    pub fn payload_len(&self, quantize: bool) -> usize {
        match self {
            Message::OpenSession { relay, .. } => 13 + if relay.is_some() { 20 } else { 0 },
            Message::Step(StepInputs::Inline(v)) => 1 + hidden_list_len(v, quantize),
            Message::Step(StepInputs::Relayed { .. }) => 1 + 8,
            Message::StepResult(v) | Message::Restore(v) => hidden_list_len(v, quantize),
            Message::Reorder(idx) => 4 + 4 * idx.len(),
            Message::Forward { inputs: v, .. } | Message::Backward { grads: v, .. } => {
                8 + hidden_list_len(v, quantize)
            }
            Message::Ping | Message::Close => 0,
            Message::Pong(None) => 1,
            Message::Pong(Some(info)) => 1 + info_json(info).len(),
            Message::Announce(info) => info_json(info).len(),
            Message::Error { message, .. } => 1 + message.len(),
        }
    }

    pub fn framed_len(&self, quantize: bool) -> usize {
        FRAME_OVERHEAD + self.payload_len(quantize)
    }

    /// Bytes of raw or quantized activation data only, without any framing.
    pub fn activation_bytes(&self, quantize: bool) -> usize {
        self.hidden()
            .map(|v| {
                v.iter()
                    .map(|h| if quantize { quantized_body_len(h.data.data.len()) } else { h.raw_bytes() })
                    .sum()
            })
            .unwrap_or(0)
    }

    pub fn encode_payload(&self, quantize: bool) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_len(quantize));
        match self {
            Message::OpenSession {
                start,
                end,
                width,
                relay,
            } => {
                put_u32(&mut out, *start);
                put_u32(&mut out, *end);
                put_u32(&mut out, *width);
                match relay {
                    None => out.push(0),
                    Some(r) => {
                        out.push(1);
                        out.extend_from_slice(&r.server.0.to_le_bytes());
                        out.extend_from_slice(&r.session.to_le_bytes());
                    }
                }
            }
            Message::Step(StepInputs::Inline(v)) => {
                out.push(0);
                put_hidden_list(&mut out, v, quantize);
            }
            Message::Step(StepInputs::Relayed { checksum }) => {
                out.push(1);
                out.extend_from_slice(&checksum.to_le_bytes());
            }
            Message::StepResult(v) | Message::Restore(v) => put_hidden_list(&mut out, v, quantize),
            Message::Reorder(idx) => {
                put_u32(&mut out, idx.len());
                for &i in idx {
                    out.extend_from_slice(&i.to_le_bytes());
                }
            }
            Message::Forward { request, inputs: v } | Message::Backward { request, grads: v } => {
                out.extend_from_slice(&request.to_le_bytes());
                put_hidden_list(&mut out, v, quantize);
            }
            Message::Ping | Message::Close => {}
            Message::Pong(info) => match info {
                None => out.push(0),
                Some(info) => {
                    out.push(1);
                    out.extend_from_slice(&info_json(info));
                }
            },
            Message::Announce(info) => out.extend_from_slice(&info_json(info)),
            Message::Error { code, message } => {
                out.push(*code as u8);
                out.extend_from_slice(message.as_bytes());
            }
        }
        out
    }

    pub fn to_wire(&self, session: SessionId, quantize: bool) -> WireMessage {
        WireMessage::new(self.kind(), session, self.encode_payload(quantize))
    }

    pub fn from_wire(wire: &WireMessage) -> Result<Self, NetError> {
        let mut r = Reader { buf: &wire.payload };
        let msg = match wire.kind {
            MessageKind::OpenSession => {
                let start = r.u32()?;
                let end = r.u32()?;
                let width = r.u32()?;
                let relay = match r.u8()? {
                    0 => None,
                    _ => {
                        let server = ServerId(r.u32()? as u32);
                        let session = r.u128()?;
                        Some(RelayTarget { server, session })
                    }
                };
                Message::OpenSession {
                    start,
                    end,
                    width,
                    relay,
                }
            }
            MessageKind::Step => match r.u8()? {
                0 => Message::Step(StepInputs::Inline(r.hidden_list()?)),
                _ => Message::Step(StepInputs::Relayed { checksum: r.u64()? }),
            },
            MessageKind::StepResult => Message::StepResult(r.hidden_list()?),
            MessageKind::Restore => Message::Restore(r.hidden_list()?),
            MessageKind::Reorder => {
                let n = r.u32()?;
                let mut idx = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    idx.push(r.u32()? as u32);
                }
                Message::Reorder(idx)
            }
            MessageKind::Forward => {
                let request = r.u64()?;
                Message::Forward {
                    request,
                    inputs: r.hidden_list()?,
                }
            }
            MessageKind::Backward => {
                let request = r.u64()?;
                Message::Backward {
                    request,
                    grads: r.hidden_list()?,
                }
            }
            MessageKind::Ping => Message::Ping,
            MessageKind::Close => Message::Close,
            MessageKind::Pong => match r.u8()? {
                0 => Message::Pong(None),
                _ => {
                    let rest = r.take(r.buf.len())?;
                    Message::Pong(Some(parse_info(rest)?))
                }
            },
            MessageKind::Announce => {
                let rest = r.take(r.buf.len())?;
                Message::Announce(parse_info(rest)?)
            }
            MessageKind::Error => {
                let code = ErrorCode::from_u8(r.u8()?)
                    .ok_or_else(|| NetError::Malformed("unknown error code".into()))?;
                let rest = r.take(r.buf.len())?;
                let message = String::from_utf8(rest.to_vec())
                    .map_err(|_| NetError::Malformed("error text is not utf-8".into()))?;
                Message::Error { code, message }
            }
        };
        r.finish()?;
        Ok(msg)
    }

    /// Applies the wire's value transform in place: with quantization on,
    /// activations come out as the receiver would decode them.
    pub fn apply_wire_transform(&mut self, quantize: bool) {
        if !quantize {
            return;
        }
        if let Some(list) = self.hidden_mut() {
            for h in list.iter_mut() {
                *h = dequantize_hidden(&quantize_hidden(h));
            }
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error {
            code,
            message: message.into(),
        }
    }
}

fn info_json(info: &ServerInfo) -> Vec<u8> {
    serde_json::to_vec(info).expect("server info serializes")
}

fn parse_info(bytes: &[u8]) -> Result<ServerInfo, NetError> {
    serde_json::from_slice(bytes).map_err(|e| NetError::Malformed(format!("bad server info: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directory::ServerState;
    use crate::types::BlockRange;
    use proptest::prelude::*;

    fn hidden(rows: usize, cols: usize, offset: usize, seed: u64) -> HiddenStates {
        let mut rng = crate::model::SplitMix64::new(seed);
        let data = (0..rows * cols).map(|_| rng.uniform(3.0)).collect();
        HiddenStates::new(Matrix::from_vec(rows, cols, data), offset)
    }

    fn samples() -> Vec<Message> {
        let info = ServerInfo {
            server_id: ServerId(3),
            address: "127.0.0.1:9000".into(),
            blocks: BlockRange::new(0, 4),
            throughput: 12.5,
            state: ServerState::Online,
            announced_at: 1.0,
        };
        vec![
            Message::OpenSession { start: 1, end: 5, width: 2, relay: None },
            Message::OpenSession {
                start: 0,
                end: 2,
                width: 1,
                relay: Some(RelayTarget { server: ServerId(9), session: 77 }),
            },
            Message::Step(StepInputs::Inline(vec![hidden(1, 8, 4, 1), hidden(1, 8, 4, 2)])),
            Message::Step(StepInputs::Relayed { checksum: 0xdead }),
            Message::StepResult(vec![hidden(3, 8, 0, 3)]),
            Message::Restore(vec![hidden(5, 8, 0, 4)]),
            Message::Reorder(vec![2, 2, 1, 3, 2]),
            Message::Forward { request: 9, inputs: vec![hidden(4, 8, 0, 5)] },
            Message::Backward { request: 9, grads: vec![hidden(4, 8, 0, 6)] },
            Message::Ping,
            Message::Pong(None),
            Message::Pong(Some(info.clone())),
            Message::Announce(info),
            Message::Close,
            Message::error(ErrorCode::Desync, "offset 3, cache 2"),
        ]
    }

    #[test]
    fn every_kind_round_trips_and_length_formula_is_exact() {
        for m in samples() {
            let wire = m.to_wire(42, false);
            assert_eq!(wire.payload.len(), m.payload_len(false), "{:?}", m.kind());
            assert_eq!(wire.framed_len(), m.framed_len(false));
            let bytes = wire.encode();
            let back = Message::from_wire(&WireMessage::decode(&bytes).unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn quantized_payloads_match_length_formula() {
        for m in samples() {
            assert_eq!(m.encode_payload(true).len(), m.payload_len(true), "{:?}", m.kind());
        }
    }

    #[test]
    fn quantized_decode_equals_wire_transform() {
        let m = Message::StepResult(vec![hidden(7, 64, 0, 11)]);
        let decoded = Message::from_wire(&m.to_wire(1, true)).unwrap();
        let mut local = m.clone();
        local.apply_wire_transform(true);
        assert_eq!(decoded, local);
    }

    #[test]
    fn quantization_halves_activation_traffic() {
        let m = Message::StepResult(vec![hidden(1, 64, 0, 1)]);
        assert!(m.activation_bytes(true) * 2 < m.activation_bytes(false));
        assert!(m.framed_len(true) < m.framed_len(false));
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let m = Message::Restore(vec![hidden(2, 8, 0, 1)]);
        let mut wire = m.to_wire(1, false);
        wire.payload.truncate(10);
        assert!(matches!(Message::from_wire(&wire), Err(NetError::Malformed(_))));
    }

    proptest! {
        #[test]
        fn hidden_lists_round_trip(rows in 1usize..5, cols in 1usize..20, count in 0usize..4, offset in 0usize..100, seed in any::<u64>()) {
            let list: Vec<_> = (0..count).map(|i| hidden(rows, cols, offset, seed ^ i as u64)).collect();
            let m = Message::Restore(list);
            let back = Message::from_wire(&m.to_wire(5, false)).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
