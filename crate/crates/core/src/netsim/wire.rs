//! Frame layout, little-endian throughout:
//!
//! ```text
//! magic "SWP1" | kind u8 | session u128 | payload_len u64 | payload | fnv1a64(payload)
//! ```

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::NetError;
use crate::types::SessionId;

pub const MAGIC: &[u8; 4] = b"SWP1";
pub const HEADER_LEN: usize = 4 + 1 + 16 + 8;
pub const FRAME_OVERHEAD: usize = HEADER_LEN + 8;
/// Refuse frames larger than this when reading from a socket.
pub const MAX_PAYLOAD: u64 = 1 << 30;

/// 64-bit FNV-1a.
#[derive(Debug, Clone)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    OpenSession = 1,
    Step = 2,
    StepResult = 3,
    Restore = 4,
    Reorder = 5,
    Forward = 6,
    Backward = 7,
    Ping = 8,
    Pong = 9,
    Announce = 10,
    Close = 11,
    Error = 12,
}

impl MessageKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageKind::*;
        Some(match v {
            1 => OpenSession,
            2 => Step,
            3 => StepResult,
            4 => Restore,
            5 => Reorder,
            6 => Forward,
            7 => Backward,
            8 => Ping,
            9 => Pong,
            10 => Announce,
            11 => Close,
            12 => Error,
            _ => return None,
        })
    }

    /// Requests that push activations to the next pipeline stage. These are
    /// the messages subject to the per-message failure probability.
    pub fn carries_activations(self) -> bool {
        matches!(
            self,
            MessageKind::Step | MessageKind::Restore | MessageKind::Forward | MessageKind::Backward
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub session_id: SessionId,
    pub payload: Vec<u8>,
    pub checksum: u64,
}

impl WireMessage {
    pub fn new(kind: MessageKind, session_id: SessionId, payload: Vec<u8>) -> Self {
        let checksum = fnv1a(&payload);
        Self {
            kind,
            session_id,
            payload,
            checksum,
        }
    }

    pub fn framed_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.framed_len());
        out.extend_from_slice(MAGIC);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NetError> {
        let mut cursor = bytes;
        let msg = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(NetError::Malformed("trailing bytes after frame".into()));
        }
        Ok(msg)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Reads one frame and verifies its checksum.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, NetError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(NetError::from)?;
        if &header[..4] != MAGIC {
            return Err(NetError::Malformed("bad magic".into()));
        }
        let kind = MessageKind::from_u8(header[4])
            .ok_or_else(|| NetError::Malformed(format!("unknown kind {}", header[4])))?;
        let session_id = u128::from_le_bytes(header[5..21].try_into().expect("16 bytes"));
        let len = u64::from_le_bytes(header[21..29].try_into().expect("8 bytes"));
        if len > MAX_PAYLOAD {
            return Err(NetError::Malformed(format!("payload of {len} bytes is too large")));
        }
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload).map_err(NetError::from)?;
        let mut sum = [0u8; 8];
        r.read_exact(&mut sum).map_err(NetError::from)?;
        let checksum = u64::from_le_bytes(sum);
        if checksum != fnv1a(&payload) {
            return Err(NetError::ChecksumMismatch);
        }
        Ok(Self {
            kind,
            session_id,
            payload,
            checksum,
        })
    }
}
