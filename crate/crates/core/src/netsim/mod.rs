//! Transport layer: wire codec (including blockwise activation quantization),
//! a deterministic simulated network with a virtual clock, and a TCP backing
//! that speaks the same frames.

mod message;
mod quant;
mod sim;
pub mod tcp;
mod wire;

use thiserror::Error;

use crate::types::Endpoint;

pub use message::{
    encode_hidden_list, hidden_list_checksum, ErrorCode, Message, RelayTarget, StepInputs,
};
pub use quant::{
    block_error_bounds, dequantize_hidden, quantize_hidden, quantized_body_len, QuantizedHidden,
    QUANT_BLOCK,
};
pub use sim::{
    ChurnSchedule, EventQueue, FailureScope, LinkStats, NetProfile, Outcome, SimNetwork,
    TraceEvent,
};
pub use wire::{fnv1a, Fnv1a, MessageKind, WireMessage, FRAME_OVERHEAD, HEADER_LEN, MAGIC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("{0:?} is offline")]
    Offline(Endpoint),
    #[error("message lost; detected at t={detected_at:.6}s")]
    Dropped { detected_at: f64 },
    #[error("no reply within {deadline_ms} ms")]
    Unreachable { deadline_ms: f64 },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for NetError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => {
                NetError::Unreachable { deadline_ms: f64::NAN }
            }
            _ => NetError::Io(e.to_string()),
        }
    }
}
