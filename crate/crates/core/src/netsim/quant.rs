//! Dynamic blockwise 8-bit quantization of hidden states for the wire.
//!
//! Values are split into consecutive blocks of [`QUANT_BLOCK`] elements
//! (row-major order). Each block stores one `f32` scale `absmax / 127` and
//! one `i8` code per element, so the round-trip error of an element never
//! exceeds its block's scale.

use serde::{Deserialize, Serialize};

use crate::model::{HiddenStates, Matrix};

pub const QUANT_BLOCK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedHidden {
    pub block_size: usize,
    pub scales: Vec<f32>,
    pub codes: Vec<i8>,
    pub rows: usize,
    pub cols: usize,
    pub position_offset: usize,
}

impl QuantizedHidden {
    /// Bytes of the quantized body: one code per element plus one scale per block.
    pub fn body_len(&self) -> usize {
        self.codes.len() + 4 * self.scales.len()
    }
}

pub fn quantized_body_len(elements: usize) -> usize {
    elements + 4 * elements.div_ceil(QUANT_BLOCK)
}

pub fn quantize_hidden(h: &HiddenStates) -> QuantizedHidden {
    let values = &h.data.data;
    let n_blocks = values.len().div_ceil(QUANT_BLOCK);
    let mut scales = Vec::with_capacity(n_blocks);
    let mut codes = Vec::with_capacity(values.len());
    for block in values.chunks(QUANT_BLOCK) {
        let absmax = block.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = absmax / 127.0;
        scales.push(scale);
        if scale == 0.0 {
            codes.extend(std::iter::repeat(0i8).take(block.len()));
        } else {
            codes.extend(
                block
                    .iter()
                    .map(|v| (v / scale).round().clamp(-127.0, 127.0) as i8),
            );
        }
    }
    QuantizedHidden {
        block_size: QUANT_BLOCK,
        scales,
        codes,
        rows: h.data.rows,
        cols: h.data.cols,
        position_offset: h.position_offset,
    }
}

pub fn dequantize_hidden(q: &QuantizedHidden) -> HiddenStates {
    let mut data = Vec::with_capacity(q.codes.len());
    for (block, &scale) in q.codes.chunks(q.block_size).zip(&q.scales) {
        data.extend(block.iter().map(|&c| c as f32 * scale));
    }
    HiddenStates::new(Matrix::from_vec(q.rows, q.cols, data), q.position_offset)
}

/// Largest per-element error allowed for each block of `h`.
pub fn block_error_bounds(h: &HiddenStates) -> Vec<f32> {
    h.data
        .data
        .chunks(QUANT_BLOCK)
        .map(|b| b.iter().fold(0.0f32, |m, v| m.max(v.abs())) / 127.0)
        .collect()
}
