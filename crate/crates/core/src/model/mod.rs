//! Deterministic toy transformer used as the compute payload of the swarm.
//!
//! Blocks are pre-norm residual units (`x + Attn(LN(x))`, then `+ MLP(LN(x'))`)
//! with GELU and a 4x MLP expansion. All weights come from splitmix64 streams
//! keyed by `(seed, block, tensor role)`, so two processes that agree on a
//! [`ModelConfig`] agree on every weight bit.

mod backward;
mod block;
mod generate;
pub mod tensor;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::block_backward;
pub(crate) use backward::training_forward;
pub use block::{block_forward, forward_through, KvCache, KvDelta};
pub use generate::{
    argmax, initial_beam_scores, logits, reference_beam_search, reference_generate, select_beams,
    Beam, DecodeMode, TokenChooser,
};
pub use tensor::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("state desync: cache holds {cache_len} positions but inputs start at {offset}")]
    Desync { cache_len: usize, offset: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence of {requested} positions exceeds max_seq_len {max}")]
    Capacity { requested: usize, max: usize },
    #[error("empty prefix")]
    EmptyPrefix,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 8,
            hidden_dim: 64,
            n_heads: 4,
            vocab_size: 256,
            max_seq_len: 2048,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_blocks == 0 {
            return Err(ModelError::Config("n_blocks must be at least 1".into()));
        }
        if self.n_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config("vocab_size must be at least 2".into()));
        }
        if self.max_seq_len == 0 {
            return Err(ModelError::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Parameter count of one block: four attention projections, the two MLP
    /// matrices and two layer-norm gain/bias pairs.
    pub fn block_param_count(&self) -> usize {
        let d = self.hidden_dim;
        4 * d * d + 8 * d * d + 4 * d
    }

    pub fn param_count(&self) -> usize {
        self.n_blocks * self.block_param_count() + self.vocab_size * self.hidden_dim
    }
}

/// Activations for a contiguous run of positions of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStates {
    pub data: Matrix,
    /// Absolute sequence index of the first row.
    pub position_offset: usize,
}

impl HiddenStates {
    pub fn new(data: Matrix, position_offset: usize) -> Self {
        Self {
            data,
            position_offset,
        }
    }

    pub fn rows(&self) -> usize {
        self.data.rows
    }

    pub fn hidden_dim(&self) -> usize {
        self.data.cols
    }

    pub fn end(&self) -> usize {
        self.position_offset + self.data.rows
    }

    /// Concatenates consecutive chunks into one block of history.
    pub fn concat(chunks: &[HiddenStates], hidden_dim: usize) -> HiddenStates {
        let offset = chunks.first().map(|c| c.position_offset).unwrap_or(0);
        let mut data = Matrix::zeros(0, hidden_dim);
        for c in chunks {
            debug_assert_eq!(c.position_offset, offset + data.rows);
            data.extend_rows(&c.data);
        }
        HiddenStates::new(data, offset)
    }

    pub fn raw_bytes(&self) -> usize {
        self.data.data.len() * 4
    }
}

/// Roles used to key the weight streams.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Role {
    Ln1Gain = 1,
    Ln1Bias,
    Wq,
    Wk,
    Wv,
    Wo,
    Ln2Gain,
    Ln2Bias,
    W1,
    W2,
    Embedding = 100,
    SoftPrompt,
}

/// splitmix64 generator; the only source of randomness for weights.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[-a, a]` built from the top 24 bits.
    pub fn uniform(&mut self, a: f32) -> f32 {
        let u = (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32;
        a * (2.0 * u - 1.0)
    }

    fn keyed(seed: u64, block: u64, role: Role) -> Self {
        let mut k = SplitMix64::new(seed ^ block.wrapping_mul(0xA24B_AED4_963E_E407));
        let a = k.next_u64();
        let mut r = SplitMix64::new(a ^ (role as u64).wrapping_mul(0x9FB2_1C65_1E98_DF25));
        Self::new(r.next_u64())
    }
}

fn fill(rows: usize, cols: usize, rng: &mut SplitMix64, a: f32, base: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| base + rng.uniform(a)).collect();
    Matrix::from_vec(rows, cols, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub index: usize,
    pub n_heads: usize,
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    /// `[d × 4d]`
    pub w1: Matrix,
    /// `[4d × d]`
    pub w2: Matrix,
}

impl BlockParams {
    pub fn generate(config: &ModelConfig, index: usize) -> Self {
        let d = config.hidden_dim;
        let a = 1.0 / (d as f32).sqrt();
        let s = config.seed;
        let b = index as u64;
        let vec_of = |role, base| fill(1, d, &mut SplitMix64::keyed(s, b, role), a, base).data;
        let mat_of = |role, r, c| fill(r, c, &mut SplitMix64::keyed(s, b, role), a, 0.0);
        Self {
            index,
            n_heads: config.n_heads,
            ln1_gain: vec_of(Role::Ln1Gain, 1.0),
            ln1_bias: vec_of(Role::Ln1Bias, 0.0),
            wq: mat_of(Role::Wq, d, d),
            wk: mat_of(Role::Wk, d, d),
            wv: mat_of(Role::Wv, d, d),
            wo: mat_of(Role::Wo, d, d),
            ln2_gain: vec_of(Role::Ln2Gain, 1.0),
            ln2_bias: vec_of(Role::Ln2Bias, 0.0),
            w1: mat_of(Role::W1, d, 4 * d),
            w2: mat_of(Role::W2, 4 * d, d),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.wq.rows
    }

    pub fn param_count(&self) -> usize {
        let vecs = self.ln1_gain.len() + self.ln1_bias.len() + self.ln2_gain.len() + self.ln2_bias.len();
        let mats = [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2]
            .iter()
            .map(|m| m.data.len())
            .sum::<usize>();
        vecs + mats
    }

    fn tensors(&self) -> [&[f32]; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq.data,
            &self.wk.data,
            &self.wv.data,
            &self.wo.data,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1.data,
            &self.w2.data,
        ]
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn content_hash(&self) -> u64 {
        let mut h = crate::netsim::Fnv1a::new();
        for t in self.tensors() {
            for v in t {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Parameters held by the client: the tied embedding and an optional
/// trainable soft prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientParams {
    pub embedding: Matrix,
    pub soft_prompt: Option<Matrix>,
}

impl ClientParams {
    pub fn generate(config: &ModelConfig) -> Self {
        let a = 1.0 / (config.hidden_dim as f32).sqrt();
        let mut rng = SplitMix64::keyed(config.seed, u64::MAX, Role::Embedding);
        Self {
            embedding: fill(config.vocab_size, config.hidden_dim, &mut rng, a, 0.0),
            soft_prompt: None,
        }
    }

    /// Deterministic small-scale initialisation of a `len`-row soft prompt.
    pub fn init_soft_prompt(&mut self, config: &ModelConfig, len: usize) {
        let a = 0.1 / (config.hidden_dim as f32).sqrt();
        let mut rng = SplitMix64::keyed(config.seed, u64::MAX - 1, Role::SoftPrompt);
        self.soft_prompt = Some(fill(len, config.hidden_dim, &mut rng, a, 0.0));
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows
    }

    pub fn hidden_dim(&self) -> usize {
        self.embedding.cols
    }

    /// Embeds `tokens` placed at absolute positions starting at `offset`.
    pub fn embed(&self, tokens: &[u32], offset: usize) -> HiddenStates {
        let d = self.hidden_dim();
        let mut m = Matrix::zeros(tokens.len(), d);
        for (r, &t) in tokens.iter().enumerate() {
            m.row_mut(r).copy_from_slice(self.embedding.row(t as usize));
        }
        HiddenStates::new(m, offset)
    }
}

/// The full set of weights, shared read-only between servers and the oracle.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Arc<Vec<BlockParams>>,
    pub client: ClientParams,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let (blocks, client) = init_model(&config)?;
        Ok(Self {
            config,
            blocks: Arc::new(blocks),
            client,
        })
    }
}

pub fn init_model(config: &ModelConfig) -> Result<(Vec<BlockParams>, ClientParams), ModelError> {
    config.validate()?;
    let blocks = (0..config.n_blocks)
        .map(|i| BlockParams::generate(config, i))
        .collect();
    Ok((blocks, ClientParams::generate(config)))
}
