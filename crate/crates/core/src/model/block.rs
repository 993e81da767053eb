use super::tensor::{dot, gelu, layer_norm, softmax_in_place, Matrix};
use super::{BlockParams, HiddenStates, ModelError};
use crate::parallel::for_each_chunk_mut;

/// Attention keys and values for one block of one sequence, `[t × d]` each
/// with heads laid out contiguously (`d = n_heads * head_dim`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCache {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub dim: usize,
}

/// Rows to append to a [`KvCache`] after a forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct KvDelta {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub dim: usize,
}

impl KvCache {
    pub fn new(dim: usize) -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.keys.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn append(&mut self, delta: KvDelta) {
        debug_assert_eq!(delta.dim, self.dim);
        self.keys.extend_from_slice(&delta.keys);
        self.values.extend_from_slice(&delta.values);
    }

    #[inline]
    fn key(&self, j: usize) -> &[f32] {
        &self.keys[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    fn value(&self, j: usize) -> &[f32] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }
}

impl KvDelta {
    pub fn len(&self) -> usize {
        self.keys.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    #[inline]
    fn key(&self, j: usize) -> &[f32] {
        &self.keys[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    fn value(&self, j: usize) -> &[f32] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }
}

/// Per-row working buffers for the attention and MLP half of a block.
struct RowScratch {
    scores: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    x2: Vec<f32>,
    h: Vec<f32>,
    mid: Vec<f32>,
    mlp: Vec<f32>,
}

impl RowScratch {
    fn new(d: usize, max_len: usize) -> Self {
        Self {
            scores: Vec::with_capacity(max_len),
            attn: vec![0.0; d],
            proj: vec![0.0; d],
            x2: vec![0.0; d],
            h: vec![0.0; d],
            mid: vec![0.0; 4 * d],
            mlp: vec![0.0; d],
        }
    }
}

/// Runs one block over new positions given the cache of earlier ones.
///
/// Returns outputs for the new rows only plus the K/V rows the caller must
/// append. Attention for row `r` reads cache rows `0..len` then new rows
/// `0..=r`, always in that order.
pub fn block_forward(
    params: &BlockParams,
    inputs: &HiddenStates,
    cache: &KvCache,
) -> Result<(HiddenStates, KvDelta), ModelError> {
    let d = params.hidden_dim();
    if inputs.hidden_dim() != d {
        return Err(ModelError::Shape(format!(
            "inputs have {} columns, block expects {d}",
            inputs.hidden_dim()
        )));
    }
    if cache.dim != d && !cache.is_empty() {
        return Err(ModelError::Shape("cache width does not match block".into()));
    }
    let past = cache.len();
    if past != inputs.position_offset {
        return Err(ModelError::Desync {
            cache_len: past,
            offset: inputs.position_offset,
        });
    }
    let n = inputs.rows();
    let n_heads = params.n_heads;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();

    // q, k and v side by side per row
    let mut qkv = vec![0.0f32; n * 3 * d];
    for_each_chunk_mut(
        &mut qkv,
        3 * d,
        || vec![0.0f32; d],
        |r, row, h| {
            layer_norm(inputs.data.row(r), &params.ln1_gain, &params.ln1_bias, h);
            let (qr, kv) = row.split_at_mut(d);
            let (kr, vr) = kv.split_at_mut(d);
            params.wq.vec_mul(h, qr);
            params.wk.vec_mul(h, kr);
            params.wv.vec_mul(h, vr);
        },
    );
    let mut delta = KvDelta {
        keys: Vec::with_capacity(n * d),
        values: Vec::with_capacity(n * d),
        dim: d,
    };
    for row in qkv.chunks(3 * d) {
        delta.keys.extend_from_slice(&row[d..2 * d]);
        delta.values.extend_from_slice(&row[2 * d..]);
    }

    let mut out = Matrix::zeros(n, d);
    let delta_ref = &delta;
    for_each_chunk_mut(
        &mut out.data,
        d,
        || RowScratch::new(d, past + n),
        |r, out_row, sc| {
            let qr = &qkv[r * 3 * d..r * 3 * d + d];
            for head in 0..n_heads {
                let hs = head * hd..(head + 1) * hd;
                let qh = &qr[hs.clone()];
                sc.scores.clear();
                for j in 0..past {
                    sc.scores.push(dot(qh, &cache.key(j)[hs.clone()]) * scale);
                }
                for j in 0..=r {
                    sc.scores.push(dot(qh, &delta_ref.key(j)[hs.clone()]) * scale);
                }
                softmax_in_place(&mut sc.scores);
                let acc = &mut sc.attn[hs.clone()];
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (j, &p) in sc.scores.iter().enumerate() {
                    let v = if j < past {
                        &cache.value(j)[hs.clone()]
                    } else {
                        &delta_ref.value(j - past)[hs.clone()]
                    };
                    for (a, &vv) in acc.iter_mut().zip(v) {
                        *a += p * vv;
                    }
                }
            }
            params.wo.vec_mul(&sc.attn, &mut sc.proj);
            for ((o, &x), &p) in sc.x2.iter_mut().zip(inputs.data.row(r)).zip(&sc.proj) {
                *o = x + p;
            }
            layer_norm(&sc.x2, &params.ln2_gain, &params.ln2_bias, &mut sc.h);
            params.w1.vec_mul(&sc.h, &mut sc.mid);
            sc.mid.iter_mut().for_each(|v| *v = gelu(*v));
            params.w2.vec_mul(&sc.mid, &mut sc.mlp);
            for ((o, &a), &m) in out_row.iter_mut().zip(&sc.x2).zip(&sc.mlp) {
                *o = a + m;
            }
        },
    );
    Ok((HiddenStates::new(out, inputs.position_offset), delta))
}

/// Runs a sequence through consecutive blocks, appending to each block's cache.
pub fn forward_through(
    blocks: &[BlockParams],
    inputs: HiddenStates,
    caches: &mut [KvCache],
) -> Result<HiddenStates, ModelError> {
    debug_assert_eq!(blocks.len(), caches.len());
    let mut x = inputs;
    for (params, cache) in blocks.iter().zip(caches.iter_mut()) {
        let (y, delta) = block_forward(params, &x, cache)?;
        cache.append(delta);
        x = y;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn small() -> (Vec<BlockParams>, ModelConfig) {
        let cfg = ModelConfig {
            n_blocks: 2,
            hidden_dim: 16,
            n_heads: 2,
            vocab_size: 32,
            max_seq_len: 64,
            seed: 3,
        };
        (init_model(&cfg).unwrap().0, cfg)
    }

    fn inputs(rows: usize, d: usize, offset: usize, seed: u64) -> HiddenStates {
        let mut rng = crate::model::SplitMix64::new(seed);
        let data = (0..rows * d).map(|_| rng.uniform(1.0)).collect();
        HiddenStates::new(Matrix::from_vec(rows, d, data), offset)
    }

    #[test]
    fn single_token_shapes() {
        let (blocks, cfg) = small();
        let x = inputs(1, cfg.hidden_dim, 0, 1);
        let (y, delta) = block_forward(&blocks[0], &x, &KvCache::new(cfg.hidden_dim)).unwrap();
        assert_eq!((y.rows(), y.hidden_dim()), (1, cfg.hidden_dim));
        assert_eq!(delta.len(), 1);
    }

    #[test]
    fn offset_mismatch_is_desync() {
        let (blocks, cfg) = small();
        let mut cache = KvCache::new(cfg.hidden_dim);
        let (_, delta) = block_forward(&blocks[0], &inputs(2, cfg.hidden_dim, 0, 1), &cache).unwrap();
        cache.append(delta);
        let err = block_forward(&blocks[0], &inputs(1, cfg.hidden_dim, 3, 2), &cache).unwrap_err();
        assert_eq!(err, ModelError::Desync { cache_len: 2, offset: 3 });
    }

    #[test]
    fn token_by_token_equals_full_sequence() {
        let (blocks, cfg) = small();
        let d = cfg.hidden_dim;
        let full = inputs(7, d, 0, 9);
        let (whole, _) = block_forward(&blocks[0], &full, &KvCache::new(d)).unwrap();
        let mut cache = KvCache::new(d);
        for t in 0..7 {
            let step = HiddenStates::new(full.data.slice_rows(t, t + 1), t);
            let (y, delta) = block_forward(&blocks[0], &step, &cache).unwrap();
            cache.append(delta);
            let diff = y.data.max_abs_diff(&whole.data.slice_rows(t, t + 1));
            assert!(diff <= 1e-5, "row {t} differs by {diff}");
        }
        assert_eq!(cache.len(), 7);
    }
}
