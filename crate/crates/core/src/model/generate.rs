use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{forward_through, KvCache};
use super::tensor::dot;
use super::{ClientParams, HiddenStates, Model, ModelError};

/// How the next token is picked from the logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    /// Seeded sampling; `top_k == 0` samples from the full vocabulary.
    Sample { seed: u64, top_k: usize },
    Beam { width: usize },
}

/// Tied unembedding: one logit per vocabulary row.
pub fn logits(client: &ClientParams, hidden_row: &[f32]) -> Vec<f32> {
    (0..client.vocab_size())
        .map(|t| dot(client.embedding.row(t), hidden_row))
        .collect()
}

/// Client-side token choice. Distributed and local generation construct it
/// from the same mode so they consume the same random stream.
#[derive(Debug, Clone)]
pub struct TokenChooser {
    mode: DecodeMode,
    rng: Option<ChaCha8Rng>,
}

impl TokenChooser {
    pub fn new(mode: DecodeMode) -> Self {
        let rng = match mode {
            DecodeMode::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        Self { mode, rng }
    }

    pub fn choose(&mut self, logits: &[f32]) -> u32 {
        match (self.mode, self.rng.as_mut()) {
            (DecodeMode::Sample { top_k, .. }, Some(rng)) => sample(logits, top_k, rng),
            _ => argmax(logits),
        }
    }
}

/// Argmax with ties broken toward the lowest token id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn sample(logits: &[f32], top_k: usize, rng: &mut ChaCha8Rng) -> u32 {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    if top_k > 0 && top_k < logits.len() {
        ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        ids.truncate(top_k);
        ids.sort_unstable();
    }
    let max = ids.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = ids.iter().map(|&i| (logits[i] as f64 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (&i, &w) in ids.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return i as u32;
        }
    }
    *ids.last().expect("non-empty vocabulary") as u32
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// One hypothesis of a beam search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub tokens: Vec<u32>,
    pub score: f64,
}

/// Picks the next beam from per-beam logits. Returns `(parent, token, score)`
/// for each new slot, best first; ties go to the lower parent, then the lower
/// token id.
pub fn select_beams(scores: &[f64], logits: &[Vec<f32>], width: usize) -> Vec<(usize, u32, f64)> {
    let mut cands: Vec<(usize, u32, f64)> = Vec::with_capacity(scores.len() * logits[0].len());
    for (b, (&s, l)) in scores.iter().zip(logits).enumerate() {
        if s == f64::NEG_INFINITY {
            continue;
        }
        for (t, lp) in log_softmax(l).into_iter().enumerate() {
            cands.push((b, t as u32, s + lp));
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    cands.truncate(width);
    cands
}

/// Initial beam: `width` copies of the prefix, only the first one live.
pub fn initial_beam_scores(width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| if i == 0 { 0.0 } else { f64::NEG_INFINITY })
        .collect()
}

fn check_capacity(model: &Model, prefix: &[u32], n_new: usize) -> Result<(), ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let requested = prefix.len() + n_new;
    if requested > model.config.max_seq_len {
        return Err(ModelError::Capacity {
            requested,
            max: model.config.max_seq_len,
        });
    }
    Ok(())
}

/// Single-process generation: the ground truth distributed runs must match.
/// Returns the prefix followed by `n_new` generated tokens. Beam mode returns
/// the best hypothesis.
pub fn reference_generate(
    model: &Model,
    prefix: &[u32],
    n_new: usize,
    mode: DecodeMode,
) -> Result<Vec<u32>, ModelError> {
    if let DecodeMode::Beam { width } = mode {
        let beams = reference_beam_search(model, prefix, n_new, width)?;
        return Ok(beams.into_iter().next().map(|b| b.tokens).unwrap_or_default());
    }
    check_capacity(model, prefix, n_new)?;
    let d = model.config.hidden_dim;
    let mut caches = vec![KvCache::new(d); model.config.n_blocks];
    let mut chooser = TokenChooser::new(mode);
    let mut tokens = prefix.to_vec();
    let mut inputs = model.client.embed(prefix, 0);
    for _ in 0..n_new {
        let out = forward_through(&model.blocks, inputs, &mut caches)?;
        let next = chooser.choose(&logits(&model.client, out.data.row(out.rows() - 1)));
        inputs = model.client.embed(&[next], tokens.len());
        tokens.push(next);
    }
    Ok(tokens)
}

/// Local beam search with cache reordering by gather.
pub fn reference_beam_search(
    model: &Model,
    prefix: &[u32],
    n_new: usize,
    width: usize,
) -> Result<Vec<Beam>, ModelError> {
    if width == 0 {
        return Err(ModelError::Config("beam width must be at least 1".into()));
    }
    check_capacity(model, prefix, n_new)?;
    let d = model.config.hidden_dim;
    let mut caches: Vec<Vec<KvCache>> = vec![vec![KvCache::new(d); model.config.n_blocks]; width];
    let mut seqs: Vec<Vec<u32>> = vec![prefix.to_vec(); width];
    let mut scores = initial_beam_scores(width);
    let mut inputs: Vec<HiddenStates> = vec![model.client.embed(prefix, 0); width];
    for _ in 0..n_new {
        let mut all_logits = Vec::with_capacity(width);
        for (x, cache) in inputs.drain(..).zip(caches.iter_mut()) {
            let out = forward_through(&model.blocks, x, cache)?;
            all_logits.push(logits(&model.client, out.data.row(out.rows() - 1)));
        }
        let picked = select_beams(&scores, &all_logits, width);
        caches = picked.iter().map(|&(p, _, _)| caches[p].clone()).collect();
        seqs = picked
            .iter()
            .map(|&(p, t, _)| {
                let mut s = seqs[p].clone();
                s.push(t);
                s
            })
            .collect();
        scores = picked.iter().map(|&(_, _, s)| s).collect();
        inputs = seqs
            .iter()
            .map(|s| model.client.embed(&s[s.len() - 1..], s.len() - 1))
            .collect();
    }
    Ok(seqs
        .into_iter()
        .zip(scores)
        .map(|(tokens, score)| Beam { tokens, score })
        .collect())
}
