use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{step_outputs, ClientConfig, ClientError, Counters, Pathfinder, RpcFail, Stage};
use crate::model::{logits, ClientParams, HiddenStates, Matrix, ModelConfig, ModelError};
use crate::netsim::Message;
use crate::transport::Transport;
use crate::types::BlockRange;

/// Sequences of `len` tokens whose second half repeats the first.
pub fn copy_task_batch(seed: u64, batch: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            let half: Vec<u32> = (0..len / 2).map(|_| rng.gen_range(0..vocab as u32)).collect();
            let mut s = half.clone();
            s.extend(half.iter().cycle().take(len - len / 2));
            s
        })
        .collect()
}

/// Mean next-token cross-entropy over every predicted position, and its
/// gradient with respect to the final hidden states.
fn loss_and_grad(client: &ClientParams, outputs: &[HiddenStates], batch: &[Vec<u32>], prompt_len: usize) -> (f64, Vec<HiddenStates>) {
    let d = client.hidden_dim();
    let count: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    let scale = 1.0 / count.max(1) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (h, seq) in outputs.iter().zip(batch) {
        let mut g = Matrix::zeros(h.rows(), d);
        for i in 0..seq.len().saturating_sub(1) {
            let row = prompt_len + i;
            let target = seq[i + 1] as usize;
            let l: Vec<f64> = logits(client, h.data.row(row)).into_iter().map(f64::from).collect();
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - max).exp()).sum();
            loss -= (l[target] - max) - z.ln();
            let mut acc = vec![0.0f64; d];
            for (v, lv) in l.iter().enumerate() {
                let mut w = (lv - max).exp() / z;
                if v == target {
                    w -= 1.0;
                }
                w *= scale;
                for (a, &e) in acc.iter_mut().zip(client.embedding.row(v)) {
                    *a += w * e as f64;
                }
            }
            for (o, a) in g.row_mut(row).iter_mut().zip(acc) {
                *o = a as f32;
            }
        }
        grads.push(HiddenStates::new(g, 0));
    }
    (loss * scale, grads)
}

/// Soft-prompt tuning through a swarm with plain SGD. Servers only see the
/// prompt rows as activations; every failure repeats the whole pass.
pub struct FinetuneSession {
    client: ClientParams,
    model: ModelConfig,
    lr: f32,
    path: Pathfinder,
    stages: Vec<Stage>,
    next_request: u64,
    losses: Vec<f64>,
    repeats: u64,
}

enum PassFail {
    Retry(RpcFail),
    Fatal(ClientError),
}

impl From<ClientError> for PassFail {
    fn from(e: ClientError) -> Self {
        PassFail::Fatal(e)
    }
}

impl FinetuneSession {
    pub fn new(model: ModelConfig, client: ClientParams, lr: f32, config: ClientConfig) -> Result<Self, ClientError> {
        if client.soft_prompt.is_none() {
            return Err(ModelError::Config("fine-tuning needs a soft prompt".into()).into());
        }
        Ok(Self {
            path: Pathfinder::new(model.n_blocks, config),
            client,
            model,
            lr,
            stages: Vec::new(),
            next_request: 1,
            losses: Vec::new(),
            repeats: 0,
        })
    }

    pub fn soft_prompt(&self) -> &Matrix {
        self.client.soft_prompt.as_ref().expect("checked at construction")
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn counters(&self) -> &Counters {
        &self.path.counters
    }

    /// Passes that were thrown away and repeated.
    pub fn repeats(&self) -> u64 {
        self.repeats
    }

    /// One SGD step on `batch`; returns the loss before the update.
    pub fn step<T: Transport>(&mut self, t: &mut T, batch: &[Vec<u32>]) -> Result<f64, ClientError> {
        if batch.is_empty() || batch.iter().any(|s| s.len() < 2) {
            return Err(ClientError::Protocol("every sequence needs at least two tokens".into()));
        }
        let p = self.soft_prompt().rows;
        if let Some(s) = batch.iter().find(|s| s.len() + p > self.model.max_seq_len) {
            return Err(ModelError::Capacity {
                requested: s.len() + p,
                max: self.model.max_seq_len,
            }
            .into());
        }
        let mut failures = 0;
        loop {
            if self.stages.is_empty() {
                self.stages = self.path.build_chain(t, BlockRange::new(0, self.model.n_blocks), 1)?;
            }
            match self.pass(t, batch) {
                Ok((loss, grad)) => {
                    let sp = self.client.soft_prompt.as_mut().expect("checked");
                    for (w, g) in sp.data.iter_mut().zip(&grad.data) {
                        *w -= self.lr * g;
                    }
                    self.losses.push(loss);
                    return Ok(loss);
                }
                Err(PassFail::Fatal(e)) => return Err(e),
                Err(PassFail::Retry(f)) => {
                    self.repeats += 1;
                    self.path.ban(t, f.server());
                    self.stages.clear();
                    failures += 1;
                    if failures > self.path.config.retry_budget {
                        return Err(ClientError::SwarmUnavailable {
                            needed: BlockRange::new(0, self.model.n_blocks),
                            attempts: failures,
                            reason: format!("{} failed during a training pass", f.server()),
                        });
                    }
                }
            }
        }
    }

    fn pass<T: Transport>(&mut self, t: &mut T, batch: &[Vec<u32>]) -> Result<(f64, Matrix), PassFail> {
        let request = self.next_request;
        self.next_request += 1;
        let prompt = self.soft_prompt().clone();
        let mut x: Vec<HiddenStates> = batch
            .iter()
            .map(|s| {
                let mut m = prompt.clone();
                m.extend_rows(&self.client.embed(s, prompt.rows).data);
                HiddenStates::new(m, 0)
            })
            .collect();
        let n = x.len();
        let stages: Vec<_> = self.stages.iter().map(|s| (s.server, s.session)).collect();
        for &(server, session) in &stages {
            let reply = self
                .path
                .rpc(t, server, session, Message::Forward { request, inputs: x })
                .map_err(|f| self.classify(f))?;
            x = step_outputs(reply, n, server)?;
        }
        let (loss, mut g) = loss_and_grad(&self.client, &x, batch, prompt.rows);
        for &(server, session) in stages.iter().rev() {
            let reply = self
                .path
                .rpc(t, server, session, Message::Backward { request, grads: g })
                .map_err(|f| self.classify(f))?;
            g = step_outputs(reply, n, server)?;
        }
        let mut grad = Matrix::zeros(prompt.rows, prompt.cols);
        for gi in &g {
            for (a, &b) in grad.data.iter_mut().zip(&gi.data.data[..prompt.rows * prompt.cols]) {
                *a += b;
            }
        }
        Ok((loss, grad))
    }

    fn classify(&self, f: RpcFail) -> PassFail {
        match self.path.check_protocol(&f) {
            Err(e) => PassFail::Fatal(e),
            Ok(()) => PassFail::Retry(f),
        }
    }
}
