use serde::{Deserialize, Serialize};

use super::{step_outputs, ClientConfig, ClientError, Counters, Pathfinder, RpcFail, Stage, Strategy};
use crate::model::{initial_beam_scores, logits, select_beams, Beam, ClientParams, DecodeMode, HiddenStates, Matrix, ModelConfig, TokenChooser};
use crate::netsim::{hidden_list_checksum, ErrorCode, Message, StepInputs};
use crate::server::gather;
use crate::transport::Transport;
use crate::types::{BlockRange, ServerId};

/// One replacement of a failed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    pub failed: ServerId,
    pub blocks: BlockRange,
    /// Tokens the stage had processed when it failed.
    pub positions: usize,
    pub replacements: Vec<ServerId>,
    /// Activation bytes sent to the first replacement to rebuild it.
    pub restore_bytes: u64,
}

enum StepFail {
    /// Restart strategy: the step hit a failure and everything starts over.
    Interrupted(ServerId),
    Fatal(ClientError),
}

impl From<ClientError> for StepFail {
    fn from(e: ClientError) -> Self {
        StepFail::Fatal(e)
    }
}

fn append_rows(history: &mut Matrix, rows: &Matrix) {
    if history.rows == 0 {
        *history = rows.clone();
    } else {
        history.extend_rows(rows);
    }
}

/// A generation session against a swarm. The transport is passed to each
/// call so several sessions can share one swarm.
pub struct InferenceSession {
    client: ClientParams,
    model: ModelConfig,
    strategy: Strategy,
    path: Pathfinder,
    stages: Vec<Stage>,
    recoveries: Vec<RecoveryRecord>,
}

impl InferenceSession {
    pub fn new(model: ModelConfig, client: ClientParams, strategy: Strategy, config: ClientConfig) -> Self {
        Self {
            path: Pathfinder::new(model.n_blocks, config),
            client,
            model,
            strategy,
            stages: Vec::new(),
            recoveries: Vec::new(),
        }
    }

    pub fn counters(&self) -> &Counters {
        &self.path.counters
    }

    pub fn recoveries(&self) -> &[RecoveryRecord] {
        &self.recoveries
    }

    /// Servers of the current chain, first stage first.
    pub fn chain(&self) -> Vec<(ServerId, BlockRange)> {
        self.stages.iter().map(|s| (s.server, s.blocks)).collect()
    }

    fn full(&self) -> BlockRange {
        BlockRange::new(0, self.model.n_blocks)
    }

    fn check_request(&self, prefix: &[u32], n_new: usize) -> Result<(), ClientError> {
        if prefix.is_empty() {
            return Err(crate::model::ModelError::EmptyPrefix.into());
        }
        let requested = prefix.len() + n_new;
        if requested > self.model.max_seq_len {
            return Err(crate::model::ModelError::Capacity {
                requested,
                max: self.model.max_seq_len,
            }
            .into());
        }
        Ok(())
    }

    /// Generates `n_new` tokens after `prefix`; returns prefix plus new tokens.
    pub fn generate<T: Transport>(&mut self, t: &mut T, prefix: &[u32], n_new: usize, mode: DecodeMode) -> Result<Vec<u32>, ClientError> {
        self.check_request(prefix, n_new)?;
        if let DecodeMode::Beam { width } = mode {
            let beams = self.beam_generate(t, prefix, n_new, width)?;
            return Ok(beams.into_iter().next().map(|b| b.tokens).unwrap_or_default());
        }
        let started = t.now();
        let result = match self.strategy {
            Strategy::Cacheless => self.generate_cacheless(t, prefix, n_new, mode, started),
            Strategy::DualCache => match self.generate_cached(t, prefix, n_new, mode, started, false) {
                Ok(v) => Ok(v),
                Err(StepFail::Fatal(e)) => Err(e),
                Err(StepFail::Interrupted(_)) => unreachable!("only restart mode interrupts"),
            },
            Strategy::Restart => loop {
                match self.generate_cached(t, prefix, n_new, mode, started, true) {
                    Ok(v) => break Ok(v),
                    Err(StepFail::Fatal(e)) => break Err(e),
                    Err(StepFail::Interrupted(server)) => {
                        self.path.counters.restarts += 1;
                        self.path.ban(t, server);
                        self.stages.clear();
                    }
                }
            },
        };
        let stages = std::mem::take(&mut self.stages);
        if result.is_ok() {
            self.path.close_all(t, &stages);
        }
        result
    }

    fn generate_cached<T: Transport>(
        &mut self,
        t: &mut T,
        prefix: &[u32],
        n_new: usize,
        mode: DecodeMode,
        started: f64,
        restart: bool,
    ) -> Result<Vec<u32>, StepFail> {
        self.stages = self.path.build_chain(t, self.full(), 1)?;
        self.path.counters.step_bytes_per_step.clear();
        let mut chooser = TokenChooser::new(mode);
        let mut tokens = prefix.to_vec();
        let mut x = self.client.embed(prefix, 0);
        for _ in 0..n_new {
            self.path.check_budget(t, started)?;
            let out = self.run_step(t, vec![x], restart)?;
            let h = &out[0];
            let next = chooser.choose(&logits(&self.client, h.data.row(h.rows() - 1)));
            x = self.client.embed(&[next], tokens.len());
            tokens.push(next);
        }
        Ok(tokens)
    }

    /// Sends one step through every stage, recovering failed stages in place.
    fn run_step<T: Transport>(&mut self, t: &mut T, inputs: Vec<HiddenStates>, restart: bool) -> Result<Vec<HiddenStates>, StepFail> {
        let q = t.quantize();
        let width = inputs.len();
        let mut x = inputs;
        for h in x.iter_mut() {
            // keep exactly what the server will see
            let mut m = Message::StepResult(vec![h.clone()]);
            m.apply_wire_transform(q);
            if let Message::StepResult(mut v) = m {
                *h = v.pop().expect("one entry");
            }
        }
        let mut failures = 0;
        let mut force_inline = false;
        let mut step_bytes = 0u64;
        let mut i = 0;
        while i < self.stages.len() {
            let stage = &self.stages[i];
            let (server, session) = (stage.server, stage.session);
            let msg = if stage.relay_in && !force_inline {
                Message::Step(StepInputs::Relayed {
                    checksum: hidden_list_checksum(&x, q),
                })
            } else {
                Message::Step(StepInputs::Inline(x.clone()))
            };
            step_bytes += msg.framed_len(q) as u64;
            match self.path.rpc(t, server, session, msg) {
                Ok(reply) => {
                    let out = step_outputs(reply, width, server)?;
                    for (hist, xi) in self.stages[i].history.iter_mut().zip(&x) {
                        append_rows(hist, &xi.data);
                    }
                    x = out;
                    i += 1;
                    force_inline = false;
                }
                Err(RpcFail::Remote(_, ErrorCode::MissingRelay | ErrorCode::ChecksumMismatch, _)) => {
                    self.path.counters.relay_fallbacks += 1;
                    force_inline = true;
                }
                Err(f) => {
                    self.path.check_protocol(&f)?;
                    if restart {
                        return Err(StepFail::Interrupted(f.server()));
                    }
                    failures += 1;
                    self.replace_failed_server(t, i, &mut failures)?;
                    force_inline = true;
                }
            }
        }
        self.path.counters.step_bytes_per_step.push(step_bytes);
        Ok(x)
    }

    fn exhausted(&self, blocks: BlockRange, failures: usize, why: String) -> Result<(), ClientError> {
        if failures > self.path.config.retry_budget {
            return Err(ClientError::SwarmUnavailable {
                needed: blocks,
                attempts: failures,
                reason: why,
            });
        }
        Ok(())
    }

    /// Replaces stage `i` after its server failed: bans it, routes around
    /// the gap, and rebuilds the new servers from the client-side history.
    fn replace_failed_server<T: Transport>(&mut self, t: &mut T, i: usize, failures: &mut usize) -> Result<(), ClientError> {
        let q = t.quantize();
        let failed = self.stages[i].clone();
        self.path.ban(t, failed.server);
        self.exhausted(failed.blocks, *failures, format!("{} failed", failed.server))?;
        let width = failed.history.len();
        let tail = self.stages.get(i + 1).map(|s| (s.server, s.session));
        loop {
            let chain = self.path.route(t, failed.blocks, failures)?;
            let mut fresh = match self.path.open_hops(t, &chain.hops, width, tail) {
                Ok(v) => v,
                Err(f) => {
                    self.path.check_protocol(&f)?;
                    self.path.ban(t, f.server());
                    *failures += 1;
                    self.exhausted(failed.blocks, *failures, format!("{} failed while opening", f.server()))?;
                    continue;
                }
            };
            let mut history = failed.history.clone();
            let mut restore_bytes = 0;
            let mut first_bytes = None;
            let mut ok = true;
            for stage in fresh.iter_mut() {
                stage.history = history.clone();
                if failed.positions() == 0 {
                    continue;
                }
                let msg = Message::Restore(stage.history_states());
                let bytes = msg.activation_bytes(q) as u64;
                match self.path.rpc(t, stage.server, stage.session, msg) {
                    Ok(reply) => {
                        restore_bytes += bytes;
                        first_bytes.get_or_insert(bytes);
                        history = step_outputs(reply, width, stage.server)?.into_iter().map(|h| h.data).collect();
                    }
                    Err(f) => {
                        self.path.check_protocol(&f)?;
                        self.path.ban(t, f.server());
                        *failures += 1;
                        self.exhausted(failed.blocks, *failures, format!("{} failed while restoring", f.server()))?;
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            self.path.counters.restore_activation_bytes += restore_bytes;
            self.path.counters.recoveries += 1;
            self.recoveries.push(RecoveryRecord {
                failed: failed.server,
                blocks: failed.blocks,
                positions: failed.positions(),
                replacements: fresh.iter().map(|s| s.server).collect(),
                restore_bytes: first_bytes.unwrap_or(0),
            });
            if let Some(first) = fresh.first_mut() {
                first.relay_in = false;
            }
            let n_new = fresh.len();
            self.stages.splice(i..=i, fresh);
            if let Some(next) = self.stages.get_mut(i + n_new) {
                next.relay_in = self.path.config.relay;
            }
            return Ok(());
        }
    }

    fn generate_cacheless<T: Transport>(&mut self, t: &mut T, prefix: &[u32], n_new: usize, mode: DecodeMode, started: f64) -> Result<Vec<u32>, ClientError> {
        self.stages = self.path.build_chain(t, self.full(), 1)?;
        self.path.counters.step_bytes_per_step.clear();
        let q = t.quantize();
        let mut chooser = TokenChooser::new(mode);
        let mut tokens = prefix.to_vec();
        for _ in 0..n_new {
            self.path.check_budget(t, started)?;
            let mut x = vec![self.client.embed(&tokens, 0)];
            let mut failures = 0;
            let mut step_bytes = 0;
            let mut i = 0;
            while i < self.stages.len() {
                let (server, session) = (self.stages[i].server, self.stages[i].session);
                let msg = Message::Restore(x.clone());
                step_bytes += msg.framed_len(q) as u64;
                match self.path.rpc(t, server, session, msg) {
                    Ok(reply) => {
                        x = step_outputs(reply, 1, server)?;
                        i += 1;
                    }
                    Err(f) => {
                        self.path.check_protocol(&f)?;
                        let blocks = self.stages[i].blocks;
                        self.path.ban(t, server);
                        failures += 1;
                        self.exhausted(blocks, failures, format!("{server} failed"))?;
                        let chain = self.path.route(t, blocks, &mut failures)?;
                        match self.path.open_hops(t, &chain.hops, 1, None) {
                            Ok(fresh) => {
                                self.path.counters.recoveries += 1;
                                self.stages.splice(i..=i, fresh);
                            }
                            Err(f) => {
                                self.path.check_protocol(&f)?;
                                self.path.ban(t, f.server());
                                failures += 1;
                            }
                        }
                    }
                }
            }
            self.path.counters.step_bytes_per_step.push(step_bytes);
            let h = &x[0];
            tokens.push(chooser.choose(&logits(&self.client, h.data.row(h.rows() - 1))));
        }
        Ok(tokens)
    }

    /// Width-`width` beam search; beams come back best first.
    pub fn beam_generate<T: Transport>(&mut self, t: &mut T, prefix: &[u32], n_new: usize, width: usize) -> Result<Vec<Beam>, ClientError> {
        if width == 0 || width > self.client.vocab_size() {
            return Err(crate::model::ModelError::Config(format!("beam width {width} out of range")).into());
        }
        self.check_request(prefix, n_new)?;
        let started = t.now();
        self.stages = self.path.build_chain(t, self.full(), width)?;
        self.path.counters.step_bytes_per_step.clear();
        let mut seqs: Vec<Vec<u32>> = vec![prefix.to_vec(); width];
        let mut scores = initial_beam_scores(width);
        let mut inputs = vec![self.client.embed(prefix, 0); width];
        for _ in 0..n_new {
            self.path.check_budget(t, started)?;
            let out = match self.run_step(t, inputs, false) {
                Ok(v) => v,
                Err(StepFail::Fatal(e)) => return Err(e),
                Err(StepFail::Interrupted(_)) => unreachable!("beam search recovers in place"),
            };
            let all_logits: Vec<Vec<f32>> = out
                .iter()
                .map(|h| logits(&self.client, h.data.row(h.rows() - 1)))
                .collect();
            let picked = select_beams(&scores, &all_logits, width);
            let indices: Vec<u32> = picked.iter().map(|&(p, _, _)| p as u32 + 1).collect();
            for stage in self.stages.iter_mut() {
                stage.history = gather(&stage.history, &indices);
            }
            self.reorder_all(t, &indices)?;
            seqs = picked
                .iter()
                .map(|&(p, tok, _)| {
                    let mut s = seqs[p].clone();
                    s.push(tok);
                    s
                })
                .collect();
            scores = picked.iter().map(|&(_, _, s)| s).collect();
            inputs = seqs
                .iter()
                .map(|s| self.client.embed(&s[s.len() - 1..], s.len() - 1))
                .collect();
        }
        let stages = std::mem::take(&mut self.stages);
        self.path.close_all(t, &stages);
        Ok(seqs
            .into_iter()
            .zip(scores)
            .map(|(tokens, score)| Beam { tokens, score })
            .collect())
    }

    /// Sends the gather indices to every stage. A stage that fails is
    /// rebuilt from the already reordered history instead.
    fn reorder_all<T: Transport>(&mut self, t: &mut T, indices: &[u32]) -> Result<(), ClientError> {
        let mut failures = 0;
        let mut i = 0;
        while i < self.stages.len() {
            let (server, session) = (self.stages[i].server, self.stages[i].session);
            match self.path.rpc(t, server, session, Message::Reorder(indices.to_vec())) {
                Ok(_) => i += 1,
                Err(f) => {
                    self.path.check_protocol(&f)?;
                    failures += 1;
                    let before = self.stages.len();
                    self.replace_failed_server(t, i, &mut failures)?;
                    i += self.stages.len() + 1 - before;
                }
            }
        }
        Ok(())
    }
}
