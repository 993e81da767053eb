mod common;

use swarmpipe::client::{copy_task_batch, ClientConfig, FinetuneSession};
use swarmpipe::model::{forward_through, HiddenStates, KvCache, Matrix, Model, ModelConfig};
use swarmpipe::netsim::{Message, NetProfile, SimNetwork};
use swarmpipe::server::{BlockServer, ServerConfig};
use swarmpipe::swarm::{replicated_spans, SimSwarm};
use swarmpipe::types::BlockRange;

fn small() -> Model {
    Model::new(ModelConfig {
        n_blocks: 2,
        hidden_dim: 16,
        n_heads: 2,
        vocab_size: 32,
        max_seq_len: 32,
        seed: 8,
    })
    .unwrap()
}

fn patterned(rows: usize, cols: usize, k: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|i| (((i * k + 3) % 17) as f32 - 8.0) * 0.09)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

#[test]
fn f64_oracle_agrees_with_library_forward() {
    let m = small();
    let x = patterned(6, 16, 7);
    let mut caches = vec![KvCache::new(16); 2];
    let y = forward_through(&m.blocks, HiddenStates::new(x.clone(), 0), &mut caches).unwrap();
    let want = common::blocks_f64(&m.blocks, &x);
    for r in 0..6 {
        for c in 0..16 {
            assert!((y.data.get(r, c) as f64 - want[r][c]).abs() < 1e-4);
        }
    }
}

#[test]
fn server_backward_matches_f64_finite_differences() {
    let m = small();
    let cfg = ServerConfig {
        blocks: Some(BlockRange::new(0, 2)),
        capacity: 2,
        model: m.config.clone(),
        ..Default::default()
    };
    let mut server = BlockServer::new(cfg, m.blocks.clone()).unwrap();
    let open = Message::OpenSession {
        start: 0,
        end: 2,
        width: 1,
        relay: None,
    };
    server.handle(7, open, 0.0).unwrap();
    let x = patterned(5, 16, 5);
    let dy = patterned(5, 16, 11);
    let fwd = Message::Forward {
        request: 1,
        inputs: vec![HiddenStates::new(x.clone(), 0)],
    };
    server.handle(7, fwd, 0.0).unwrap();
    let bwd = Message::Backward {
        request: 1,
        grads: vec![HiddenStates::new(dy.clone(), 0)],
    };
    let got = match server.handle(7, bwd, 0.0).unwrap().message {
        Message::StepResult(v) => v[0].data.data.iter().map(|&a| a as f64).collect::<Vec<_>>(),
        other => panic!("{other:?}"),
    };
    let want = common::finite_difference_grad(&m.blocks, &x, &dy, 1e-5);
    let err = common::relative_error(&got, &want);
    assert!(err <= 1e-4, "relative error {err}");
}

fn run(p: f64, steps: usize) -> (FinetuneSession, SimSwarm) {
    let m = Model::new(ModelConfig::default()).unwrap();
    let mut client = m.client.clone();
    client.init_soft_prompt(&m.config, 4);
    let net = SimNetwork::new(
        NetProfile {
            failure_prob: p,
            ..Default::default()
        },
        21,
    )
    .unwrap();
    let base = ServerConfig {
        model: m.config.clone(),
        ..Default::default()
    };
    let mut sw = SimSwarm::uniform(net, m.blocks.clone(), &replicated_spans(8, 4, 2), &base).unwrap();
    let mut ft = FinetuneSession::new(m.config.clone(), client, 0.5, ClientConfig::default()).unwrap();
    let batch = copy_task_batch(4, 4, 16, m.config.vocab_size);
    for _ in 0..steps {
        ft.step(&mut sw, &batch).unwrap();
    }
    (ft, sw)
}

#[test]
fn failures_do_not_change_the_training_trajectory() {
    let (clean, _) = run(0.0, 200);
    let (lossy, sw) = run(0.01, 200);
    assert!(lossy.repeats() > 0);
    let a = clean.losses();
    let b = lossy.losses();
    assert!((a[199] - b[199]).abs() <= 1e-5, "{} vs {}", a[199], b[199]);
    assert_eq!(clean.soft_prompt(), lossy.soft_prompt());
    let m = Model::new(ModelConfig::default()).unwrap();
    for s in sw.servers() {
        let want: u64 = {
            let tmp = BlockServer::new(s.config().clone(), m.blocks.clone()).unwrap();
            tmp.params_hash()
        };
        assert_eq!(s.params_hash(), want);
    }
}

#[test]
fn loss_falls_over_every_fifty_step_window() {
    let (ft, _) = run(0.0, 200);
    let l = ft.losses();
    for i in 0..l.len() - 50 {
        assert!(l[i + 50] < l[i], "window {i}: {} -> {}", l[i], l[i + 50]);
    }
    assert!(l[199] < l[0]);
}
