use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use swarmpipe::balancer::swarm_throughput;
use swarmpipe::balancer::Placement;
use swarmpipe::client::{ClientConfig, InferenceSession, Strategy};
use swarmpipe::model::{reference_generate, DecodeMode, Model, ModelConfig};
use swarmpipe::netsim::{NetProfile, SimNetwork};
use swarmpipe::server::{serve_tcp, BlockServer, ServerConfig};
use swarmpipe::swarm::{replicated_spans, SimSwarm};
use swarmpipe::transport::{TcpTransport, Transport};
use swarmpipe::types::{BlockRange, ServerId};

fn base(model: &Model, thr: f64) -> ServerConfig {
    ServerConfig {
        model: model.config.clone(),
        throughput_override: Some(thr),
        ..Default::default()
    }
}

fn bottleneck(sw: &mut SimSwarm) -> f64 {
    let n = sw.server(ServerId(0)).map_or(8, |s| s.config().model.n_blocks);
    let ps: Vec<Placement> = sw.snapshot().iter().map(Placement::from).collect();
    swarm_throughput(&ps, n)
}

#[test]
fn gap_is_covered_within_two_check_periods() {
    let m = Model::new(ModelConfig::default()).unwrap();
    // two servers on [0, 2), three on each of the other stages
    let mut spans = vec![BlockRange::new(0, 2); 2];
    for s in 1..4 {
        spans.extend([BlockRange::new(2 * s, 2 * s + 2); 3]);
    }
    let net = SimNetwork::new(NetProfile::default(), 1).unwrap();
    let mut sw = SimSwarm::uniform(net, m.blocks.clone(), &spans, &base(&m, 100.0)).unwrap();
    assert_eq!(bottleneck(&mut sw), 200.0);
    sw.kill(ServerId(0));
    sw.kill(ServerId(1));
    assert_eq!(bottleneck(&mut sw), 0.0);
    let mut covered_after = None;
    for period in 1..=2 {
        sw.advance_to(period as f64 * 60.0);
        sw.rebalance_round();
        if bottleneck(&mut sw) > 0.0 {
            covered_after = Some(period);
            break;
        }
    }
    assert!(covered_after.is_some(), "gap still open after two periods");
    let mut s = InferenceSession::new(m.config.clone(), m.client.clone(), Strategy::DualCache, ClientConfig::default());
    let got = s.generate(&mut sw, &[4, 5], 16, DecodeMode::Greedy).unwrap();
    assert_eq!(got, reference_generate(&m, &[4, 5], 16, DecodeMode::Greedy).unwrap());
}

#[test]
fn balanced_swarm_stays_put() {
    let m = Model::new(ModelConfig::default()).unwrap();
    let net = SimNetwork::new(NetProfile::default(), 1).unwrap();
    let mut sw = SimSwarm::uniform(net, m.blocks.clone(), &replicated_spans(8, 4, 2), &base(&m, 100.0)).unwrap();
    for period in 1..=10 {
        sw.advance_to(period as f64 * 60.0);
        assert!(sw.rebalance_round().is_empty());
    }
    assert!(sw.servers().all(|s| s.stats().block_changes == 0));
}

#[test]
fn quantized_wire_still_generates() {
    let m = Model::new(ModelConfig::default()).unwrap();
    let net = SimNetwork::new(NetProfile::default(), 1).unwrap();
    let cfg = ServerConfig {
        quantize: true,
        ..base(&m, 100.0)
    };
    let mut sw = SimSwarm::uniform(net, m.blocks.clone(), &replicated_spans(8, 4, 1), &cfg)
        .unwrap()
        .with_quantization(true);
    let mut q = InferenceSession::new(m.config.clone(), m.client.clone(), Strategy::DualCache, ClientConfig::default());
    let got = q.generate(&mut sw, &[9, 8, 7], 32, DecodeMode::Greedy).unwrap();
    assert_eq!(got.len(), 35);
    let net = SimNetwork::new(NetProfile::default(), 1).unwrap();
    let mut exact_sw = SimSwarm::uniform(net, m.blocks.clone(), &replicated_spans(8, 4, 1), &base(&m, 100.0)).unwrap();
    let mut e = InferenceSession::new(m.config.clone(), m.client.clone(), Strategy::DualCache, ClientConfig::default());
    e.generate(&mut exact_sw, &[9, 8, 7], 32, DecodeMode::Greedy).unwrap();
    // roughly a quarter of the activation bytes
    assert!(q.counters().bytes_total() * 2 < e.counters().bytes_total());
}

#[test]
fn generation_over_tcp_matches_the_oracle() {
    let m = Model::new(ModelConfig::default()).unwrap();
    let mut handles = Vec::new();
    let mut addresses = Vec::new();
    for (i, span) in replicated_spans(8, 2, 1).into_iter().enumerate() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let cfg = ServerConfig {
            id: i as u32,
            address: addr.clone(),
            blocks: Some(span),
            capacity: span.len(),
            ..base(&m, 100.0)
        };
        let server = Arc::new(Mutex::new(BlockServer::new(cfg, m.blocks.clone()).unwrap()));
        handles.push(serve_tcp(server, listener).unwrap());
        addresses.push(addr);
    }
    let mut t = TcpTransport::new(addresses, Duration::from_secs(5), false);
    for strategy in Strategy::ALL {
        let mut s = InferenceSession::new(m.config.clone(), m.client.clone(), strategy, ClientConfig::default());
        let got = s.generate(&mut t, &[3, 1, 4], 12, DecodeMode::Greedy).unwrap();
        assert_eq!(got, reference_generate(&m, &[3, 1, 4], 12, DecodeMode::Greedy).unwrap(), "{strategy:?}");
    }
    for h in handles {
        h.shutdown();
    }
}
