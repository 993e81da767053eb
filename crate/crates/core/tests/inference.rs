use swarmpipe::client::{ClientConfig, InferenceSession, Strategy};
use swarmpipe::model::{reference_beam_search, reference_generate, DecodeMode, Model, ModelConfig};
use swarmpipe::netsim::{NetProfile, SimNetwork};
use swarmpipe::server::{BlockServer, ServerConfig};
use swarmpipe::swarm::{replicated_spans, SimSwarm};
use swarmpipe::types::{BlockRange, ServerId};

fn model() -> Model {
    Model::new(ModelConfig::default()).unwrap()
}

fn swarm(model: &Model, spans: &[BlockRange], p: f64, seed: u64) -> SimSwarm {
    let profile = NetProfile {
        failure_prob: p,
        ..Default::default()
    };
    let net = SimNetwork::new(profile, seed).unwrap();
    let base = ServerConfig {
        model: model.config.clone(),
        ..Default::default()
    };
    SimSwarm::uniform(net, model.blocks.clone(), spans, &base).unwrap()
}

fn session(model: &Model, strategy: Strategy) -> InferenceSession {
    InferenceSession::new(model.config.clone(), model.client.clone(), strategy, ClientConfig::default())
}

fn prefix() -> Vec<u32> {
    vec![17, 3, 250, 9]
}

#[test]
fn every_strategy_matches_the_oracle_without_failures() {
    let m = model();
    let want = reference_generate(&m, &prefix(), 64, DecodeMode::Greedy).unwrap();
    for strategy in Strategy::ALL {
        let mut sw = swarm(&m, &replicated_spans(8, 4, 2), 0.0, 1);
        let got = session(&m, strategy)
            .generate(&mut sw, &prefix(), 64, DecodeMode::Greedy)
            .unwrap();
        assert_eq!(got, want, "{strategy:?}");
    }
}

#[test]
fn seeded_sampling_matches_the_oracle() {
    let m = model();
    let mode = DecodeMode::Sample { seed: 42, top_k: 8 };
    let want = reference_generate(&m, &prefix(), 48, mode).unwrap();
    let mut sw = swarm(&m, &replicated_spans(8, 4, 2), 0.02, 9);
    let got = session(&m, Strategy::DualCache)
        .generate(&mut sw, &prefix(), 48, mode)
        .unwrap();
    assert_eq!(got, want);
}

#[test]
fn dual_cache_recovers_on_a_lossy_network() {
    let m = model();
    let want = reference_generate(&m, &[1], 1024, DecodeMode::Greedy).unwrap();
    let mut sw = swarm(&m, &replicated_spans(8, 4, 2), 0.01, 7);
    let mut s = session(&m, Strategy::DualCache);
    let got = s.generate(&mut sw, &[1], 1024, DecodeMode::Greedy).unwrap();
    assert_eq!(got, want);
    assert!(s.counters().recoveries > 0);
}

#[test]
fn recovery_sends_exactly_the_stage_history() {
    let m = model();
    let mut sw = swarm(&m, &replicated_spans(8, 4, 2), 0.01, 3);
    let mut s = session(&m, Strategy::DualCache);
    s.generate(&mut sw, &prefix(), 200, DecodeMode::Greedy).unwrap();
    assert!(!s.recoveries().is_empty());
    let d = m.config.hidden_dim as u64;
    let mut total = 0;
    for r in s.recoveries() {
        assert_eq!(r.restore_bytes, r.positions as u64 * d * 4, "{r:?}");
        total += r.restore_bytes;
    }
    assert_eq!(s.counters().restore_activation_bytes, total);
}

#[test]
fn step_payload_is_flat_for_dual_cache_and_grows_for_cacheless() {
    let m = model();
    let mut sw = swarm(&m, &replicated_spans(8, 4, 1), 0.0, 1);
    let mut dual = session(&m, Strategy::DualCache);
    dual.generate(&mut sw, &[5], 64, DecodeMode::Greedy).unwrap();
    let per_step = &dual.counters().step_bytes_per_step;
    assert_eq!(per_step.len(), 64);
    assert!(per_step.iter().all(|&b| b == per_step[0]));

    let mut sw = swarm(&m, &replicated_spans(8, 4, 1), 0.0, 1);
    let mut cl = session(&m, Strategy::Cacheless);
    cl.generate(&mut sw, &[5], 64, DecodeMode::Greedy).unwrap();
    let per_step = &cl.counters().step_bytes_per_step;
    let growth: Vec<u64> = per_step.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(growth.iter().all(|&g| g == 4 * 64 * 4), "{growth:?}");
}

#[test]
fn replacement_that_crashes_during_restore_is_replaced_again() {
    let m = model();
    let spans = [
        BlockRange::new(0, 4),
        BlockRange::new(4, 8),
        BlockRange::new(4, 8),
        BlockRange::new(4, 8),
    ];
    let mut sw = swarm(&m, &spans, 0.0, 1);
    sw.server_mut(ServerId(1)).unwrap().hooks_mut().crash_after_requests = Some(20);
    sw.server_mut(ServerId(2)).unwrap().hooks_mut().crash_on_restore = true;
    let mut s = session(&m, Strategy::DualCache);
    let got = s.generate(&mut sw, &prefix(), 40, DecodeMode::Greedy).unwrap();
    assert_eq!(got, reference_generate(&m, &prefix(), 40, DecodeMode::Greedy).unwrap());
    let rec = &s.recoveries()[0];
    assert_eq!(rec.failed, ServerId(1));
    assert_eq!(rec.replacements, vec![ServerId(3)]);
    assert!(sw.server(ServerId(2)).unwrap().is_crashed());
}

#[test]
fn gap_can_be_filled_by_several_servers() {
    let m = model();
    let spans = [
        BlockRange::new(0, 2),
        BlockRange::new(2, 5),
        BlockRange::new(5, 8),
        BlockRange::new(2, 4),
        BlockRange::new(4, 5),
    ];
    let mut sw = swarm(&m, &spans, 0.0, 1);
    // make the single [2, 5) server the preferred one
    sw.net_mut().set_rtt(swarmpipe::types::Endpoint::Server(ServerId(3)), 50.0);
    sw.net_mut().set_rtt(swarmpipe::types::Endpoint::Server(ServerId(4)), 50.0);
    sw.server_mut(ServerId(1)).unwrap().hooks_mut().crash_after_requests = Some(10);
    let mut s = session(&m, Strategy::DualCache);
    let got = s.generate(&mut sw, &prefix(), 30, DecodeMode::Greedy).unwrap();
    assert_eq!(got, reference_generate(&m, &prefix(), 30, DecodeMode::Greedy).unwrap());
    let rec = &s.recoveries()[0];
    assert_eq!(rec.blocks, BlockRange::new(2, 5));
    assert_eq!(rec.replacements, vec![ServerId(3), ServerId(4)]);
}

#[test]
fn restart_and_cacheless_survive_failures() {
    let m = model();
    let want = reference_generate(&m, &prefix(), 40, DecodeMode::Greedy).unwrap();
    for strategy in [Strategy::Restart, Strategy::Cacheless] {
        let mut sw = swarm(&m, &replicated_spans(8, 4, 2), 0.01, 11);
        let mut s = session(&m, strategy);
        assert_eq!(s.generate(&mut sw, &prefix(), 40, DecodeMode::Greedy).unwrap(), want);
    }
}

#[test]
fn uncoverable_swarm_reports_unavailable() {
    let m = model();
    let mut sw = swarm(&m, &[BlockRange::new(0, 4), BlockRange::new(5, 8)], 0.0, 1);
    let err = session(&m, Strategy::DualCache)
        .generate(&mut sw, &prefix(), 4, DecodeMode::Greedy)
        .unwrap_err();
    assert!(matches!(err, swarmpipe::client::ClientError::SwarmUnavailable { .. }), "{err}");
}

#[test]
fn relay_mode_gives_the_same_tokens() {
    let m = model();
    let want = reference_generate(&m, &prefix(), 48, DecodeMode::Greedy).unwrap();
    for p in [0.0, 0.02] {
        let mut sw = swarm(&m, &replicated_spans(8, 4, 2), p, 5);
        let cfg = ClientConfig {
            relay: true,
            ..Default::default()
        };
        let mut s = InferenceSession::new(m.config.clone(), m.client.clone(), Strategy::DualCache, cfg);
        assert_eq!(s.generate(&mut sw, &prefix(), 48, DecodeMode::Greedy).unwrap(), want);
        if p == 0.0 {
            assert_eq!(s.counters().relay_fallbacks, 0);
        }
    }
}

#[test]
fn beam_width_one_is_greedy() {
    let m = model();
    let mut sw = swarm(&m, &replicated_spans(8, 2, 1), 0.0, 1);
    let beams = session(&m, Strategy::DualCache)
        .beam_generate(&mut sw, &prefix(), 24, 1)
        .unwrap();
    assert_eq!(beams[0].tokens, reference_generate(&m, &prefix(), 24, DecodeMode::Greedy).unwrap());
}

#[test]
fn beam_search_matches_local_oracle_with_and_without_failures() {
    let m = model();
    let want = reference_beam_search(&m, &prefix(), 32, 4).unwrap();
    for (p, seed) in [(0.0, 1), (0.02, 2)] {
        let mut sw = swarm(&m, &replicated_spans(8, 4, 2), p, seed);
        let mut s = session(&m, Strategy::DualCache);
        let got = s.beam_generate(&mut sw, &prefix(), 32, 4).unwrap();
        assert_eq!(s.counters().recoveries > 0, p > 0.0);
        assert_eq!(got.len(), 4);
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.tokens, w.tokens);
            assert_eq!(g.score, w.score);
        }
    }
}

#[test]
fn interleaved_sessions_do_not_interfere() {
    let m = model();
    let mut sw = swarm(&m, &replicated_spans(8, 4, 1), 0.0, 1);
    let mut a = InferenceSession::new(m.config.clone(), m.client.clone(), Strategy::DualCache, ClientConfig::default());
    let mut b = InferenceSession::new(
        m.config.clone(),
        m.client.clone(),
        Strategy::DualCache,
        ClientConfig {
            client_id: 1,
            ..Default::default()
        },
    );
    let pa = vec![1, 2, 3];
    let pb = vec![200, 100];
    let mut out_a = pa.clone();
    let mut out_b = pb.clone();
    // alternate short generations, each continuing from the previous output
    for _ in 0..4 {
        out_a = a.generate(&mut sw, &out_a, 5, DecodeMode::Greedy).unwrap();
        out_b = b.generate(&mut sw, &out_b, 5, DecodeMode::Greedy).unwrap();
    }
    assert_eq!(out_a, reference_generate(&m, &pa, 20, DecodeMode::Greedy).unwrap());
    assert_eq!(out_b, reference_generate(&m, &pb, 20, DecodeMode::Greedy).unwrap());
}

#[test]
fn params_never_change() {
    let m = model();
    let mut sw = swarm(&m, &replicated_spans(8, 4, 2), 0.01, 4);
    let before: Vec<u64> = sw.servers().map(BlockServer::params_hash).collect();
    session(&m, Strategy::DualCache)
        .generate(&mut sw, &prefix(), 100, DecodeMode::Greedy)
        .unwrap();
    let after: Vec<u64> = sw.servers().map(BlockServer::params_hash).collect();
    assert_eq!(before, after);
}
