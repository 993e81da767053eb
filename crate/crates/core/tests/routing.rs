use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarmpipe::router::{Chain, RouteServer, RouteUpdate, Router};
use swarmpipe::types::{BlockRange, ServerId};

const L: usize = 16;

/// Shortest path by dynamic programming over block boundaries.
fn oracle(servers: &BTreeMap<ServerId, RouteServer>, banned: &BTreeSet<ServerId>, needed: BlockRange) -> Option<f64> {
    let mut dist = vec![f64::INFINITY; L + 1];
    dist[needed.start] = 0.0;
    for b in needed.start..needed.end {
        if !dist[b].is_finite() {
            continue;
        }
        for s in servers.values() {
            if banned.contains(&s.id) || s.throughput <= 0.0 || s.blocks.start > b || s.blocks.end <= b {
                continue;
            }
            for e in b + 1..=s.blocks.end.min(needed.end) {
                let c = dist[b] + (s.rtt_ms + (e - b) as f64 * (1000.0 / s.throughput));
                if c < dist[e] {
                    dist[e] = c;
                }
            }
        }
    }
    dist[needed.end].is_finite().then_some(dist[needed.end])
}

fn check_chain(chain: &Chain, needed: BlockRange, servers: &BTreeMap<ServerId, RouteServer>, banned: &BTreeSet<ServerId>) {
    let mut at = needed.start;
    let mut cost = 0.0;
    for hop in &chain.hops {
        assert_eq!(hop.blocks.start, at);
        let s = &servers[&hop.server];
        assert!(!banned.contains(&s.id));
        assert!(s.blocks.covers(&hop.blocks));
        cost += s.rtt_ms + hop.blocks.len() as f64 * (1000.0 / s.throughput);
        at = hop.blocks.end;
    }
    assert_eq!(at, needed.end);
    assert!((cost - chain.cost_ms).abs() <= 1e-9 * cost.max(1.0));
}

fn random_server(rng: &mut ChaCha8Rng, id: u32) -> RouteServer {
    let start = rng.gen_range(0..L);
    let end = rng.gen_range(start + 1..=L.min(start + 6));
    RouteServer {
        id: ServerId(id),
        blocks: BlockRange::new(start, end),
        throughput: rng.gen_range(1.0..200.0),
        rtt_ms: rng.gen_range(0.5..80.0),
    }
}

#[test]
fn incremental_router_matches_fresh_computation_over_random_mutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut router = Router::new(L);
    let mut servers = BTreeMap::new();
    let mut banned = BTreeSet::new();
    for id in 0..20 {
        let s = random_server(&mut rng, id);
        servers.insert(s.id, s);
        router.apply_update(RouteUpdate::Join(s));
    }
    let mut checked = 0;
    for step in 0..1000 {
        let ids: Vec<ServerId> = servers.keys().copied().collect();
        let update = match rng.gen_range(0..8) {
            0..=3 => {
                // fresh id or an existing one re-announcing with new blocks
                let id = if rng.gen_bool(0.5) || ids.is_empty() {
                    rng.gen_range(0..40)
                } else {
                    ids[rng.gen_range(0..ids.len())].0
                };
                let s = random_server(&mut rng, id);
                servers.insert(s.id, s);
                RouteUpdate::Join(s)
            }
            4 if !ids.is_empty() => {
                let id = ids[rng.gen_range(0..ids.len())];
                // bans outlive a departure so a quick rejoin stays banned
                servers.remove(&id);
                RouteUpdate::Leave(id)
            }
            5 if !ids.is_empty() => {
                let id = ids[rng.gen_range(0..ids.len())];
                banned.insert(id);
                RouteUpdate::Ban(id)
            }
            6 if !banned.is_empty() => {
                let b: Vec<ServerId> = banned.iter().copied().collect();
                let id = b[rng.gen_range(0..b.len())];
                banned.remove(&id);
                RouteUpdate::Unban(id)
            }
            _ if !ids.is_empty() => {
                let id = ids[rng.gen_range(0..ids.len())];
                let rtt = rng.gen_range(0.5..80.0);
                servers.get_mut(&id).unwrap().rtt_ms = rtt;
                RouteUpdate::Latency(id, rtt)
            }
            _ => continue,
        };
        router.apply_update(update);
        let start = rng.gen_range(0..L);
        let end = rng.gen_range(start + 1..=L);
        for needed in [BlockRange::new(0, L), BlockRange::new(start, end)] {
            let want = oracle(&servers, &banned, needed);
            let got = router.find_best_chain(needed).ok();
            let mut fresh = Router::new(L);
            for s in servers.values() {
                fresh.apply_update(RouteUpdate::Join(*s));
            }
            for id in &banned {
                fresh.apply_update(RouteUpdate::Ban(*id));
            }
            let fresh_cost = fresh.find_best_chain(needed).ok().map(|c| c.cost_ms);
            assert_eq!(got.as_ref().map(|c| c.cost_ms), want, "step {step} {needed}");
            assert_eq!(fresh_cost, want, "step {step} {needed}");
            if let Some(chain) = got {
                check_chain(&chain, needed, &servers, &banned);
                checked += 1;
            }
        }
    }
    assert!(checked > 500, "only {checked} routable queries");
}

#[test]
fn incremental_updates_do_less_work_than_rebuilding() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut router = Router::new(L);
    for id in 0..30 {
        router.apply_update(RouteUpdate::Join(random_server(&mut rng, id)));
    }
    let full = BlockRange::new(0, L);
    router.find_best_chain(full).ok();
    let before = router.repairs();
    // a latency change near the end only re-relaxes the tail
    let tail = router.active().find(|s| s.blocks.start >= L - 4).map(|s| s.id);
    if let Some(id) = tail {
        router.apply_update(RouteUpdate::Latency(id, 3.0));
        router.find_best_chain(full).ok();
        assert!(router.repairs() - before <= 5);
    }
    let again = router.repairs();
    router.find_best_chain(full).ok();
    assert_eq!(router.repairs(), again);
}

fn enumerate_chains(servers: &[RouteServer], at: usize, end: usize) -> f64 {
    if at == end {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for s in servers.iter().filter(|s| s.blocks.start <= at && at < s.blocks.end) {
        for e in at + 1..=s.blocks.end.min(end) {
            let c = s.rtt_ms + (e - at) as f64 * 1000.0 / s.throughput;
            best = best.min(c + enumerate_chains(servers, e, end));
        }
    }
    best
}

#[test]
fn best_chain_equals_enumeration_of_all_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..500 {
        let l = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=6);
        let servers: Vec<RouteServer> = (0..n)
            .map(|i| {
                let start = rng.gen_range(0..l);
                let end = rng.gen_range(start + 1..=l);
                RouteServer {
                    id: ServerId(i),
                    blocks: BlockRange::new(start, end),
                    throughput: rng.gen_range(1.0..100.0),
                    rtt_ms: rng.gen_range(0.0..50.0),
                }
            })
            .collect();
        let mut router = Router::new(l);
        for s in &servers {
            router.apply_update(RouteUpdate::Join(*s));
        }
        let banned: Vec<RouteServer> = servers.iter().filter(|_| rng.gen_bool(0.2)).copied().collect();
        for s in &banned {
            router.apply_update(RouteUpdate::Ban(s.id));
        }
        let allowed: Vec<RouteServer> = servers.iter().filter(|s| !banned.contains(s)).copied().collect();
        let start = rng.gen_range(0..l);
        let end = rng.gen_range(start + 1..=l);
        let want = enumerate_chains(&allowed, start, end);
        match router.find_best_chain(BlockRange::new(start, end)) {
            Ok(chain) => {
                assert!((chain.cost_ms - want).abs() <= 1e-9 * want.max(1.0), "{} vs {want}", chain.cost_ms);
                assert!(chain.servers().all(|id| banned.iter().all(|b| b.id != id)));
            }
            Err(_) => assert!(want.is_infinite()),
        }
    }
}
