use std::collections::BTreeSet;

use noctunnel::tunnel::TunnelMode;
use noctunnel::{Mesh, RunConfig, Simulation};

fn rotating(mode: TunnelMode, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.sim.mesh = Mesh::new(4, 4);
    cfg.sim.seed = seed;
    cfg.traffic.tir = 0.01;
    cfg.tunnel.mode = mode;
    cfg.tunnel.timeout = Some(200);
    cfg.tunnel.drain_window = 300;
    cfg
}

fn live_pairs(sim: &Simulation) -> BTreeSet<u64> {
    sim.mesh()
        .coords()
        .flat_map(|c| sim.agent(c).tunnels().map(|t| t.opuk_pair).collect::<Vec<_>>())
        .collect()
}

/// Run with traffic, drain, then idle past the drain window so every
/// retired tunnel has been torn down.
fn settle(cfg: RunConfig, cycles: u64) -> Simulation {
    let window = cfg.tunnel.drain_window;
    let mut sim = Simulation::new(cfg).unwrap();
    sim.run_for(cycles).unwrap();
    assert!(sim.drain(20_000).unwrap());
    sim.run_for(window + 1).unwrap();
    sim
}

#[test]
fn rotation_keeps_delivering_and_tears_down_old_state() {
    let sim = settle(rotating(TunnelMode::Outbound, 4), 6_000);
    let s = sim.stats();
    assert!(s.protocol.rotations > 16, "{:?}", s.protocol);
    assert_eq!(s.delivery.delivered, s.delivery.created);
    assert_eq!(s.delivery.flit_mismatch + s.delivery.payload_mismatch, 0);
    assert_eq!(s.protocol.unknown_vci_drops, 0);
    assert_eq!(s.protocol.authenticity_failures, 0);
    assert_eq!(
        s.protocol.handshakes_started,
        s.protocol.handshakes_completed + s.protocol.handshakes_abandoned
    );

    let live = live_pairs(&sim);
    for &pair in &live {
        sim.verify_tunnel(pair).unwrap();
    }
    let installed: BTreeSet<u64> = sim
        .routers()
        .iter()
        .flat_map(|r| r.routes().map(|e| e.opuk_pair))
        .collect();
    assert!(
        installed.is_subset(&live),
        "leaked router state for {:?}",
        installed.difference(&live).collect::<Vec<_>>()
    );
}

#[test]
fn successive_tunnels_change_endpoint() {
    let sim = settle(rotating(TunnelMode::Outbound, 5), 4_000);
    let hs = &sim.stats().handshakes;
    for src in sim.mesh().coords() {
        let eps: Vec<_> = hs.iter().filter(|h| h.src == src).map(|h| h.endpoint).collect();
        for w in eps.windows(2) {
            assert_ne!(w[0], w[1], "{src} reused endpoint {}", w[0]);
        }
    }
}

#[test]
fn full_path_tunnels_end_at_destination() {
    let sim = settle(rotating(TunnelMode::FullPath, 6), 3_000);
    let s = sim.stats();
    assert_eq!(s.delivery.delivered, s.delivery.created);
    assert!(!s.handshakes.is_empty());
    for c in sim.mesh().coords() {
        for t in sim.agent(c).tunnels() {
            assert_eq!(Some(t.endpoint), t.dest);
            assert_eq!(t.hop_count, c.manhattan(t.endpoint));
        }
    }
    // nothing stays in the delay pen or queues
    assert!(sim.is_quiescent());
}

#[test]
fn idle_nodes_build_no_tunnels() {
    let mut cfg = rotating(TunnelMode::Outbound, 7);
    cfg.traffic.tir = 0.0;
    let mut sim = Simulation::new(cfg).unwrap();
    sim.run_for(2_000).unwrap();
    assert_eq!(sim.stats().protocol.handshakes_started, 0);
}
