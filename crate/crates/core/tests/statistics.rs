use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use noctunnel::correlator::similarity;
use noctunnel::obfuscation::{draw_delay, DelayConfig};
use noctunnel::probe::IfdArray;
use noctunnel::rng::{stream_rng, Stream};
use noctunnel::traffic::{pick_destination, tick_inject, TrafficConfig};
use noctunnel::tunnel::TunnelMode;
use noctunnel::{Coord, Mesh, RunConfig, Simulation};

/// Upper-tail p-value of Pearson's chi-square for observed counts against
/// equal expected counts.
fn uniform_chi2_p(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn delay_draws_are_uniform_over_range() {
    let cfg = DelayConfig {
        enabled: true,
        pd: 50.0,
        range: (1, 5),
    };
    let mut rng = stream_rng(3, Stream::Delay, 0);
    let mut hist = [0u64; 5];
    let mut hits = 0;
    let n = 100_000;
    for _ in 0..n {
        if let Some(d) = draw_delay(&cfg, &mut rng) {
            hist[(d - 1) as usize] += 1;
            hits += 1;
        }
    }
    let rate = hits as f64 / n as f64;
    assert!((rate - 0.5).abs() < 0.01, "delay rate {rate}");
    let p = uniform_chi2_p(&hist);
    assert!(p > 0.01, "histogram {hist:?} p={p}");
}

#[test]
fn disabled_delay_never_fires() {
    let cfg = DelayConfig {
        pd: 100.0,
        ..DelayConfig::default()
    };
    let mut rng = stream_rng(3, Stream::Delay, 1);
    assert!((0..1_000).all(|_| draw_delay(&cfg, &mut rng).is_none()));
}

#[test]
fn correlated_source_hits_partner_p_percent() {
    let mesh = Mesh::new(8, 8);
    let (s, d) = (Coord::new(1, 2), Coord::new(6, 5));
    let cfg = TrafficConfig {
        p: 80.0,
        correlated: Some((s, d)),
        ..TrafficConfig::default()
    };
    let mut rng = stream_rng(5, Stream::Traffic, 0);
    let n = 100_000;
    let mut hits = 0;
    let mut others = vec![0u64; mesh.nodes()];
    for _ in 0..n {
        let c = pick_destination(&mesh, &cfg, s, &mut rng);
        if c == d {
            hits += 1;
        } else {
            others[mesh.node_id(c)] += 1;
        }
    }
    let frac = hits as f64 / n as f64;
    assert!((frac - 0.80).abs() <= 0.01, "{frac}");
    // the remainder is uniform over everyone but the pair
    assert_eq!(others[mesh.node_id(s)], 0);
    let rest: Vec<u64> = mesh
        .coords()
        .filter(|&c| c != s && c != d)
        .map(|c| others[mesh.node_id(c)])
        .collect();
    assert!(uniform_chi2_p(&rest) > 0.01);
}

#[test]
fn background_destinations_are_uniform() {
    let mesh = Mesh::new(4, 4);
    let cfg = TrafficConfig::default();
    for src in [Coord::new(0, 0), Coord::new(2, 1)] {
        let mut rng = stream_rng(9, Stream::Traffic, mesh.node_id(src) as u64);
        let mut hist = vec![0u64; mesh.nodes()];
        for _ in 0..60_000 {
            hist[mesh.node_id(pick_destination(&mesh, &cfg, src, &mut rng))] += 1;
        }
        assert_eq!(hist[mesh.node_id(src)], 0);
        hist.remove(mesh.node_id(src));
        let p = uniform_chi2_p(&hist);
        assert!(p > 0.01, "{src}: p={p}");
    }
}

#[test]
fn injection_draws_match_rate() {
    let mesh = Mesh::new(8, 8);
    let cfg = TrafficConfig {
        tir: 0.01,
        ..TrafficConfig::default()
    };
    let mut rng = stream_rng(2, Stream::Traffic, 0);
    let n = 1_000_000;
    let k = (0..n)
        .filter(|_| tick_inject(&mesh, &cfg, Coord::new(0, 0), &mut rng).is_some())
        .count();
    let rate = k as f64 / n as f64;
    assert!((rate / 0.01 - 1.0).abs() <= 0.05, "{rate}");
}

#[test]
fn simulated_injection_rate_within_five_percent() {
    let mut cfg = RunConfig::default();
    cfg.sim.mesh = Mesh::new(8, 8);
    cfg.sim.seed = 8;
    cfg.tunnel.mode = TunnelMode::Plain;
    cfg.traffic.tir = 0.01;
    let cycles = 20_000;
    let mut sim = Simulation::new(cfg).unwrap();
    sim.run_for(cycles).unwrap();
    let expected = 0.01 * 64.0 * cycles as f64;
    let created = sim.stats().delivery.created as f64;
    assert!((created / expected - 1.0).abs() <= 0.05, "{created} vs {expected}");
}

#[test]
fn independent_flows_rarely_correlate() {
    let mut rng = stream_rng(11, Stream::Dataset, 0);
    let l = 250;
    let trials = 10_000;
    let mut under = 0;
    for _ in 0..trials {
        let mut arr = || IfdArray {
            values: (0..l).map(|_| rng.random_range(1..=40u64)).collect(),
            valid_len: l,
        };
        let (a, b) = (arr(), arr());
        if similarity(&a, &b).abs() < 0.2 {
            under += 1;
        }
    }
    let frac = under as f64 / trials as f64;
    assert!(frac > 0.99, "{frac}");
}
