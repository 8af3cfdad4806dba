//! Synthetic workloads: uniform-random background traffic with one
//! correlated source sending `p` percent of its packets to one destination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::{Coord, Mesh};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    /// Packet-creation probability per node per cycle.
    pub tir: f64,
    /// Percent of the correlated source's packets sent to its partner.
    pub p: f64,
    pub correlated: Option<(Coord, Coord)>,
    pub packet_flits: usize,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            tir: 0.01,
            p: 90.0,
            correlated: None,
            packet_flits: 5,
        }
    }
}

impl TrafficConfig {
    pub fn validate(&self, mesh: &Mesh) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.tir) {
            return Err(format!("injection rate must be within 0..=1, got {}", self.tir));
        }
        if !(self.p > 50.0 && self.p <= 100.0) {
            return Err(format!("concentration p must be in (50, 100], got {}", self.p));
        }
        if self.packet_flits == 0 {
            return Err("packet_flits must be >= 1".into());
        }
        if mesh.nodes() < 2 {
            return Err(format!("a {mesh} mesh has no one to talk to"));
        }
        if let Some((s, d)) = self.correlated {
            if s == d {
                return Err(format!("correlated pair needs distinct nodes, got {s} twice"));
            }
            if !mesh.contains(s) || !mesh.contains(d) {
                return Err(format!("correlated pair {s}->{d} outside the {mesh} mesh"));
            }
            if mesh.nodes() < 3 && self.p < 100.0 {
                return Err("noise traffic from the correlated source needs a third node".into());
            }
        }
        Ok(())
    }
}

/// Uniform draw over the mesh, skipping the excluded nodes.
fn uniform_except<R: Rng + ?Sized>(mesh: &Mesh, exclude: &[Coord], rng: &mut R) -> Coord {
    let mut ids: Vec<usize> = exclude.iter().map(|&c| mesh.node_id(c)).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut k = rng.random_range(0..mesh.nodes() - ids.len());
    // shift k past every excluded id at or below it
    for id in ids {
        if k >= id {
            k += 1;
        }
    }
    mesh.coord(k)
}

/// One cycle of packet creation at `node`; returns the destination when a
/// packet is created.
pub fn tick_inject<R: Rng + ?Sized>(mesh: &Mesh, cfg: &TrafficConfig, node: Coord, rng: &mut R) -> Option<Coord> {
    if cfg.tir <= 0.0 || !rng.random_bool(cfg.tir) {
        return None;
    }
    Some(pick_destination(mesh, cfg, node, rng))
}

pub fn pick_destination<R: Rng + ?Sized>(mesh: &Mesh, cfg: &TrafficConfig, node: Coord, rng: &mut R) -> Coord {
    match cfg.correlated {
        Some((s, d)) if s == node => {
            if rng.random_range(0.0..100.0) < cfg.p {
                d
            } else {
                uniform_except(mesh, &[s, d], rng)
            }
        }
        _ => uniform_except(mesh, &[node], rng),
    }
}
