//! Mean packet latency against injection rate for each routing mode.

use noctunnel::tunnel::TunnelMode;
use noctunnel::{Mesh, RunConfig, Simulation};

fn main() -> noctunnel::Result<()> {
    println!("{:>8} {:>10} {:>10} {:>10}", "tir", "plain", "outbound", "full-path");
    for tir in [0.002, 0.005, 0.01, 0.02, 0.04] {
        let mut row = Vec::new();
        for mode in [TunnelMode::Plain, TunnelMode::Outbound, TunnelMode::FullPath] {
            let mut cfg = RunConfig::default();
            cfg.sim.mesh = Mesh::new(8, 8);
            cfg.traffic.tir = tir;
            cfg.tunnel.mode = mode;
            let mut sim = Simulation::new(cfg)?;
            sim.run_for(10_000)?;
            row.push(sim.latency().mean);
        }
        println!("{tir:>8} {:>10.2} {:>10.2} {:>10.2}", row[0], row[1], row[2]);
    }
    Ok(())
}
