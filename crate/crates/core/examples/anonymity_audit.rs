//! Audit what every router could name while forwarding data packets.

use noctunnel::sim::stats::Role;
use noctunnel::{Mesh, RunConfig, Simulation};

fn main() -> noctunnel::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.sim.mesh = Mesh::new(8, 8);
    cfg.sim.audit = true;
    let mut sim = Simulation::new(cfg)?;
    sim.run_until(100_000, |s| s.stats().delivery.created >= 2_000)?;
    sim.drain(20_000)?;

    let s = sim.stats();
    let a = &s.anonymity;
    println!("{} of {} packets delivered", s.delivery.delivered, s.delivery.created);
    for role in [Role::MidTunnel, Role::Endpoint, Role::PostTunnel] {
        println!("{role:?}: {} observations", a.observations[role as usize]);
    }
    println!("named the source: {}", a.names_source);
    println!("named source and destination: {}", a.names_both);
    println!("mid-tunnel routers naming anyone: {}", a.mid_tunnel_names);
    println!("endpoints that learned the destination: {}", a.endpoint_names_dest);
    for v in &a.first_violations {
        println!("violation: {v}");
    }
    Ok(())
}
