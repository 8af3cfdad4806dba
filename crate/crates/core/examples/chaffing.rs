//! Chaff and random delay on top of outbound tunnels.

use noctunnel::{Mesh, RunConfig, Simulation};

fn run(chaff: bool, delay: bool) -> noctunnel::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.sim.mesh = Mesh::new(8, 8);
    cfg.chaff.enabled = chaff;
    cfg.delay.enabled = delay;
    let mut sim = Simulation::new(cfg)?;
    sim.run_for(20_000)?;
    sim.drain(20_000)?;
    let s = sim.stats();
    let o = &s.obfuscation;
    let lat = sim.latency();
    println!(
        "chaff={chaff:<5} delay={delay:<5} latency {:.2} (p99 {})  dummies {} spliced {} chaff flits {} winnowed {} delayed {} (mean {:.2})  mismatches {}",
        lat.mean,
        lat.p99,
        o.dummy_packets,
        o.spliced_packets,
        o.chaff_flits,
        o.winnowed,
        o.delayed_packets,
        o.mean_delay(),
        s.delivery.flit_mismatch
    );
    Ok(())
}

fn main() -> noctunnel::Result<()> {
    run(false, false)?;
    run(true, false)?;
    run(false, true)?;
    run(true, true)
}
