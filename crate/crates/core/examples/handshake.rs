//! Build one outbound tunnel on an idle 8x8 mesh and walk its VCI chain.

use noctunnel::tunnel::has_y_to_x_turn;
use noctunnel::{Coord, Mesh, RunConfig, Simulation};

fn main() -> noctunnel::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.sim.mesh = Mesh::new(8, 8);
    cfg.traffic.tir = 0.0;
    let mut sim = Simulation::new(cfg)?;

    let src = Coord::new(1, 1);
    // queued data is what triggers the handshake
    sim.schedule(0, src, Coord::new(6, 6), 5);
    sim.run_until(5_000, |s| !s.stats().handshakes.is_empty())?;

    let hs = sim.stats().handshakes[0];
    println!(
        "tunnel {} -> {}: {} hops, TI sent at {}, ready at {} ({} cycles)",
        hs.src,
        hs.endpoint,
        hs.hops,
        hs.ti_sent,
        hs.ready,
        hs.cycles()
    );
    let (path, ports) = sim.verify_tunnel(hs.opuk_pair).map_err(noctunnel::Error::Data)?;
    let hops: Vec<String> = path.iter().map(|c| c.to_string()).collect();
    println!("chain {}", hops.join(" -> "));
    println!("ports {ports:?}, Y->X turn: {}", has_y_to_x_turn(&ports));

    sim.drain(10_000)?;
    for ev in sim.tunnel_log() {
        println!("{:>5} {:?} {} -> {}", ev.cycle, ev.kind, ev.src, ev.endpoint);
    }
    Ok(())
}
