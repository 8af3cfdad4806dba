//! Flag source/destination pairs whose probe packet counts line up.

use noctunnel::probe::{suspicion_scan, Direction, SuspicionConfig};
use noctunnel::{Coord, Mesh, RunConfig, Simulation};

fn main() -> noctunnel::Result<()> {
    let mut cfg = RunConfig::default();
    let mesh = Mesh::new(4, 4);
    cfg.sim.mesh = mesh;
    cfg.traffic.correlated = Some((Coord::new(0, 0), Coord::new(3, 2)));
    cfg.traffic.p = 100.0;
    let scan = SuspicionConfig::default();
    let mut sim = Simulation::new(cfg)?;
    sim.run_for(scan.period)?;

    let counts: Vec<(Coord, u64, u64)> = mesh
        .coords()
        .map(|c| {
            let n = mesh.node_id(c);
            let p = sim.probes();
            (
                c,
                p.packet_count(Direction::Outbound, n),
                p.packet_count(Direction::Inbound, n),
            )
        })
        .collect();
    for (c, out, inn) in &counts {
        println!("{c}: {out} out, {inn} in");
    }
    let flagged = suspicion_scan(&counts, &scan);
    println!("{} pairs within {:.0}%:", flagged.len(), 100.0 * scan.threshold);
    for (s, d) in flagged {
        println!("  {s} -> {d}");
    }
    Ok(())
}
