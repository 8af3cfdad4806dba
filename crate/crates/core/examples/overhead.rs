//! Chaffing latency cost and outbound vs full-path tunnel creation time.

use noctunnel::experiment::{self, ExperimentConfig};
use noctunnel::Mesh;

fn main() -> noctunnel::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.mesh = Mesh::new(8, 8);
    cfg.overhead.seeds = 2;
    println!("{}", experiment::overhead(&cfg)?);
    Ok(())
}
