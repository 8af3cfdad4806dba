//! Baseline accuracy over a small grid of concentrations and array lengths.

use noctunnel::experiment::{self, ExperimentConfig};
use noctunnel::Mesh;

fn main() -> noctunnel::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.mesh = Mesh::new(4, 4);
    cfg.dataset.mappings = Some(60);
    cfg.sweep.p = vec![70.0, 90.0, 100.0];
    cfg.sweep.l = vec![50, 150];
    for row in experiment::sweep(&cfg, None)? {
        println!(
            "{:<32} {:>4} records  accuracy {:.4}  f1 {:.4}",
            row.point.label(),
            row.records,
            row.result.test.accuracy,
            row.result.test.f1
        );
    }
    Ok(())
}
