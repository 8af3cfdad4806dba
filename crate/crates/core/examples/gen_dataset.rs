//! Generate a small labelled flow-pair dataset.
//!
//! Usage: cargo run --release --example gen_dataset [OUT.ndjson]

use std::path::PathBuf;

use noctunnel::experiment::{self, ExperimentConfig};
use noctunnel::Mesh;

fn main() -> noctunnel::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("flows.ndjson"));
    let mut cfg = ExperimentConfig::default();
    cfg.sim.mesh = Mesh::new(4, 4);
    cfg.probe.l = 100;
    cfg.dataset.mappings = Some(40);

    let records = experiment::write_dataset(&cfg, &out)?;
    let positives = records.iter().filter(|r| r.label == 1).count();
    println!(
        "{} records ({positives} positive) written to {}",
        records.len(),
        out.display()
    );
    if let Some(r) = records.first() {
        println!(
            "first: {} -> {}, ifd_out {:?}...",
            r.src,
            r.dst,
            &r.ifd_out[..10.min(r.l())]
        );
    }
    Ok(())
}
