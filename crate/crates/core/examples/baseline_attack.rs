//! Pearson correlation attack against plain and chaffed traffic.

use noctunnel::correlator::score;
use noctunnel::experiment::{self, ExperimentConfig};
use noctunnel::Mesh;

fn attack(chaff: bool) -> noctunnel::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.mesh = Mesh::new(4, 4);
    cfg.probe.l = 250;
    cfg.chaff.enabled = chaff;
    let records = experiment::gen_dataset(&cfg)?;
    let mean = |label: u8| {
        let s: Vec<f64> = records.iter().filter(|r| r.label == label).map(score).collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    let r = experiment::baseline_eval(&records, cfg.sim.seed)?;
    println!(
        "chaff={chaff:<5} {} records, mean score +{:.3} / -{:.3}, threshold {:.3}, test accuracy {:.4} recall {:.4} precision {:.4}",
        records.len(),
        mean(1),
        mean(0),
        r.threshold,
        r.test.accuracy,
        r.test.recall,
        r.test.precision
    );
    Ok(())
}

fn main() -> noctunnel::Result<()> {
    attack(false)?;
    attack(true)
}
