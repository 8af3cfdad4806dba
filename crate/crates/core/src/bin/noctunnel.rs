use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use noctunnel::experiment::{self, ExperimentConfig};
use noctunnel::tunnel::TunnelMode;
use noctunnel::{Mesh, Result};

#[derive(Parser)]
#[command(
    name = "noctunnel",
    version,
    about = "Anonymous-routing NoC simulator and flow-correlation experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation and write stats, tunnel log and obfuscation stats.
    Simulate(Common),
    /// Generate a labelled flow-pair dataset (NDJSON).
    GenDataset(Common),
    /// Measure chaffing latency overhead and tunnel-creation cost.
    Overhead(Common),
    /// Evaluate the Pearson correlator on a dataset and write a metrics CSV.
    BaselineEval {
        dataset: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Expected IFD array length.
        #[arg(long)]
        l: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset generation plus baseline evaluation over the configured sweep axes.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mesh size, e.g. 8x8.
    #[arg(long)]
    mesh: Option<Mesh>,
    /// Concentration percent of the correlated pair.
    #[arg(long)]
    p: Option<f64>,
    /// Traffic injection rate.
    #[arg(long)]
    tir: Option<f64>,
    /// IFD array length.
    #[arg(long)]
    l: Option<usize>,
    /// Enable chaffing, optionally with a chaffing percentage.
    #[arg(long, num_args = 0..=1, value_name = "PC")]
    chaff: Option<Option<f64>>,
    /// Enable random delay, optionally with a delay percentage.
    #[arg(long, num_args = 0..=1, value_name = "PD")]
    delay: Option<Option<f64>>,
    /// Tunnel mode: outbound, full-path or plain.
    #[arg(long)]
    mode: Option<TunnelMode>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.sim.seed = s;
        }
        if let Some(m) = self.mesh {
            cfg.sim.mesh = m;
        }
        if let Some(p) = self.p {
            cfg.traffic.p = p;
        }
        if let Some(t) = self.tir {
            cfg.traffic.tir = t;
        }
        if let Some(l) = self.l {
            cfg.probe.l = l;
        }
        if let Some(pc) = self.chaff {
            cfg.chaff.enabled = true;
            cfg.chaff.pc = pc.unwrap_or(cfg.chaff.pc);
        }
        if let Some(pd) = self.delay {
            cfg.delay.enabled = true;
            cfg.delay.pd = pd.unwrap_or(cfg.delay.pd);
        }
        if let Some(m) = self.mode {
            cfg.tunnel.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate(c) => {
            let cfg = c.resolve()?;
            let r = experiment::simulate(&cfg, c.out.as_deref())?;
            let d = &r.stats.delivery;
            println!(
                "{} cycles, {} of {} packets delivered, latency mean {:.2} p50 {} p99 {}",
                r.cycles, d.delivered, d.created, r.latency.mean, r.latency.p50, r.latency.p99
            );
            println!(
                "handshakes {} completed, {} rotations, {} chaff flits, {} winnowed",
                r.stats.protocol.handshakes_completed,
                r.stats.protocol.rotations,
                r.stats.obfuscation.chaff_flits,
                r.stats.obfuscation.winnowed
            );
        }
        Cmd::GenDataset(c) => {
            let cfg = c.resolve()?;
            let out = c.out.unwrap_or_else(|| PathBuf::from("dataset.ndjson"));
            let records = experiment::write_dataset(&cfg, &out)?;
            println!("{} records written to {}", records.len(), out.display());
        }
        Cmd::Overhead(c) => {
            let cfg = c.resolve()?;
            let report = experiment::overhead(&cfg)?;
            if let Some(dir) = &c.out {
                experiment::write_overhead(&report, &cfg, dir)?;
            }
            println!("{report}");
        }
        Cmd::BaselineEval { dataset, seed, l, out } => {
            let r = experiment::baseline_eval_file(&dataset, l, seed.unwrap_or(1), out.as_deref())?;
            let m = r.test;
            println!(
                "threshold {:.4}: accuracy {:.4} recall {:.4} precision {:.4} f1 {:.4} (tp {} tn {} fp {} fn {})",
                r.threshold, m.accuracy, m.recall, m.precision, m.f1, m.tp, m.tn, m.fp, m.fn_
            );
        }
        Cmd::Sweep(c) => {
            let cfg = c.resolve()?;
            let rows = experiment::sweep(&cfg, c.out.as_deref())?;
            for r in rows {
                println!(
                    "{}: {} records, accuracy {:.4}",
                    r.point.label(),
                    r.records,
                    r.result.test.accuracy
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
