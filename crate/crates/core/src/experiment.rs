//! Experiment drivers: single runs, dataset generation, overhead
//! measurements, Pearson baseline evaluation and parameter sweeps.
//!
//! Every driver takes an [`ExperimentConfig`], which is also the TOML schema
//! of `--config` files:
//!
//! ```toml
//! [sim]
//! mesh = "4x4"
//! seed = 7
//! [traffic]
//! tir = 0.01
//! p = 90.0
//! [chaff]
//! enabled = true
//! pc = 50.0
//! [dataset]
//! negatives = 2
//! [sweep]
//! p = [95.0, 90.0]
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlator::{self, MetricsReport};
use crate::dataset::{self, FlowPairRecord, ObfMeta, RecordMeta};
use crate::error::{Error, Result};
use crate::mesh::{Coord, Mesh};
use crate::obfuscation::{ChaffConfig, DelayConfig};
use crate::probe::ProbeConfig;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sim::stats::{LatencyStats, SimStats};
use crate::sim::trace::{write_trace, write_tunnel_log};
use crate::sim::{RunConfig, SimConfig, Simulation};
use crate::traffic::TrafficConfig;
use crate::tunnel::{TunnelConfig, TunnelMode};

/// Chaffing latency increase reported for the reference design, percent.
pub const REFERENCE_CHAFF_OVERHEAD_PCT: f64 = 13.0;
/// Tunnel-creation advantage over a full-path tunnel reported for the reference design, percent.
pub const REFERENCE_HANDSHAKE_ADVANTAGE_PCT: f64 = 35.53;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Uncorrelated records drawn per run.
    pub negatives: usize,
    /// Number of runs. `None` runs every ordered node pair `repeats` times;
    /// a number cycles through seeded shuffles of all ordered pairs.
    pub mappings: Option<usize>,
    pub repeats: usize,
    /// Per-run cycle budget while waiting for the probes to fill.
    pub run_cap: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            negatives: 2,
            mappings: None,
            repeats: 1,
            run_cap: 200_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverheadConfig {
    /// Matched seed pairs per comparison.
    pub seeds: u64,
    /// Cycles of synthetic traffic per latency run.
    pub cycles: u64,
    /// Destinations at least this far from the source for the handshake comparison.
    pub min_hops: u32,
    /// Cycles between successive scripted sources in the handshake comparison.
    pub gap: u64,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        OverheadConfig {
            seeds: 3,
            cycles: 20_000,
            min_hops: 6,
            gap: 400,
        }
    }
}

/// Sweep axes. An empty axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub p: Vec<f64>,
    pub tir: Vec<f64>,
    pub l: Vec<usize>,
    pub mesh: Vec<Mesh>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub traffic: TrafficConfig,
    pub tunnel: TunnelConfig,
    pub chaff: ChaffConfig,
    pub delay: DelayConfig,
    pub probe: ProbeConfig,
    pub dataset: DatasetConfig,
    pub overhead: OverheadConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            sim: self.sim,
            traffic: self.traffic,
            tunnel: self.tunnel,
            chaff: self.chaff,
            delay: self.delay,
            probe: self.probe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.run_config().validate()?;
        let s = &self.sweep;
        for &p in &s.p {
            TrafficConfig { p, ..self.traffic }
                .validate(&self.sim.mesh)
                .map_err(Error::Config)?;
        }
        for &tir in &s.tir {
            if !(tir > 0.0 && tir <= 1.0) {
                return Err(Error::Config(format!("sweep injection rate {tir} outside (0, 1]")));
            }
        }
        if s.l.contains(&0) {
            return Err(Error::Config("sweep IFD length must be positive".into()));
        }
        for &mesh in &s.mesh {
            RunConfig {
                sim: SimConfig { mesh, ..self.sim },
                traffic: TrafficConfig {
                    correlated: None,
                    ..self.traffic
                },
                ..self.run_config()
            }
            .validate()?;
        }
        if self.dataset.repeats == 0 || self.dataset.mappings == Some(0) {
            return Err(Error::Config("dataset needs at least one mapping".into()));
        }
        if self.overhead.seeds == 0 {
            return Err(Error::Config("overhead needs at least one seed".into()));
        }
        Ok(())
    }

    fn obf_meta(&self) -> ObfMeta {
        ObfMeta {
            chaff: self.chaff.enabled,
            delay: self.delay.enabled,
            pc: self.chaff.pc,
            pd: self.delay.pd,
        }
    }
}

fn write_config_sidecar(dir: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let path = dir.join("config.toml");
    dataset::write_atomic(&path, |w| w.write_all(cfg.to_toml().as_bytes()))?;
    Ok(path)
}

// ---- simulate ---------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub config: ExperimentConfig,
    pub cycles: u64,
    pub drained: bool,
    pub latency: LatencyStats,
    pub stats: SimStats,
}

/// One run to `max_cycles`, then drain. With `out` set, writes
/// `stats.json`, `tunnel_log.csv`, `obfuscation.csv`, `config.toml` and,
/// when tracing, `trace.csv`.
pub fn simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SimulateReport> {
    cfg.validate()?;
    let mut sim = Simulation::new(cfg.run_config())?;
    sim.run()?;
    let cycles = sim.cycle();
    let drained = sim.drain(cfg.sim.max_cycles.max(10_000))?;
    let mut stats = sim.stats().clone();
    // deliveries are summarised by `latency`; the per-packet list stays out of the report
    let deliveries = std::mem::take(&mut stats.deliveries);
    let report = SimulateReport {
        config: cfg.clone(),
        cycles,
        drained,
        latency: sim.latency(),
        stats,
    };
    if let Some(dir) = out {
        write_config_sidecar(dir, cfg)?;
        dataset::write_atomic(&dir.join("stats.json"), |w| {
            serde_json::to_writer_pretty(&mut *w, &report)?;
            w.write_all(b"\n")
        })?;
        dataset::write_atomic(&dir.join("tunnel_log.csv"), |w| write_tunnel_log(w, sim.tunnel_log()))?;
        let o = &report.stats.obfuscation;
        dataset::write_atomic(&dir.join("obfuscation.csv"), |w| {
            writeln!(w, "run_id,chaff_pkts,chaff_flits,winnowed,delayed_pkts,mean_delay")?;
            writeln!(
                w,
                "{},{},{},{},{},{:.6}",
                cfg.sim.seed,
                o.dummy_packets + o.spliced_packets,
                o.chaff_flits,
                o.winnowed,
                o.delayed_packets,
                o.mean_delay()
            )
        })?;
        dataset::write_atomic(&dir.join("latency.csv"), |w| {
            writeln!(w, "src,dst,created,injected,ejected")?;
            for d in &deliveries {
                writeln!(
                    w,
                    "{}:{},{}:{},{},{},{}",
                    d.src.x, d.src.y, d.dst.x, d.dst.y, d.created, d.injected, d.ejected
                )?;
            }
            Ok(())
        })?;
        if cfg.sim.record_trace {
            dataset::write_atomic(&dir.join("trace.csv"), |w| write_trace(w, sim.trace()))?;
        }
    }
    Ok(report)
}

// ---- datasets ---------------------------------------------------------

/// Correlated pairs, one per run.
pub fn dataset_mappings(mesh: &Mesh, cfg: &DatasetConfig, seed: u64) -> Vec<(Coord, Coord)> {
    let pairs: Vec<(Coord, Coord)> = mesh
        .coords()
        .flat_map(|a| mesh.coords().filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    match cfg.mappings {
        None => (0..cfg.repeats).flat_map(|_| pairs.iter().copied()).collect(),
        Some(n) => {
            let mut rng = stream_rng(seed, Stream::Mapping, 0);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let mut round = pairs.clone();
                round.shuffle(&mut rng);
                out.extend(round.into_iter().take(n - out.len()));
            }
            out
        }
    }
}

/// Simulate one mapping until every probe holds `l` delays (or the cycle
/// budget runs out) and assemble its records.
pub fn dataset_run(cfg: &ExperimentConfig, index: usize, pair: (Coord, Coord)) -> Result<Vec<FlowPairRecord>> {
    let seed = derive_seed(cfg.sim.seed, Stream::Dataset, index as u64);
    let mut run = cfg.run_config();
    run.sim.seed = seed;
    run.traffic.correlated = Some(pair);
    let mut sim = Simulation::new(run)?;
    let full = sim.run_until(cfg.dataset.run_cap, |s| s.probes().full())?;
    if !full {
        log::info!(
            "mapping {index} {}->{}: probes not full after {} cycles",
            pair.0,
            pair.1,
            sim.cycle()
        );
    }
    let meta = RecordMeta {
        mesh: cfg.sim.mesh,
        p: cfg.traffic.p,
        tir: cfg.traffic.tir,
        obf: cfg.obf_meta(),
        seed,
    };
    let mut rng = stream_rng(seed, Stream::Dataset, 0);
    Ok(dataset::assemble_records(
        sim.probes(),
        &meta,
        pair,
        cfg.probe.l,
        cfg.dataset.negatives,
        &mut rng,
    ))
}

/// All mappings in parallel; records come back in mapping order with
/// sequential pair ids.
pub fn gen_dataset(cfg: &ExperimentConfig) -> Result<Vec<FlowPairRecord>> {
    cfg.validate()?;
    let mappings = dataset_mappings(&cfg.sim.mesh, &cfg.dataset, cfg.sim.seed);
    let runs: Vec<Vec<FlowPairRecord>> = mappings
        .par_iter()
        .enumerate()
        .map(|(i, &pair)| dataset_run(cfg, i, pair))
        .collect::<Result<_>>()?;
    let mut records: Vec<FlowPairRecord> = runs.into_iter().flatten().collect();
    for (i, r) in records.iter_mut().enumerate() {
        r.pair_id = i as u64;
    }
    Ok(records)
}

/// Generate and write a dataset plus its `config.toml` sidecar.
pub fn write_dataset(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<FlowPairRecord>> {
    let records = gen_dataset(cfg)?;
    dataset::export_ndjson(&records, path)?;
    let sidecar = path.with_extension("config.toml");
    dataset::write_atomic(&sidecar, |w| w.write_all(cfg.to_toml().as_bytes()))?;
    Ok(records)
}

// ---- baseline ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineResult {
    pub threshold: f64,
    pub train: MetricsReport,
    pub test: MetricsReport,
}

/// Seeded 2:1 split, threshold fit on train, metrics on test.
pub fn baseline_eval(records: &[FlowPairRecord], seed: u64) -> Result<BaselineResult> {
    let (train, test) = dataset::split_train_test(records, seed)?;
    let model = correlator::fit_threshold(&train)?;
    Ok(BaselineResult {
        threshold: model.threshold,
        train: correlator::evaluate(&model, &train)?,
        test: correlator::evaluate(&model, &test)?,
    })
}

pub fn baseline_eval_file(path: &Path, l: Option<usize>, seed: u64, csv: Option<&Path>) -> Result<BaselineResult> {
    let records = dataset::load_ndjson(path, l)?;
    let res = baseline_eval(&records, seed)?;
    if let Some(csv) = csv {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        dataset::write_atomic(csv, |w| {
            correlator::write_metrics_csv(w, &[(name, "pearson".to_string(), res.test)])
        })?;
    }
    Ok(res)
}

// ---- overhead ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChaffOverhead {
    pub packets_base: usize,
    pub packets_chaff: usize,
    pub latency_base: f64,
    pub latency_chaff: f64,
    /// Relative change of mean packet latency, percent.
    pub delta_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HandshakeOverhead {
    pub samples: usize,
    pub outbound_cycles: f64,
    pub full_path_cycles: f64,
    /// How much shorter the outbound handshake is, percent of full-path.
    pub advantage_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverheadReport {
    pub chaff: ChaffOverhead,
    pub handshake: HandshakeOverhead,
    pub reference_chaff_pct: f64,
    pub reference_handshake_pct: f64,
}

impl fmt::Display for OverheadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.chaff;
        let h = &self.handshake;
        writeln!(
            f,
            "chaff latency: {:.3} -> {:.3} cycles ({:+.2}%, reference {:+.2}%)",
            c.latency_base, c.latency_chaff, c.delta_pct, self.reference_chaff_pct
        )?;
        write!(
            f,
            "handshake: outbound {:.2} vs full-path {:.2} cycles over {} tunnels ({:.2}% faster, reference {:.2}%)",
            h.outbound_cycles, h.full_path_cycles, h.samples, h.advantage_pct, self.reference_handshake_pct
        )
    }
}

fn mean(v: &[u64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<u64>() as f64 / v.len() as f64
    }
}

/// Mean latency with and without chaffing over matched seeds.
pub fn chaff_overhead(cfg: &ExperimentConfig) -> Result<ChaffOverhead> {
    let runs: Vec<(Vec<u64>, Vec<u64>)> = (0..cfg.overhead.seeds)
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed(cfg.sim.seed, Stream::Mapping, k + 1);
            let lat = |chaff: bool| -> Result<Vec<u64>> {
                let mut run = cfg.run_config();
                run.sim.seed = seed;
                run.sim.max_cycles = cfg.overhead.cycles;
                run.tunnel.mode = TunnelMode::Outbound;
                run.chaff.enabled = chaff;
                run.delay.enabled = false;
                let mut sim = Simulation::new(run)?;
                sim.run()?;
                if !sim.drain(cfg.overhead.cycles.max(10_000))? {
                    return Err(Error::Stall("latency run did not drain".into()));
                }
                let from = run.sim.warmup;
                Ok(sim
                    .stats()
                    .deliveries
                    .iter()
                    .filter(|d| d.created >= from && d.created < cfg.overhead.cycles)
                    .map(|d| d.latency())
                    .collect())
            };
            Ok((lat(false)?, lat(true)?))
        })
        .collect::<Result<_>>()?;
    let base: Vec<u64> = runs.iter().flat_map(|r| r.0.iter().copied()).collect();
    let chaff: Vec<u64> = runs.iter().flat_map(|r| r.1.iter().copied()).collect();
    let (lb, lc) = (mean(&base), mean(&chaff));
    Ok(ChaffOverhead {
        packets_base: base.len(),
        packets_chaff: chaff.len(),
        latency_base: lb,
        latency_chaff: lc,
        delta_pct: if lb > 0.0 { 100.0 * (lc - lb) / lb } else { 0.0 },
    })
}

/// Handshake cycles for tunnels built for single far-away packets.
///
/// Each source in turn sends one packet to a destination at least
/// `min_hops` away, `gap` cycles apart so handshakes do not overlap. The
/// same schedule runs once with outbound tunnels and once with full-path
/// tunnels.
pub fn handshake_overhead(cfg: &ExperimentConfig) -> Result<HandshakeOverhead> {
    let mesh = cfg.sim.mesh;
    let oh = cfg.overhead;
    let per_seed: Vec<(Vec<u64>, Vec<u64>)> = (0..oh.seeds)
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed(cfg.sim.seed, Stream::Mapping, 1000 + k);
            let mut rng = stream_rng(seed, Stream::Mapping, 0);
            let script: Vec<(Coord, Coord)> = mesh
                .coords()
                .filter_map(|s| {
                    let far: Vec<Coord> = mesh.coords().filter(|d| s.manhattan(*d) >= oh.min_hops).collect();
                    far.choose(&mut rng).map(|&d| (s, d))
                })
                .collect();
            let cycles = |mode: TunnelMode| -> Result<Vec<u64>> {
                let mut run = cfg.run_config();
                run.sim.seed = seed;
                run.traffic.tir = 0.0;
                run.traffic.correlated = None;
                run.tunnel.mode = mode;
                run.tunnel.timeout = None;
                run.chaff.enabled = false;
                run.delay.enabled = false;
                let mut sim = Simulation::new(run)?;
                for (i, &(s, d)) in script.iter().enumerate() {
                    sim.schedule(i as u64 * oh.gap, s, d, run.traffic.packet_flits);
                }
                let limit = script.len() as u64 * oh.gap + 100_000;
                if !sim.drain(limit)? {
                    return Err(Error::Stall("handshake run did not drain".into()));
                }
                let h = &sim.stats().handshakes;
                if h.len() != script.len() {
                    return Err(Error::Stall(format!(
                        "{} of {} handshakes completed",
                        h.len(),
                        script.len()
                    )));
                }
                Ok(h.iter().map(|r| r.cycles()).collect())
            };
            Ok((cycles(TunnelMode::Outbound)?, cycles(TunnelMode::FullPath)?))
        })
        .collect::<Result<_>>()?;
    let out: Vec<u64> = per_seed.iter().flat_map(|r| r.0.iter().copied()).collect();
    let full: Vec<u64> = per_seed.iter().flat_map(|r| r.1.iter().copied()).collect();
    let (mo, mf) = (mean(&out), mean(&full));
    Ok(HandshakeOverhead {
        samples: out.len(),
        outbound_cycles: mo,
        full_path_cycles: mf,
        advantage_pct: if mf > 0.0 { 100.0 * (1.0 - mo / mf) } else { 0.0 },
    })
}

pub fn overhead(cfg: &ExperimentConfig) -> Result<OverheadReport> {
    let mut base = cfg.clone();
    // both comparisons switch modes and obfuscation themselves
    base.tunnel.mode = TunnelMode::Outbound;
    base.chaff.enabled = false;
    base.delay.enabled = false;
    base.validate()?;
    Ok(OverheadReport {
        chaff: chaff_overhead(&base)?,
        handshake: handshake_overhead(&base)?,
        reference_chaff_pct: REFERENCE_CHAFF_OVERHEAD_PCT,
        reference_handshake_pct: REFERENCE_HANDSHAKE_ADVANTAGE_PCT,
    })
}

pub fn write_overhead(report: &OverheadReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_config_sidecar(dir, cfg)?;
    dataset::write_atomic(&dir.join("overhead.csv"), |w| {
        writeln!(w, "metric,base,treatment,delta_pct,reference_pct,samples")?;
        let c = &report.chaff;
        writeln!(
            w,
            "chaff_latency,{:.6},{:.6},{:.6},{:.2},{}",
            c.latency_base, c.latency_chaff, c.delta_pct, report.reference_chaff_pct, c.packets_chaff
        )?;
        let h = &report.handshake;
        writeln!(
            w,
            "handshake_cycles,{:.6},{:.6},{:.6},{:.2},{}",
            h.full_path_cycles, h.outbound_cycles, -h.advantage_pct, report.reference_handshake_pct, h.samples
        )
    })
}

// ---- sweeps -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub mesh: Mesh,
    pub p: f64,
    pub tir: f64,
    pub l: usize,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        format!("mesh{}_p{}_tir{}_l{}", self.mesh, self.p, self.tir, self.l)
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.sim.mesh = self.mesh;
        c.traffic.p = self.p;
        c.traffic.tir = self.tir;
        c.probe.l = self.l;
        c.sweep = SweepConfig::default();
        c
    }
}

pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    fn axis<T: Copy>(v: &[T], base: T) -> Vec<T> {
        if v.is_empty() {
            vec![base]
        } else {
            v.to_vec()
        }
    }
    let s = &cfg.sweep;
    let mut points = Vec::new();
    for mesh in axis(&s.mesh, cfg.sim.mesh) {
        for p in axis(&s.p, cfg.traffic.p) {
            for tir in axis(&s.tir, cfg.traffic.tir) {
                for l in axis(&s.l, cfg.probe.l) {
                    points.push(SweepPoint { mesh, p, tir, l });
                }
            }
        }
    }
    points
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub records: usize,
    pub result: BaselineResult,
}

/// Dataset plus baseline evaluation at every sweep point. With `out` set,
/// each point's dataset goes to `<out>/<label>.ndjson` and the merged
/// metrics to `<out>/sweep_metrics.csv`.
pub fn sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let points = sweep_points(cfg);
    let labels: HashSet<String> = points.iter().map(SweepPoint::label).collect();
    if labels.len() != points.len() {
        return Err(Error::Config("sweep axes contain duplicate values".into()));
    }
    let mut rows = Vec::with_capacity(points.len());
    for point in points {
        let pc = point.apply(cfg);
        let records = match out {
            Some(dir) => write_dataset(&pc, &dir.join(format!("{}.ndjson", point.label())))?,
            None => gen_dataset(&pc)?,
        };
        let result = baseline_eval(&records, pc.sim.seed)?;
        log::info!("sweep {}: test accuracy {:.4}", point.label(), result.test.accuracy);
        rows.push(SweepRow {
            point,
            records: records.len(),
            result,
        });
    }
    if let Some(dir) = out {
        write_config_sidecar(dir, cfg)?;
        let table: Vec<(String, String, MetricsReport)> = rows
            .iter()
            .map(|r| (r.point.label(), "pearson".to_string(), r.result.test))
            .collect();
        dataset::write_atomic(&dir.join("sweep_metrics.csv"), |w| {
            correlator::write_metrics_csv(w, &table)
        })?;
    }
    Ok(rows)
}
