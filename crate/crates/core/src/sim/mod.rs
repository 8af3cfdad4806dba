//! Cycle-driven simulation of the whole mesh.
//!
//! Each cycle runs four phases in a fixed order:
//!
//! 1. flits on ejection links reach their NIs;
//! 2. every NI (in node order) manages its tunnels, creates traffic, runs
//!    the chaffing logic, packetizes and injects at most one flit;
//! 3. every router computes routes for new head flits, moves flits through
//!    its switch and runs its protocol engine on packets it absorbed;
//! 4. credits return, delayed packets are released, retired tunnels are
//!    torn down and the progress watchdog runs.
//!
//! A flit sent on a link in cycle `c` is buffered downstream at
//! `c + link_latency` and can leave that router at
//! `c + link_latency + router_latency`. The NI writes straight into its
//! router's local input buffer, so a single-flit packet crossing `d` links
//! takes `(d + 1) * (router_latency + link_latency)` cycles.

pub mod ni;
pub mod router;
pub mod stats;
pub mod trace;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::envelope::{enc, KeyFactory, NonceSource, Part};
use crate::error::{Error, Result};
use crate::mesh::{xy_broadcast_ports, xy_next_hop, Coord, Mesh, Port};
use crate::obfuscation::{self, ChaffConfig, DelayConfig, Winnowed};
use crate::packet::{DestHeader, Flit, FlitId, IdAllocator, Packet, PacketId, PacketType};
use crate::probe::{Direction, ProbeConfig, ProbeSet};
use crate::rng::{stream_rng, SimRng, Stream};
use crate::traffic::{self, TrafficConfig};
use crate::tunnel::{
    self, DtOutcome, KeyDirectory, ProtocolCtx, RouterState, SourceAgent, TaOutcome, TcOutcome, TiOutcome,
    TunnelConfig, TunnelHandle, TunnelMode,
};

use self::ni::{Ni, Outgoing};
use self::router::{Route, RouterCore};
use self::stats::{Delivery, HandshakeRecord, LatencyStats, Role, SimStats};
use self::trace::{FlitEvent, TraceRecord, TunnelEvent, TunnelEventKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub mesh: Mesh,
    /// Flits per router input buffer.
    pub buffer_depth: usize,
    pub link_latency: u64,
    pub router_latency: u64,
    pub max_cycles: u64,
    pub seed: u64,
    /// Longest a flit may wait in one buffer before the run is declared stuck.
    pub stall_bound: u64,
    /// Cycles excluded from latency statistics; default probe activation.
    pub warmup: u64,
    /// Check what every router could read from each data packet it handles.
    pub audit: bool,
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mesh: Mesh::new(4, 4),
            buffer_depth: 4,
            link_latency: 1,
            router_latency: 1,
            max_cycles: 100_000,
            seed: 1,
            stall_bound: 10_000,
            warmup: 1_000,
            audit: false,
            record_trace: false,
        }
    }
}

/// Everything one simulation run needs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub traffic: TrafficConfig,
    pub tunnel: TunnelConfig,
    pub chaff: ChaffConfig,
    pub delay: DelayConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.sim;
        if s.mesh.width == 0 || s.mesh.height == 0 {
            return Err(Error::Config("mesh dimensions must be positive".into()));
        }
        for (name, v) in [
            ("buffer_depth", s.buffer_depth as u64),
            ("link_latency", s.link_latency),
            ("router_latency", s.router_latency),
            ("max_cycles", s.max_cycles),
            ("stall_bound", s.stall_bound),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.tunnel.validate(&s.mesh)?;
        self.traffic.validate(&s.mesh).map_err(Error::Config)?;
        self.chaff.validate().map_err(Error::Config)?;
        self.delay.validate().map_err(Error::Config)?;
        if self.chaff.enabled && self.tunnel.mode != TunnelMode::Outbound {
            return Err(Error::Config("chaffing needs outbound tunnels".into()));
        }
        if self.delay.enabled && self.tunnel.mode == TunnelMode::Plain {
            return Err(Error::Config("random delay needs tunnel endpoints".into()));
        }
        if self.probe.l == 0 {
            return Err(Error::Config("IFD length l must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct TunnelInfo {
    src: Coord,
    endpoint: Coord,
    hops: u32,
    ti_cycle: u64,
}

#[derive(Debug, Clone)]
struct SentRecord {
    src: Coord,
    dst: Coord,
    created: u64,
    payload: Vec<u8>,
    flit_ids: Vec<FlitId>,
}

pub struct Simulation {
    cfg: RunConfig,
    mesh: Mesh,
    cycle: u64,
    cores: Vec<RouterCore>,
    proto: Vec<RouterState>,
    agents: Vec<SourceAgent>,
    nis: Vec<Ni>,
    keys: KeyFactory,
    nonces: NonceSource,
    crypto_rng: SimRng,
    tunnel_rngs: Vec<SimRng>,
    delay_rngs: Vec<SimRng>,
    ids: IdAllocator,
    directory: KeyDirectory,
    injecting: bool,
    script: Vec<BTreeMap<u64, Vec<(Coord, usize)>>>,
    registry: BTreeMap<u64, TunnelInfo>,
    teardowns: BTreeMap<u64, Vec<u64>>,
    in_flight: BTreeMap<PacketId, SentRecord>,
    chaff_links: HashMap<FlitId, u32>,
    payload_seq: u64,
    stats: SimStats,
    tunnel_log: Vec<TunnelEvent>,
    trace: Vec<TraceRecord>,
    probes: ProbeSet,
    credit_returns: Vec<(usize, Port)>,
    ni_credit_returns: Vec<usize>,
}

impl Simulation {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = cfg.sim.mesh;
        let seed = cfg.sim.seed;
        let n = mesh.nodes();
        let mut keys = KeyFactory::new();
        let proto: Vec<RouterState> = mesh.coords().map(|c| RouterState::new(c, keys.keygen_asym())).collect();
        let directory = KeyDirectory::new(mesh, &proto);
        let cores = mesh
            .coords()
            .map(|c| {
                RouterCore::new(Port::ALL.map(|p| match p {
                    Port::Local => usize::MAX,
                    _ if mesh.neighbor(c, p).is_some() => cfg.sim.buffer_depth,
                    _ => 0,
                }))
            })
            .collect();
        let nis = (0..n)
            .map(|i| {
                Ni::new(
                    cfg.sim.buffer_depth,
                    stream_rng(seed, Stream::Traffic, i as u64),
                    stream_rng(seed, Stream::Chaff, i as u64),
                )
            })
            .collect();
        let activation = cfg.probe.activation.unwrap_or(cfg.sim.warmup);
        Ok(Simulation {
            cfg,
            mesh,
            cycle: 0,
            cores,
            proto,
            agents: vec![SourceAgent::default(); n],
            nis,
            keys,
            nonces: NonceSource::new(),
            crypto_rng: stream_rng(seed, Stream::Crypto, 0),
            tunnel_rngs: (0..n).map(|i| stream_rng(seed, Stream::Tunnel, i as u64)).collect(),
            delay_rngs: (0..n).map(|i| stream_rng(seed, Stream::Delay, i as u64)).collect(),
            ids: IdAllocator::default(),
            directory,
            injecting: true,
            script: vec![BTreeMap::new(); n],
            registry: BTreeMap::new(),
            teardowns: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            chaff_links: HashMap::new(),
            payload_seq: 0,
            stats: SimStats::default(),
            tunnel_log: Vec::new(),
            trace: Vec::new(),
            probes: ProbeSet::new(n, activation, cfg.probe.l + 1),
            credit_returns: Vec::new(),
            ni_credit_returns: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn mesh(&self) -> Mesh {
        self.mesh
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn tunnel_log(&self) -> &[TunnelEvent] {
        &self.tunnel_log
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn probes(&self) -> &ProbeSet {
        &self.probes
    }

    pub fn routers(&self) -> &[RouterState] {
        &self.proto
    }

    pub fn agent(&self, node: Coord) -> &SourceAgent {
        &self.agents[self.mesh.node_id(node)]
    }

    /// The outbound tunnel `node` currently sends on.
    pub fn tunnel(&self, node: Coord) -> Option<&TunnelHandle> {
        self.agent(node).usable(None)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Latency over legitimate packets created after warm-up.
    pub fn latency(&self) -> LatencyStats {
        self.stats.latency(self.cfg.sim.warmup, self.in_flight.len())
    }

    /// Enable or disable synthetic traffic (scripted packets still go out).
    pub fn set_injection(&mut self, on: bool) {
        self.injecting = on;
    }

    /// Queue a packet of `flits` flits from `src` to `dst` at `cycle`.
    pub fn schedule(&mut self, cycle: u64, src: Coord, dst: Coord, flits: usize) {
        assert!(self.mesh.contains(src) && self.mesh.contains(dst) && src != dst);
        assert!(cycle >= self.cycle, "cannot schedule in the past");
        let n = self.mesh.node_id(src);
        self.script[n].entry(cycle).or_default().push((dst, flits));
    }

    /// Every node has a ready outbound tunnel.
    pub fn all_tunnels_ready(&self) -> bool {
        self.agents.iter().all(|a| a.usable(None).is_some())
    }

    /// Every node's outbound tunnel has finished its handshake at the endpoint.
    pub fn all_tunnels_complete(&self) -> bool {
        let done: std::collections::HashSet<u64> = self.stats.handshakes.iter().map(|h| h.opuk_pair).collect();
        self.agents
            .iter()
            .all(|a| a.usable(None).is_some_and(|t| done.contains(&t.opuk_pair)))
    }

    /// Follow the installed VCI rows of `tunnel` from `src`.
    pub fn vci_chain(&self, src: Coord, tunnel: &TunnelHandle) -> std::result::Result<(Vec<Coord>, Vec<Port>), String> {
        tunnel::trace_vci_chain(&self.mesh, &self.proto, src, tunnel)
    }

    /// Check the installed VCI chain of the tunnel identified by `opuk_pair`.
    pub fn verify_tunnel(&self, opuk_pair: u64) -> std::result::Result<(Vec<Coord>, Vec<Port>), String> {
        let (src, t) = self
            .mesh
            .coords()
            .zip(&self.agents)
            .find_map(|(c, a)| a.tunnels().find(|t| t.opuk_pair == opuk_pair).map(|t| (c, t)))
            .ok_or_else(|| format!("no source holds tunnel {opuk_pair}"))?;
        let (path, ports) = self.vci_chain(src, t)?;
        if path.last() != Some(&t.endpoint) {
            return Err(format!(
                "chain from {src} ends at {:?}, not endpoint {}",
                path.last(),
                t.endpoint
            ));
        }
        if path.len() as u32 != t.hop_count + 1 {
            return Err(format!(
                "chain has {} hops, tunnel claims {}",
                path.len() - 1,
                t.hop_count
            ));
        }
        Ok((path, ports))
    }

    pub fn is_quiescent(&self) -> bool {
        self.in_flight.is_empty()
            && self.nis.iter().all(Ni::is_idle)
            && self.cores.iter().all(RouterCore::is_idle)
            && self.script.iter().all(BTreeMap::is_empty)
    }

    pub fn run_for(&mut self, cycles: u64) -> Result<()> {
        for _ in 0..cycles {
            self.step()?;
        }
        Ok(())
    }

    /// Step until `done` holds or `limit` more cycles have passed.
    pub fn run_until<F: FnMut(&Simulation) -> bool>(&mut self, limit: u64, mut done: F) -> Result<bool> {
        let end = self.cycle + limit;
        while self.cycle < end {
            if done(self) {
                return Ok(true);
            }
            self.step()?;
        }
        Ok(done(self))
    }

    /// Run to `max_cycles`.
    pub fn run(&mut self) -> Result<()> {
        let remaining = self.cfg.sim.max_cycles.saturating_sub(self.cycle);
        self.run_for(remaining)
    }

    /// Stop synthetic traffic and run until every legitimate packet is delivered.
    pub fn drain(&mut self, limit: u64) -> Result<bool> {
        self.injecting = false;
        self.run_until(limit, |s| {
            s.in_flight.is_empty()
                && s.nis.iter().all(|n| n.queue.is_empty())
                && s.script.iter().all(BTreeMap::is_empty)
        })
    }

    pub fn step(&mut self) -> Result<()> {
        let c = self.cycle;
        for n in 0..self.nis.len() {
            while self.nis[n].eject.front().is_some_and(|(t, _)| *t <= c) {
                let (_, flit) = self.nis[n].eject.pop_front().expect("front checked");
                self.receive(n, flit, c);
            }
        }
        for n in 0..self.nis.len() {
            self.ni_tick(n, c);
        }
        for n in 0..self.cores.len() {
            self.router_tick(n, c);
        }
        self.end_of_cycle(c)?;
        self.cycle += 1;
        self.stats.cycles = self.cycle;
        Ok(())
    }

    fn end_of_cycle(&mut self, c: u64) -> Result<()> {
        for (n, port) in std::mem::take(&mut self.credit_returns) {
            self.cores[n].return_credit(port);
        }
        for n in std::mem::take(&mut self.ni_credit_returns) {
            self.nis[n].credits += 1;
        }
        for core in &mut self.cores {
            core.release_pen(c + 1);
        }
        if let Some(pairs) = self.teardowns.remove(&c) {
            for pair in pairs {
                self.purge_all(pair);
            }
        }
        let bound = self.cfg.sim.stall_bound;
        for (n, core) in self.cores.iter().enumerate() {
            if let Some((since, what)) = core.oldest_wait() {
                if c.saturating_sub(since) > bound {
                    return Err(Error::Stall(format!(
                        "router {} {what} waiting since cycle {since} (now {c})",
                        self.mesh.coord(n)
                    )));
                }
            }
        }
        Ok(())
    }

    fn purge_all(&mut self, pair: u64) {
        for r in &mut self.proto {
            r.purge(pair);
        }
        self.registry.remove(&pair);
    }

    fn ctx(&mut self, cycle: u64) -> (ProtocolCtx<'_>, &mut Vec<RouterState>) {
        (
            ProtocolCtx {
                keys: &mut self.keys,
                nonces: &mut self.nonces,
                rng: &mut self.crypto_rng,
                ids: &mut self.ids,
                cycle,
            },
            &mut self.proto,
        )
    }

    fn log(&mut self, cycle: u64, kind: TunnelEventKind, pair: u64) {
        if let Some(info) = self.registry.get(&pair) {
            self.tunnel_log.push(TunnelEvent {
                cycle,
                kind,
                src: info.src,
                endpoint: info.endpoint,
                hops: info.hops,
            });
        }
    }

    fn record(&mut self, cycle: u64, node: usize, port: Port, flit_id: FlitId, event: FlitEvent) {
        if self.cfg.sim.record_trace {
            self.trace.push(TraceRecord {
                cycle,
                link_id: (node * 5 + port.index()) as u32,
                flit_id,
                event,
            });
        }
    }

    // ---- phase 1 -------------------------------------------------------

    fn receive(&mut self, n: usize, flit: Flit, c: u64) {
        self.probes.record(Direction::Inbound, n, c, flit.kind.is_head());
        self.record(c, n, Port::Local, flit.id, FlitEvent::Eject);
        if flit.is_chaff {
            self.stats.obfuscation.chaff_beyond_endpoint += 1;
        }
        let tail = flit.kind.is_tail();
        self.nis[n].assembling.push(flit);
        if tail {
            let flits = std::mem::take(&mut self.nis[n].assembling);
            self.deliver(n, Packet::from_flits(flits), c);
        }
    }

    fn deliver(&mut self, n: usize, pkt: Packet, c: u64) {
        let here = self.mesh.coord(n);
        let audit = &mut self.stats.delivery;
        let Some(rec) = self.in_flight.remove(&pkt.id) else {
            audit.duplicates += 1;
            return;
        };
        audit.delivered += 1;
        audit.delivered_flits += pkt.n_flits() as u64;
        if rec.dst != here || pkt.truth.final_dest != Some(here) {
            audit.misdelivered += 1;
        }
        let key = self.proto[n].private_key();
        let payload_ok = match pkt.parts.as_slice() {
            [Part::Sealed(env)] => matches!(env.open(&key), Ok([Part::Bytes(b)]) if *b == rec.payload),
            _ => false,
        };
        if !payload_ok {
            audit.payload_mismatch += 1;
        }
        let ids: Vec<FlitId> = pkt.flits.iter().map(|f| f.id).collect();
        if ids != rec.flit_ids || pkt.flits.iter().any(|f| f.chaff) {
            audit.flit_mismatch += 1;
        }
        let injected = pkt.flits.first().and_then(|f| f.inject_cycle).unwrap_or(rec.created);
        self.stats.deliveries.push(Delivery {
            src: rec.src,
            dst: here,
            created: rec.created,
            injected,
            ejected: c,
        });
    }

    // ---- phase 2 -------------------------------------------------------

    fn ni_tick(&mut self, n: usize, c: u64) {
        let here = self.mesh.coord(n);
        if self.cfg.tunnel.mode != TunnelMode::Plain {
            self.manage_tunnels(n, c);
        }

        let mut arrivals: Vec<(Coord, usize)> = self.script[n].remove(&c).unwrap_or_default();
        if self.injecting {
            let ni = &mut self.nis[n];
            if let Some(d) = traffic::tick_inject(&self.mesh, &self.cfg.traffic, here, &mut ni.traffic_rng) {
                arrivals.push((d, self.cfg.traffic.packet_flits));
            }
        }

        let chaff_live = self.cfg.chaff.enabled && self.agents[n].usable(None).is_some();
        let mut splices: Vec<Option<usize>> = vec![None; arrivals.len()];
        if chaff_live {
            let ni = &mut self.nis[n];
            let first = arrivals.first().map(|a| a.1);
            let d = ni.chaff.tick(&self.cfg.chaff, c, first, &mut ni.chaff_rng);
            if let Some(flits) = d.dummy {
                ni.queue.push_back(Outgoing::Dummy { flits });
            }
            if let Some(s) = splices.first_mut() {
                *s = d.splice_at;
            }
            for (i, a) in arrivals.iter().enumerate().skip(1) {
                splices[i] = ni
                    .chaff
                    .tick(&self.cfg.chaff, c, Some(a.1), &mut ni.chaff_rng)
                    .splice_at;
            }
        } else {
            self.nis[n].chaff.legit_sent = false;
        }
        for ((dest, flits), splice) in arrivals.into_iter().zip(splices) {
            self.payload_seq += 1;
            self.stats.delivery.created += 1;
            self.nis[n].queue.push_back(Outgoing::Data {
                dest,
                created: c,
                splice,
                seq: self.payload_seq,
                flits,
            });
        }

        if self.nis[n].flits.is_empty() {
            self.packetize(n, c);
        }

        let ni = &mut self.nis[n];
        if ni.credits > 0 {
            if let Some(mut flit) = ni.flits.pop_front() {
                ni.credits -= 1;
                flit.inject_cycle = Some(c);
                ni.chaff.last_out = c;
                if flit.kind.is_tail() && ni.sending_legit {
                    ni.chaff.legit_sent = true;
                }
                let (id, head) = (flit.id, flit.kind.is_head());
                self.cores[n].push_input(Port::Local, flit, c, c + self.cfg.sim.router_latency);
                self.probes.record(Direction::Outbound, n, c, head);
                self.record(c, n, Port::Local, id, FlitEvent::Inject);
            }
        }
    }

    fn manage_tunnels(&mut self, n: usize, c: u64) {
        for stale in self.agents[n].expire_pending(c, self.cfg.tunnel.handshake_timeout) {
            log::warn!(
                "handshake from {} to {} abandoned at cycle {c}",
                self.mesh.coord(n),
                stale.endpoint
            );
            self.stats.protocol.handshakes_abandoned += 1;
            self.purge_all(stale.opuk.public.pair_id());
        }
        // tunnels are built on demand: queued data, or chaff that needs a carrier
        let key = match self.cfg.tunnel.mode {
            TunnelMode::Outbound if self.nis[n].queue.is_empty() && !self.cfg.chaff.enabled => return,
            TunnelMode::Outbound => None,
            TunnelMode::FullPath => match self.nis[n].queue.front() {
                Some(Outgoing::Data { dest, .. }) => Some(*dest),
                _ => return,
            },
            TunnelMode::Plain => return,
        };
        if self.agents[n].needs_handshake(key, c) {
            self.start_handshake(n, key, c);
        }
    }

    fn start_handshake(&mut self, n: usize, key: Option<Coord>, c: u64) {
        let here = self.mesh.coord(n);
        let prev = self.agents[n].previous_endpoint(key);
        let endpoint = tunnel::select_endpoint(&self.mesh, here, &self.cfg.tunnel, &mut self.tunnel_rngs[n], prev, key)
            .expect("configuration validated at start");
        let puk = self.directory.public_key(endpoint);
        let (ti, pending) = {
            let (mut ctx, proto) = self.ctx(c);
            tunnel::build_ti(&mut proto[n], &mut ctx, endpoint, puk, key)
        };
        let pair = pending.opuk.public.pair_id();
        self.registry.insert(
            pair,
            TunnelInfo {
                src: here,
                endpoint,
                hops: pending.hop_count,
                ti_cycle: c,
            },
        );
        self.agents[n].begin(pending);
        self.stats.protocol.handshakes_started += 1;
        self.log(c, TunnelEventKind::TiSent, pair);
        self.broadcast(n, ti, Port::Local, c);
    }

    fn broadcast(&mut self, n: usize, ti: Packet, arrival: Port, c: u64) {
        let ports = xy_broadcast_ports(&self.mesh, self.mesh.coord(n), arrival);
        for (k, port) in ports.into_iter().enumerate() {
            let copy = if k == 0 { ti.clone() } else { self.recopy(&ti) };
            self.cores[n].emit(port, copy, c + 1);
        }
    }

    /// Same content under fresh packet and flit ids.
    fn recopy(&mut self, pkt: &Packet) -> Packet {
        Packet {
            id: self.ids.packet(),
            flits: self.ids.flits(pkt.n_flits()),
            ..pkt.clone()
        }
    }

    fn packetize(&mut self, n: usize, c: u64) {
        let here = self.mesh.coord(n);
        loop {
            let Some(front) = self.nis[n].queue.front().cloned() else {
                return;
            };
            match front {
                Outgoing::Dummy { flits } => {
                    self.nis[n].queue.pop_front();
                    let Some(t) = self.agents[n].usable(None) else { continue };
                    let pkt = obfuscation::dummy_packet(t, &mut self.ids, here, obfuscation::ni_tag(n), flits, c);
                    self.stats.obfuscation.dummy_packets += 1;
                    self.stats.obfuscation.chaff_flits += flits as u64;
                    let ni = &mut self.nis[n];
                    ni.flits = pkt.into_flits().into();
                    ni.sending_legit = false;
                    return;
                }
                Outgoing::Data {
                    dest,
                    created,
                    splice,
                    seq,
                    flits,
                } => {
                    let payload = enc(
                        &self.directory.public_key(dest),
                        vec![Part::Bytes(seq.to_le_bytes().to_vec())],
                    )
                    .expect("public key seals");
                    let mut pkt = match self.cfg.tunnel.mode {
                        TunnelMode::Plain => Packet {
                            id: self.ids.packet(),
                            pkt_type: PacketType::Dt,
                            vci: None,
                            dest: Some(DestHeader::Plain(dest)),
                            chaff_header: None,
                            parts: vec![Part::Sealed(payload)],
                            flits: self.ids.flits(flits),
                            creation_cycle: created,
                            truth: crate::packet::GroundTruth {
                                origin: here,
                                final_dest: Some(dest),
                                dummy: false,
                            },
                        },
                        mode => {
                            let key = (mode == TunnelMode::FullPath).then_some(dest);
                            let Some(t) = self.agents[n].usable(key) else { return };
                            let mut p = tunnel::build_dt(t, &mut self.ids, here, dest, payload, flits, created);
                            p.creation_cycle = created;
                            p
                        }
                    };
                    self.nis[n].queue.pop_front();
                    let flit_ids = pkt.flits.iter().map(|f| f.id).collect();
                    if let (Some(ch), Some(t)) = (splice, self.agents[n].usable(None)) {
                        let key = t.endpoint_key();
                        let ch = ch.min(pkt.n_flits());
                        obfuscation::splice_chaff(&mut pkt, ch, &key, obfuscation::ni_tag(n), &mut self.ids);
                        self.stats.obfuscation.spliced_packets += 1;
                        self.stats.obfuscation.chaff_flits += 1;
                    }
                    self.in_flight.insert(
                        pkt.id,
                        SentRecord {
                            src: here,
                            dst: dest,
                            created,
                            payload: seq.to_le_bytes().to_vec(),
                            flit_ids,
                        },
                    );
                    self.stats.delivery.injected += 1;
                    let ni = &mut self.nis[n];
                    ni.flits = pkt.into_flits().into();
                    ni.sending_legit = true;
                    return;
                }
            }
        }
    }

    // ---- phase 3 -------------------------------------------------------

    fn router_tick(&mut self, n: usize, c: u64) {
        for i in 0..5 {
            if self.cores[n].inputs[i].needs_route(c) {
                let (route, plain) = self.route_head(n, Port::from_index(i));
                let input = &mut self.cores[n].inputs[i];
                input.route = Some(route);
                input.plain = plain;
            }
        }
        let out = self.cores[n].tick(c);
        self.stats.dropped_flits += out.dropped_flits;
        for (port, flit, plain) in out.sent {
            self.on_send(n, port, flit, plain, c);
        }
        let here = self.mesh.coord(n);
        for p in out.freed {
            if p == Port::Local {
                self.ni_credit_returns.push(n);
            } else {
                let up = self.mesh.neighbor(here, p).expect("flit came from a neighbour");
                self.credit_returns.push((self.mesh.node_id(up), p.opposite()));
            }
        }
        for (arrival, pkt) in out.absorbed {
            self.process(n, arrival, pkt, c);
        }
    }

    /// Route computation for the head flit waiting on `arrival`.
    fn route_head(&mut self, n: usize, arrival: Port) -> (Route, bool) {
        let here = self.mesh.coord(n);
        let input = &mut self.cores[n].inputs[arrival.index()];
        let front = input.buf.front_mut().expect("caller checked");
        assert!(
            front.flit.kind.is_head(),
            "route computation on a non-head flit {}",
            front.flit.id
        );
        let pkt = front.flit.packet_mut().expect("head flit carries the header");
        match pkt.pkt_type {
            PacketType::Ti | PacketType::Ta | PacketType::Tc => (Route::Absorb, false),
            PacketType::Dt => match (&pkt.dest, pkt.vci) {
                (_, Some(_)) => {
                    let before = self.cfg.sim.audit.then(|| pkt.clone());
                    match tunnel::forward_dt(&mut self.proto[n], pkt, arrival) {
                        DtOutcome::Swapped { port } => {
                            if let Some(seen) = before {
                                audit_observation(&mut self.stats, &self.proto[n], here, &seen, Role::MidTunnel);
                            }
                            (Route::Out(port), false)
                        }
                        DtOutcome::Endpoint { .. } => (Route::Absorb, false),
                        DtOutcome::Unknown => {
                            self.stats.protocol.unknown_vci_drops += 1;
                            (Route::Drop, false)
                        }
                    }
                }
                (Some(DestHeader::Plain(d)), None) => {
                    let d = *d;
                    if self.cfg.sim.audit {
                        let seen = pkt.clone();
                        audit_observation(&mut self.stats, &self.proto[n], here, &seen, Role::PostTunnel);
                    }
                    (Route::Out(xy_next_hop(here, d)), true)
                }
                _ => {
                    self.stats.protocol.undecryptable_dest += 1;
                    (Route::Drop, false)
                }
            },
        }
    }

    fn on_send(&mut self, n: usize, port: Port, flit: Flit, plain: bool, c: u64) {
        self.record(c, n, port, flit.id, FlitEvent::Send);
        let ll = self.cfg.sim.link_latency;
        if port == Port::Local {
            self.nis[n].eject.push_back((c + ll, flit));
            return;
        }
        if flit.is_chaff {
            if plain {
                self.stats.obfuscation.chaff_beyond_endpoint += 1;
            }
            let links = self.chaff_links.entry(flit.id).or_insert(0);
            *links += 1;
            self.stats.obfuscation.max_chaff_links = self.stats.obfuscation.max_chaff_links.max(*links);
        }
        let here = self.mesh.coord(n);
        let next = self.mesh.neighbor(here, port).expect("routed onto an existing link");
        let m = self.mesh.node_id(next);
        self.cores[m].push_input(port.opposite(), flit, c + ll, c + ll + self.cfg.sim.router_latency);
    }

    /// Protocol engine: a whole packet was absorbed at router `n`.
    fn process(&mut self, n: usize, arrival: Port, pkt: Packet, c: u64) {
        match pkt.pkt_type {
            PacketType::Ti => {
                let outcome = {
                    let (mut ctx, proto) = self.ctx(c);
                    tunnel::handle_ti(&mut proto[n], &mut ctx, &pkt, arrival)
                };
                match outcome {
                    TiOutcome::Discard => self.stats.protocol.ti_duplicates += 1,
                    TiOutcome::Rejected => {}
                    TiOutcome::Forward(fwd) => self.broadcast(n, fwd, arrival, c),
                    TiOutcome::Endpoint { ta, out } => {
                        let pair = pkt.parts[0].as_key().expect("TI carries OPuK").pair_id();
                        self.log(c, TunnelEventKind::TaSent, pair);
                        self.cores[n].emit(out, ta, c + 1);
                    }
                }
            }
            PacketType::Ta => {
                let outcome = {
                    let (mut ctx, proto) = self.ctx(c);
                    tunnel::handle_ta(&mut proto[n], &mut ctx, &pkt, arrival)
                };
                match outcome {
                    TaOutcome::Stray => self.stats.protocol.stray_ta += 1,
                    TaOutcome::Forward { ta, out } => self.cores[n].emit(out, ta, c + 1),
                    TaOutcome::Source { opuk_pair } => self.finish_at_source(n, opuk_pair, &pkt, arrival, c),
                }
            }
            PacketType::Tc => {
                let outcome = {
                    let (mut ctx, proto) = self.ctx(c);
                    tunnel::handle_tc(&mut proto[n], &mut ctx, &pkt)
                };
                match outcome {
                    TcOutcome::Unknown => self.stats.protocol.unknown_tc += 1,
                    TcOutcome::Forward { tc, out } => self.cores[n].emit(out, tc, c + 1),
                    TcOutcome::Complete { opuk_pair, .. } => {
                        self.log(c, TunnelEventKind::TunnelReady, opuk_pair);
                        self.stats.protocol.handshakes_completed += 1;
                        if let Some(info) = self.registry.get(&opuk_pair) {
                            self.stats.handshakes.push(HandshakeRecord {
                                src: info.src,
                                endpoint: info.endpoint,
                                hops: info.hops,
                                ti_sent: info.ti_cycle,
                                ready: c,
                                opuk_pair,
                            });
                        }
                    }
                }
            }
            PacketType::Dt => self.tunnel_exit(n, pkt, c),
        }
    }

    fn finish_at_source(&mut self, n: usize, pair: u64, ta: &Packet, arrival: Port, c: u64) {
        let Some(pending) = self.agents[n].take_pending(pair) else {
            return;
        };
        let timeout = self.cfg.tunnel.timeout;
        let result = {
            let (mut ctx, proto) = self.ctx(c);
            tunnel::generate_tc(&mut proto[n], &mut ctx, &pending, ta, arrival, timeout)
        };
        match result {
            Ok((tc, handle)) => {
                self.cores[n].emit(handle.port_first, tc, c + 1);
                self.log(c, TunnelEventKind::TcSent, pair);
                if let Some(old) = self.agents[n].install(handle) {
                    self.log(c, TunnelEventKind::Rotated, pair);
                    self.stats.protocol.rotations += 1;
                    self.teardowns
                        .entry(c + self.cfg.tunnel.drain_window)
                        .or_default()
                        .push(old.opuk_pair);
                }
            }
            Err(e) => {
                log::warn!("tunnel from {} aborted: {e}", self.mesh.coord(n));
                self.stats.protocol.authenticity_failures += 1;
                self.purge_all(pair);
            }
        }
    }

    /// A data packet reached its tunnel endpoint.
    fn tunnel_exit(&mut self, n: usize, pkt: Packet, c: u64) {
        let here = self.mesh.coord(n);
        let symkey = pkt
            .vci
            .and_then(|v| self.proto[n].route(v))
            .and_then(|r| r.symkey_for_dest);
        let Some(symkey) = symkey else {
            self.stats.protocol.unknown_vci_drops += 1;
            return;
        };
        let chaff_in = pkt.flits.iter().filter(|f| f.chaff).count() as u64;
        let mut pkt = match obfuscation::winnow(pkt, &symkey) {
            Winnowed::Dummy => {
                self.stats.obfuscation.winnowed += chaff_in;
                return;
            }
            Winnowed::Restored(p) => {
                self.stats.obfuscation.winnowed += 1;
                p
            }
            Winnowed::Clean(p) => p,
            Winnowed::Foreign(p) => {
                self.stats.obfuscation.foreign_chaff += 1;
                p
            }
        };
        let Some(dest) = tunnel::open_destination(&pkt, &symkey) else {
            self.stats.protocol.undecryptable_dest += 1;
            return;
        };
        if self.cfg.sim.audit {
            audit_observation(&mut self.stats, &self.proto[n], here, &pkt, Role::Endpoint);
        }
        pkt.vci = None;
        pkt.dest = Some(DestHeader::Plain(dest));
        pkt.chaff_header = None;
        let out = xy_next_hop(here, dest);
        match obfuscation::draw_delay(&self.cfg.delay, &mut self.delay_rngs[n]) {
            Some(d) => {
                self.stats.obfuscation.delayed_packets += 1;
                self.stats.obfuscation.delay_cycles += d;
                self.cores[n].emit_delayed(out, pkt, c + 1 + d);
            }
            None => self.cores[n].emit(out, pkt, c + 1),
        }
    }
}

/// Record what router `here` can name from a data packet it is handling.
/// The packet's own source and destination tiles are not observers.
fn audit_observation(stats: &mut SimStats, state: &RouterState, here: Coord, pkt: &Packet, role: Role) {
    let truth = pkt.truth;
    let Some(dst) = truth.final_dest else { return };
    if truth.dummy || here == truth.origin || here == dst {
        return;
    }
    let audit = &mut stats.anonymity;
    audit.observations[role as usize] += 1;
    let names = state.keychain().readable_coords(&pkt.visible_parts());
    let src_named = names.contains(&truth.origin);
    let dst_named = names.contains(&dst);
    if src_named {
        audit.names_source += 1;
        audit.note(format!(
            "{here} ({role:?}) names source {} of packet {}",
            truth.origin, pkt.id
        ));
    }
    if src_named && dst_named {
        audit.names_both += 1;
    }
    match role {
        Role::MidTunnel if !names.is_empty() => {
            audit.mid_tunnel_names += 1;
            audit.note(format!(
                "mid-tunnel router {here} names {names:?} for packet {}",
                pkt.id
            ));
        }
        Role::Endpoint if dst_named => audit.endpoint_names_dest += 1,
        _ => {}
    }
}
