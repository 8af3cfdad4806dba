//! Outbound-tunnel anonymous routing.
//!
//! A source builds a tunnel to a random endpoint `h_min..=h_max` hops away
//! with a three-way handshake:
//!
//! * **TI** `[OPuK, enc(PuK_E, [OPuK, r]), TPuK_prev]` is broadcast along the
//!   XY tree. Each router records the one-time key and the previous hop's
//!   temporary key, then either recognises itself as the endpoint (it can
//!   open the sealed part) or swaps in its own temporary key and forwards.
//! * **TA** travels back hop by hop. Every router adds a fresh nonce and a
//!   symmetric key for the source, sealed under the source's one-time key,
//!   and re-wraps the whole thing for the previous hop.
//! * **TC** is the source's layered reply: each router peels one symmetric
//!   layer and learns the outgoing VCI for its incoming VCI.
//!
//! Data packets then carry only a VCI, swapped at each hop, plus the true
//! destination sealed for the endpoint.
//!
//! The handlers here are pure state transitions on a [`RouterState`]; the
//! simulator moves the resulting packets.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::{enc, Envelope, KeyChain, KeyFactory, KeyHandle, KeyPair, Nonce, NonceSource, Part};
use crate::mesh::{Coord, Mesh, Port};
use crate::packet::{DestHeader, GroundTruth, IdAllocator, Packet, PacketType};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunnelMode {
    /// Per-source tunnel to a random nearby endpoint, then plain XY routing.
    Outbound,
    /// Tunnel all the way to the destination (one tunnel per destination).
    FullPath,
    /// No anonymity layer; packets use plaintext XY routing.
    Plain,
}

impl std::str::FromStr for TunnelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "outbound" => Ok(TunnelMode::Outbound),
            "full_path" | "fullpath" => Ok(TunnelMode::FullPath),
            "plain" => Ok(TunnelMode::Plain),
            other => Err(format!("unknown tunnel mode {other:?} (outbound|full-path|plain)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunnelConfig {
    pub h_min: u32,
    pub h_max: u32,
    /// Cycles a tunnel is used before rotation; `None` never rotates.
    pub timeout: Option<u64>,
    pub mode: TunnelMode,
    /// Cycles a retired tunnel's router state survives so in-flight data drains.
    pub drain_window: u64,
    /// A handshake still pending after this many cycles is abandoned and retried.
    pub handshake_timeout: u64,
}

impl Default for TunnelConfig {
    fn default() -> Self {
        TunnelConfig {
            h_min: 3,
            h_max: 4,
            timeout: Some(5_000),
            mode: TunnelMode::Outbound,
            drain_window: 1_000,
            handshake_timeout: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TunnelError {
    #[error("no tunnel endpoint {h_min}..={h_max} hops from {src} in a {mesh} mesh")]
    NoEndpoint {
        src: Coord,
        h_min: u32,
        h_max: u32,
        mesh: Mesh,
    },
    #[error("invalid tunnel config: {0}")]
    Config(String),
    #[error("TI integrity check failed at {0}")]
    Integrity(Coord),
    #[error("TA authenticity check failed: recovered r does not match")]
    Authenticity,
    #[error("malformed {0:?} packet")]
    Malformed(PacketType),
    #[error("tunnel expired at cycle {0}")]
    Expired(u64),
}

impl TunnelConfig {
    pub fn validate(&self, mesh: &Mesh) -> Result<(), TunnelError> {
        if self.mode == TunnelMode::Plain {
            return Ok(());
        }
        if self.h_min < 3 {
            return Err(TunnelError::Config(format!("h_min must be >= 3, got {}", self.h_min)));
        }
        if self.h_min > self.h_max {
            return Err(TunnelError::Config(format!(
                "h_min ({}) > h_max ({})",
                self.h_min, self.h_max
            )));
        }
        if self.h_max > mesh.diameter() {
            return Err(TunnelError::Config(format!(
                "h_max ({}) exceeds the {} mesh diameter ({})",
                self.h_max,
                mesh,
                mesh.diameter()
            )));
        }
        if self.timeout == Some(0) {
            return Err(TunnelError::Config("timeout must be positive".into()));
        }
        if self.mode == TunnelMode::Outbound {
            if let Some(src) = mesh
                .coords()
                .find(|&c| endpoint_candidates(mesh, c, self.h_min, self.h_max).is_empty())
            {
                return Err(TunnelError::NoEndpoint {
                    src,
                    h_min: self.h_min,
                    h_max: self.h_max,
                    mesh: *mesh,
                });
            }
        }
        Ok(())
    }
}

/// Routers whose XY distance from `src` lies in `[h_min, h_max]`.
pub fn endpoint_candidates(mesh: &Mesh, src: Coord, h_min: u32, h_max: u32) -> Vec<Coord> {
    mesh.coords()
        .filter(|&c| (h_min..=h_max).contains(&src.manhattan(c)))
        .collect()
}

/// Pick a tunnel endpoint uniformly among the candidates, skipping
/// `exclude` (the previous endpoint) when another choice exists. In
/// full-path mode the endpoint is the destination itself.
pub fn select_endpoint<R: Rng + ?Sized>(
    mesh: &Mesh,
    src: Coord,
    cfg: &TunnelConfig,
    rng: &mut R,
    exclude: Option<Coord>,
    dest: Option<Coord>,
) -> Result<Coord, TunnelError> {
    if cfg.mode == TunnelMode::FullPath {
        if let Some(d) = dest {
            return Ok(d);
        }
    }
    let mut candidates = endpoint_candidates(mesh, src, cfg.h_min, cfg.h_max);
    if candidates.is_empty() {
        return Err(TunnelError::NoEndpoint {
            src,
            h_min: cfg.h_min,
            h_max: cfg.h_max,
            mesh: *mesh,
        });
    }
    if let Some(prev) = exclude {
        if candidates.len() > 1 {
            candidates.retain(|&c| c != prev);
        }
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// Tunnel Lookup table row.
#[derive(Debug, Clone, PartialEq)]
pub struct TlEntry {
    pub opuk: KeyHandle,
    pub tpuk_pre: KeyHandle,
    pub port_pre: Port,
    /// This router's temporary key pair for the tunnel.
    pub own_temp: KeyPair,
    pub own_nonce: Option<Nonce>,
    pub own_symkey: Option<KeyHandle>,
    pub port_downstream: Option<Port>,
    pub created_cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VciNext {
    Forward(u64),
    Endpoint,
}

/// VCI routing table row, indexed by the incoming VCI.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingEntry {
    pub vci_in: u64,
    pub vci_out: VciNext,
    /// `None` for endpoint rows (processed locally).
    pub port_out: Option<Port>,
    pub symkey_for_dest: Option<KeyHandle>,
    pub opuk_pair: u64,
    pub installed_cycle: u64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolCounters {
    pub ti_duplicates: u64,
    pub ti_integrity_failures: u64,
    pub stray_ta: u64,
    pub unknown_tc: u64,
    pub unknown_vci: u64,
}

/// Everything a router knows about tunnels.
#[derive(Debug, Clone)]
pub struct RouterState {
    pub coord: Coord,
    global: KeyPair,
    tl: BTreeMap<u64, TlEntry>,
    by_nonce: BTreeMap<u64, u64>,
    routes: BTreeMap<u64, RoutingEntry>,
    /// First-hop egress for tunnels this router originates: VCI -> port.
    source_routes: BTreeMap<u64, (Port, u64)>,
    pub counters: ProtocolCounters,
}

/// Randomness and id sources shared by the protocol handlers.
pub struct ProtocolCtx<'a> {
    pub keys: &'a mut KeyFactory,
    pub nonces: &'a mut NonceSource,
    pub rng: &'a mut SimRng,
    pub ids: &'a mut IdAllocator,
    pub cycle: u64,
}

impl ProtocolCtx<'_> {
    fn control_packet(&mut self, pkt_type: PacketType, parts: Vec<Part>, origin: Coord) -> Packet {
        let n = Packet::control_flits(&parts);
        Packet {
            id: self.ids.packet(),
            pkt_type,
            vci: None,
            dest: None,
            chaff_header: None,
            parts,
            flits: self.ids.flits(n),
            creation_cycle: self.cycle,
            truth: GroundTruth {
                origin,
                final_dest: None,
                dummy: false,
            },
        }
    }
}

impl RouterState {
    pub fn new(coord: Coord, global: KeyPair) -> Self {
        RouterState {
            coord,
            global,
            tl: BTreeMap::new(),
            by_nonce: BTreeMap::new(),
            routes: BTreeMap::new(),
            source_routes: BTreeMap::new(),
            counters: ProtocolCounters::default(),
        }
    }

    pub fn public_key(&self) -> KeyHandle {
        self.global.public
    }

    pub fn tl_entry(&self, opuk_pair: u64) -> Option<&TlEntry> {
        self.tl.get(&opuk_pair)
    }

    pub fn tl_len(&self) -> usize {
        self.tl.len()
    }

    pub fn route(&self, vci_in: u64) -> Option<&RoutingEntry> {
        self.routes.get(&vci_in)
    }

    pub fn routes(&self) -> impl Iterator<Item = &RoutingEntry> {
        self.routes.values()
    }

    pub fn source_route(&self, vci: u64) -> Option<Port> {
        self.source_routes.get(&vci).map(|&(p, _)| p)
    }

    fn install_route(&mut self, entry: RoutingEntry) {
        let prev = self.routes.insert(entry.vci_in, entry);
        debug_assert!(prev.is_none(), "duplicate VCI row at {}", self.coord);
    }

    /// Drop all state belonging to one tunnel.
    pub fn purge(&mut self, opuk_pair: u64) {
        if let Some(entry) = self.tl.remove(&opuk_pair) {
            if let Some(n) = entry.own_nonce {
                self.by_nonce.remove(&n.value);
            }
        }
        self.routes.retain(|_, r| r.opuk_pair != opuk_pair);
        self.source_routes.retain(|_, &mut (_, pair)| pair != opuk_pair);
    }

    /// Every key this router holds, for auditing what it could read.
    /// The router's long-term private key. Simulation oracles use it to
    /// check payloads delivered to this tile.
    pub fn private_key(&self) -> KeyHandle {
        self.global.private
    }

    pub fn keychain(&self) -> KeyChain {
        let mut chain = KeyChain::new();
        chain.insert(self.global.private);
        for entry in self.tl.values() {
            chain.insert(entry.own_temp.private);
            if let Some(k) = entry.own_symkey {
                chain.insert(k);
            }
        }
        for r in self.routes.values() {
            if let Some(k) = r.symkey_for_dest {
                chain.insert(k);
            }
        }
        chain
    }

    /// Register the originating router's own TL row for a new tunnel.
    fn register_source(&mut self, opuk: KeyHandle, temp: KeyPair, cycle: u64) {
        self.tl.insert(
            opuk.pair_id(),
            TlEntry {
                opuk,
                tpuk_pre: temp.public,
                port_pre: Port::Local,
                own_temp: temp,
                own_nonce: None,
                own_symkey: None,
                port_downstream: None,
                created_cycle: cycle,
            },
        );
    }

    pub fn is_source_of(&self, opuk_pair: u64) -> bool {
        self.tl.get(&opuk_pair).is_some_and(|e| e.port_pre == Port::Local)
    }
}

/// Source-side state of a handshake in progress.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingTunnel {
    pub opuk: KeyPair,
    pub temp: KeyPair,
    pub r: Nonce,
    pub endpoint: Coord,
    pub hop_count: u32,
    pub started_cycle: u64,
    /// Destination this tunnel serves (full-path mode only).
    pub dest: Option<Coord>,
}

/// Source-side view of an established tunnel.
#[derive(Debug, Clone, PartialEq)]
pub struct TunnelHandle {
    pub opuk_pair: u64,
    pub endpoint: Coord,
    pub hop_count: u32,
    /// VCI the first downstream router expects.
    pub vci_first: u64,
    /// `K_{S-R}` for every router from the first downstream hop to the endpoint.
    pub symkeys: Vec<KeyHandle>,
    pub port_first: Port,
    pub started_cycle: u64,
    pub created_cycle: u64,
    pub expires_cycle: Option<u64>,
    pub dest: Option<Coord>,
}

impl TunnelHandle {
    pub fn endpoint_key(&self) -> KeyHandle {
        *self.symkeys.last().expect("tunnel has at least one hop")
    }

    pub fn is_live(&self, now: u64) -> bool {
        self.expires_cycle.is_none_or(|e| now < e)
    }
}

/// Build a TI packet for a new tunnel from `src` to `endpoint`, registering
/// the source's TL row.
pub fn build_ti(
    src: &mut RouterState,
    ctx: &mut ProtocolCtx<'_>,
    endpoint: Coord,
    endpoint_puk: KeyHandle,
    dest: Option<Coord>,
) -> (Packet, PendingTunnel) {
    let opuk = ctx.keys.keygen_asym();
    let temp = ctx.keys.keygen_asym();
    let r = ctx.nonces.gen_nonce(src.coord, ctx.rng);
    src.register_source(opuk.public, temp, ctx.cycle);
    let sealed = enc(&endpoint_puk, vec![Part::Key(opuk.public), Part::Word(r.value)]).expect("public key seals");
    let parts = vec![Part::Key(opuk.public), Part::Sealed(sealed), Part::Key(temp.public)];
    let pkt = ctx.control_packet(PacketType::Ti, parts, src.coord);
    let pending = PendingTunnel {
        opuk,
        temp,
        r,
        endpoint,
        hop_count: src.coord.manhattan(endpoint),
        started_cycle: ctx.cycle,
        dest,
    };
    (pkt, pending)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TiOutcome {
    /// Already seen this tunnel's TI.
    Discard,
    /// Not the endpoint: forward this copy (with our temporary key) on the broadcast ports.
    Forward(Packet),
    /// We are the endpoint: reply with this TA on `out`.
    Endpoint { ta: Packet, out: Port },
    /// We opened the sealed part but its key did not match the plaintext one.
    Rejected,
}

pub fn handle_ti(router: &mut RouterState, ctx: &mut ProtocolCtx<'_>, pkt: &Packet, arrival: Port) -> TiOutcome {
    let (Some(opuk), Some(sealed), Some(tpuk_prev)) = (
        pkt.parts.first().and_then(Part::as_key),
        pkt.parts.get(1).and_then(Part::as_sealed),
        pkt.parts.get(2).and_then(Part::as_key),
    ) else {
        return TiOutcome::Discard;
    };
    if router.tl.contains_key(&opuk.pair_id()) {
        router.counters.ti_duplicates += 1;
        return TiOutcome::Discard;
    }
    let own_temp = ctx.keys.keygen_asym();
    router.tl.insert(
        opuk.pair_id(),
        TlEntry {
            opuk,
            tpuk_pre: tpuk_prev,
            port_pre: arrival,
            own_temp,
            own_nonce: None,
            own_symkey: None,
            port_downstream: None,
            created_cycle: ctx.cycle,
        },
    );
    match sealed.open(&router.global.private) {
        Ok(inner) => {
            let inner = inner.to_vec();
            match generate_ta(router, ctx, &inner, opuk, tpuk_prev) {
                Ok(ta) => TiOutcome::Endpoint { ta, out: arrival },
                Err(_) => {
                    router.counters.ti_integrity_failures += 1;
                    TiOutcome::Rejected
                }
            }
        }
        Err(_) => {
            let mut parts = pkt.parts.clone();
            parts[2] = Part::Key(own_temp.public);
            TiOutcome::Forward(ctx.control_packet(PacketType::Ti, parts, pkt.truth.origin))
        }
    }
}

/// Endpoint reply: `[OPuK, enc(TPuK_prev, enc(OPuK, [r, n_E, K_SE]))]`.
pub fn generate_ta(
    router: &mut RouterState,
    ctx: &mut ProtocolCtx<'_>,
    decrypted: &[Part],
    opuk_plain: KeyHandle,
    tpuk_prev: KeyHandle,
) -> Result<Packet, TunnelError> {
    if decrypted.first().and_then(Part::as_key) != Some(opuk_plain) {
        return Err(TunnelError::Integrity(router.coord));
    }
    let r = decrypted
        .get(1)
        .and_then(Part::as_word)
        .ok_or(TunnelError::Malformed(PacketType::Ti))?;
    let n_e = ctx.nonces.gen_nonce(router.coord, ctx.rng);
    let k_se = ctx.keys.keygen_sym();
    let entry = router
        .tl
        .get_mut(&opuk_plain.pair_id())
        .expect("TL row stored before TA");
    entry.own_nonce = Some(n_e);
    entry.own_symkey = Some(k_se);
    router.by_nonce.insert(n_e.value, opuk_plain.pair_id());
    router.install_route(RoutingEntry {
        vci_in: n_e.value,
        vci_out: VciNext::Endpoint,
        port_out: None,
        symkey_for_dest: Some(k_se),
        opuk_pair: opuk_plain.pair_id(),
        installed_cycle: ctx.cycle,
    });
    let for_source = enc(
        &opuk_plain,
        vec![Part::Word(r), Part::Nonce(n_e.value), Part::Key(k_se)],
    )
    .expect("public key seals");
    let outer = enc(&tpuk_prev, vec![Part::Sealed(for_source)]).expect("public key seals");
    Ok(ctx.control_packet(
        PacketType::Ta,
        vec![Part::Key(opuk_plain), Part::Sealed(outer)],
        router.coord,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaOutcome {
    /// No TL row for this tunnel, or the outer layer would not open.
    Stray,
    /// This router started the tunnel; hand the TA to [`generate_tc`].
    Source {
        opuk_pair: u64,
    },
    Forward {
        ta: Packet,
        out: Port,
    },
}

pub fn handle_ta(router: &mut RouterState, ctx: &mut ProtocolCtx<'_>, pkt: &Packet, arrival: Port) -> TaOutcome {
    let Some(opuk) = pkt.parts.first().and_then(Part::as_key) else {
        router.counters.stray_ta += 1;
        return TaOutcome::Stray;
    };
    let Some(entry) = router.tl.get(&opuk.pair_id()) else {
        router.counters.stray_ta += 1;
        return TaOutcome::Stray;
    };
    if entry.port_pre == Port::Local {
        return TaOutcome::Source {
            opuk_pair: opuk.pair_id(),
        };
    }
    let dct = match pkt
        .parts
        .get(1)
        .and_then(Part::as_sealed)
        .map(|e| e.open(&entry.own_temp.private))
    {
        Some(Ok([Part::Sealed(inner)])) => inner.clone(),
        _ => {
            router.counters.stray_ta += 1;
            return TaOutcome::Stray;
        }
    };
    let n_r = ctx.nonces.gen_nonce(router.coord, ctx.rng);
    let k_sr = ctx.keys.keygen_sym();
    let entry = router.tl.get_mut(&opuk.pair_id()).expect("checked above");
    entry.own_nonce = Some(n_r);
    entry.own_symkey = Some(k_sr);
    entry.port_downstream = Some(arrival);
    let (tpuk_pre, port_pre, opuk) = (entry.tpuk_pre, entry.port_pre, entry.opuk);
    router.by_nonce.insert(n_r.value, opuk.pair_id());

    let layer = enc(&opuk, vec![Part::Sealed(dct), Part::Nonce(n_r.value), Part::Key(k_sr)]).expect("public key seals");
    let outer = enc(&tpuk_pre, vec![Part::Sealed(layer)]).expect("public key seals");
    let ta = ctx.control_packet(
        PacketType::Ta,
        vec![Part::Key(opuk), Part::Sealed(outer)],
        pkt.truth.origin,
    );
    TaOutcome::Forward { ta, out: port_pre }
}

/// Peel the TA at its source, check `r`, and build the layered TC
/// `[n_1, enc(K_1, [n_2, enc(K_2, ... [n_E, enc(K_E, [r])])])]`.
pub fn generate_tc(
    src: &mut RouterState,
    ctx: &mut ProtocolCtx<'_>,
    pending: &PendingTunnel,
    ta: &Packet,
    arrival: Port,
    timeout: Option<u64>,
) -> Result<(Packet, TunnelHandle), TunnelError> {
    let malformed = TunnelError::Malformed(PacketType::Ta);
    let outer = ta.parts.get(1).and_then(Part::as_sealed).ok_or(malformed.clone())?;
    let mut layer: Envelope = match outer.open(&pending.temp.private) {
        Ok([Part::Sealed(inner)]) => inner.clone(),
        _ => return Err(malformed),
    };
    let hops = pending.hop_count as usize;
    let mut nonces = Vec::with_capacity(hops);
    let mut keys = Vec::with_capacity(hops);
    let mut recovered_r = None;
    for i in 0..hops {
        let body = layer.open(&pending.opuk.private).map_err(|_| malformed.clone())?;
        let innermost = i + 1 == hops;
        match body {
            [Part::Word(r), Part::Nonce(n), Part::Key(k)] if innermost => {
                recovered_r = Some(*r);
                nonces.push(*n);
                keys.push(*k);
            }
            [Part::Sealed(next), Part::Nonce(n), Part::Key(k)] if !innermost => {
                nonces.push(*n);
                keys.push(*k);
                layer = next.clone();
            }
            _ => return Err(malformed),
        }
    }
    if recovered_r != Some(pending.r.value) {
        return Err(TunnelError::Authenticity);
    }

    let mut body = vec![Part::Word(pending.r.value)];
    for (n, k) in nonces.iter().zip(&keys).rev() {
        let sealed = enc(k, body).expect("symmetric key seals");
        body = vec![Part::Nonce(*n), Part::Sealed(sealed)];
    }
    // body is now [n_first, enc(K_first, ...)]
    let tc = ctx.control_packet(PacketType::Tc, body, src.coord);

    if let Some(entry) = src.tl.get_mut(&pending.opuk.public.pair_id()) {
        entry.port_downstream = Some(arrival);
    }
    src.source_routes
        .insert(nonces[0], (arrival, pending.opuk.public.pair_id()));

    let handle = TunnelHandle {
        opuk_pair: pending.opuk.public.pair_id(),
        endpoint: pending.endpoint,
        hop_count: pending.hop_count,
        vci_first: nonces[0],
        symkeys: keys,
        port_first: arrival,
        started_cycle: pending.started_cycle,
        created_cycle: ctx.cycle,
        expires_cycle: timeout.map(|t| ctx.cycle + t),
        dest: pending.dest,
    };
    Ok((tc, handle))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TcOutcome {
    /// No tunnel here expects this nonce.
    Unknown,
    Forward {
        tc: Packet,
        out: Port,
    },
    /// The TC reached the endpoint and `r` came out of the last layer.
    Complete {
        opuk_pair: u64,
        r: u64,
    },
}

pub fn handle_tc(router: &mut RouterState, ctx: &mut ProtocolCtx<'_>, pkt: &Packet) -> TcOutcome {
    let Some(n) = pkt.parts.first().and_then(Part::as_nonce) else {
        router.counters.unknown_tc += 1;
        return TcOutcome::Unknown;
    };
    let Some(&opuk_pair) = router.by_nonce.get(&n) else {
        router.counters.unknown_tc += 1;
        return TcOutcome::Unknown;
    };
    let entry = &router.tl[&opuk_pair];
    let (Some(key), Some(sealed)) = (entry.own_symkey, pkt.parts.get(1).and_then(Part::as_sealed)) else {
        router.counters.unknown_tc += 1;
        return TcOutcome::Unknown;
    };
    match sealed.open(&key) {
        Ok([Part::Word(r)]) => TcOutcome::Complete { opuk_pair, r: *r },
        Ok([Part::Nonce(next), Part::Sealed(rest)]) => {
            let Some(out) = entry.port_downstream else {
                router.counters.unknown_tc += 1;
                return TcOutcome::Unknown;
            };
            let (next, rest) = (*next, rest.clone());
            router.install_route(RoutingEntry {
                vci_in: n,
                vci_out: VciNext::Forward(next),
                port_out: Some(out),
                symkey_for_dest: None,
                opuk_pair,
                installed_cycle: ctx.cycle,
            });
            let tc = ctx.control_packet(
                PacketType::Tc,
                vec![Part::Nonce(next), Part::Sealed(rest)],
                pkt.truth.origin,
            );
            TcOutcome::Forward { tc, out }
        }
        _ => {
            router.counters.unknown_tc += 1;
            TcOutcome::Unknown
        }
    }
}

/// Wrap a payload into a DT packet for `tunnel`:
/// `vci = n_first`, destination sealed under `K_{S-E}`.
pub fn send_dt(
    tunnel: &TunnelHandle,
    ids: &mut IdAllocator,
    src: Coord,
    dest: Coord,
    payload: Envelope,
    n_flits: usize,
    now: u64,
) -> Result<Packet, TunnelError> {
    if !tunnel.is_live(now) {
        return Err(TunnelError::Expired(tunnel.expires_cycle.unwrap_or(now)));
    }
    Ok(build_dt(tunnel, ids, src, dest, payload, n_flits, now))
}

/// [`send_dt`] without the expiry check, for a source still draining an
/// expired tunnel while its replacement is being built.
pub fn build_dt(
    tunnel: &TunnelHandle,
    ids: &mut IdAllocator,
    src: Coord,
    dest: Coord,
    payload: Envelope,
    n_flits: usize,
    now: u64,
) -> Packet {
    let sealed_dest = enc(&tunnel.endpoint_key(), vec![Part::Coord(dest)]).expect("symmetric key seals");
    Packet {
        id: ids.packet(),
        pkt_type: PacketType::Dt,
        vci: Some(tunnel.vci_first),
        dest: Some(DestHeader::Sealed(sealed_dest)),
        chaff_header: None,
        parts: vec![Part::Sealed(payload)],
        flits: ids.flits(n_flits),
        creation_cycle: now,
        truth: GroundTruth {
            origin: src,
            final_dest: Some(dest),
            dummy: false,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DtOutcome {
    /// VCI rewritten in place; send out `port`.
    Swapped {
        port: Port,
    },
    /// This router is the tunnel endpoint for the packet.
    Endpoint {
        symkey: KeyHandle,
    },
    Unknown,
}

/// Route a DT packet that is still inside a tunnel. A packet injected
/// locally uses the first-hop egress of the tunnel this router originated.
pub fn forward_dt(router: &mut RouterState, pkt: &mut Packet, arrival: Port) -> DtOutcome {
    let Some(vci) = pkt.vci else {
        router.counters.unknown_vci += 1;
        return DtOutcome::Unknown;
    };
    if arrival == Port::Local {
        if let Some(port) = router.source_route(vci) {
            return DtOutcome::Swapped { port };
        }
    }
    match router.routes.get(&vci) {
        Some(RoutingEntry {
            vci_out: VciNext::Forward(next),
            port_out: Some(port),
            ..
        }) => {
            pkt.vci = Some(*next);
            DtOutcome::Swapped { port: *port }
        }
        Some(RoutingEntry {
            vci_out: VciNext::Endpoint,
            symkey_for_dest: Some(k),
            ..
        }) => DtOutcome::Endpoint { symkey: *k },
        _ => {
            router.counters.unknown_vci += 1;
            DtOutcome::Unknown
        }
    }
}

/// Recover the plaintext destination at the tunnel endpoint.
pub fn open_destination(pkt: &Packet, symkey: &KeyHandle) -> Option<Coord> {
    match &pkt.dest {
        Some(DestHeader::Sealed(env)) => match env.open(symkey) {
            Ok([Part::Coord(c)]) => Some(*c),
            _ => None,
        },
        _ => None,
    }
}

/// Follow installed VCI rows from the source of `tunnel` and return the
/// routers visited (source first) together with the output port used at
/// each of them. Fails if the chain breaks or does not end at an endpoint
/// row on `tunnel.endpoint` after exactly `hop_count` hops.
pub fn trace_vci_chain(
    mesh: &Mesh,
    routers: &[RouterState],
    src: Coord,
    tunnel: &TunnelHandle,
) -> Result<(Vec<Coord>, Vec<Port>), String> {
    let mut path = vec![src];
    let mut ports = Vec::new();
    let src_state = &routers[mesh.node_id(src)];
    let mut port = src_state
        .source_route(tunnel.vci_first)
        .ok_or_else(|| format!("source {src} has no egress for VCI {}", tunnel.vci_first))?;
    let mut vci = tunnel.vci_first;
    let mut cur = src;
    for step in 0..=tunnel.hop_count {
        ports.push(port);
        cur = mesh
            .neighbor(cur, port)
            .ok_or_else(|| format!("port {port} leaves the mesh at {cur}"))?;
        path.push(cur);
        let row = routers[mesh.node_id(cur)]
            .route(vci)
            .ok_or_else(|| format!("router {cur} has no row for VCI {vci}"))?;
        match (row.vci_out, row.port_out) {
            (VciNext::Endpoint, _) => {
                if step + 1 != tunnel.hop_count {
                    return Err(format!(
                        "endpoint row after {} hops, expected {}",
                        step + 1,
                        tunnel.hop_count
                    ));
                }
                if cur != tunnel.endpoint {
                    return Err(format!("chain ends at {cur}, endpoint is {}", tunnel.endpoint));
                }
                return Ok((path, ports));
            }
            (VciNext::Forward(next), Some(p)) => {
                vci = next;
                port = p;
            }
            _ => return Err(format!("malformed row at {cur}")),
        }
    }
    Err(format!("no endpoint row within {} hops", tunnel.hop_count))
}

/// True if moving out of `ports[i]` then `ports[i+1]` ever turns from a Y
/// link back onto an X link.
pub fn has_y_to_x_turn(ports: &[Port]) -> bool {
    ports.windows(2).any(|w| w[0].is_y() && w[1].is_x())
}

/// Public keys of every router, readable by every network interface.
#[derive(Debug, Clone)]
pub struct KeyDirectory {
    mesh: Mesh,
    public: Vec<KeyHandle>,
}

impl KeyDirectory {
    pub fn new(mesh: Mesh, routers: &[RouterState]) -> Self {
        KeyDirectory {
            mesh,
            public: routers.iter().map(RouterState::public_key).collect(),
        }
    }

    pub fn public_key(&self, c: Coord) -> KeyHandle {
        self.public[self.mesh.node_id(c)]
    }
}

/// Source-side tunnel bookkeeping for one node. Outbound tunnels are keyed
/// by `None`; full-path tunnels by their destination.
#[derive(Debug, Clone, Default)]
pub struct SourceAgent {
    pending: BTreeMap<u64, PendingTunnel>,
    current: BTreeMap<Option<Coord>, TunnelHandle>,
    last_endpoint: BTreeMap<Option<Coord>, Coord>,
}

impl SourceAgent {
    /// Tunnel to send on. An expired tunnel keeps serving until its
    /// replacement is ready.
    pub fn usable(&self, key: Option<Coord>) -> Option<&TunnelHandle> {
        self.current.get(&key)
    }

    pub fn has_pending(&self, key: Option<Coord>) -> bool {
        self.pending.values().any(|p| p.dest == key)
    }

    /// A handshake should start: nothing pending, and no tunnel or an expired one.
    pub fn needs_handshake(&self, key: Option<Coord>, now: u64) -> bool {
        !self.has_pending(key) && self.current.get(&key).is_none_or(|t| !t.is_live(now))
    }

    pub fn previous_endpoint(&self, key: Option<Coord>) -> Option<Coord> {
        self.last_endpoint.get(&key).copied()
    }

    pub fn begin(&mut self, pending: PendingTunnel) {
        self.pending.insert(pending.opuk.public.pair_id(), pending);
    }

    pub fn take_pending(&mut self, opuk_pair: u64) -> Option<PendingTunnel> {
        self.pending.remove(&opuk_pair)
    }

    /// Make `handle` current; returns the tunnel it replaces.
    pub fn install(&mut self, handle: TunnelHandle) -> Option<TunnelHandle> {
        self.last_endpoint.insert(handle.dest, handle.endpoint);
        self.current.insert(handle.dest, handle)
    }

    /// Remove handshakes started more than `timeout` cycles ago.
    pub fn expire_pending(&mut self, now: u64, timeout: u64) -> Vec<PendingTunnel> {
        let stale: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| now.saturating_sub(p.started_cycle) > timeout)
            .map(|(&k, _)| k)
            .collect();
        stale.into_iter().filter_map(|k| self.pending.remove(&k)).collect()
    }

    pub fn tunnels(&self) -> impl Iterator<Item = &TunnelHandle> {
        self.current.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    /// The four-router line R1 -> R2 -> R3 -> R4 along the bottom row.
    struct Line {
        keys: KeyFactory,
        nonces: NonceSource,
        rng: SimRng,
        ids: IdAllocator,
        routers: Vec<RouterState>,
    }

    impl Line {
        fn new() -> Self {
            let mut keys = KeyFactory::new();
            let routers = (0..4)
                .map(|x| RouterState::new(Coord::new(x, 0), keys.keygen_asym()))
                .collect();
            Line {
                keys,
                nonces: NonceSource::new(),
                rng: stream_rng(1, Stream::Crypto, 0),
                ids: IdAllocator::default(),
                routers,
            }
        }

        fn ctx(&mut self) -> (ProtocolCtx<'_>, &mut Vec<RouterState>) {
            (
                ProtocolCtx {
                    keys: &mut self.keys,
                    nonces: &mut self.nonces,
                    rng: &mut self.rng,
                    ids: &mut self.ids,
                    cycle: 0,
                },
                &mut self.routers,
            )
        }

        fn ti(&mut self) -> (Packet, PendingTunnel) {
            let puk_e = self.routers[3].public_key();
            let (mut ctx, routers) = self.ctx();
            build_ti(&mut routers[0], &mut ctx, Coord::new(3, 0), puk_e, None)
        }

        /// Runs TI through R2, R3 to R4 and returns (pending, TA leaving R4).
        fn run_to_endpoint(&mut self) -> (PendingTunnel, Packet) {
            let (mut ti, pending) = self.ti();
            for i in 1..3 {
                let (mut ctx, routers) = self.ctx();
                match handle_ti(&mut routers[i], &mut ctx, &ti, Port::West) {
                    TiOutcome::Forward(p) => ti = p,
                    other => panic!("R{} did not forward: {other:?}", i + 1),
                }
            }
            let (mut ctx, routers) = self.ctx();
            match handle_ti(&mut routers[3], &mut ctx, &ti, Port::West) {
                TiOutcome::Endpoint { ta, out } => {
                    assert_eq!(out, Port::West);
                    (pending, ta)
                }
                other => panic!("R4 is the endpoint: {other:?}"),
            }
        }

        fn run_to_source(&mut self) -> (PendingTunnel, Packet) {
            let (pending, mut ta) = self.run_to_endpoint();
            for i in [2usize, 1] {
                let (mut ctx, routers) = self.ctx();
                match handle_ta(&mut routers[i], &mut ctx, &ta, Port::East) {
                    TaOutcome::Forward { ta: next, out } => {
                        assert_eq!(out, Port::West);
                        ta = next;
                    }
                    other => panic!("R{} should forward TA: {other:?}", i + 1),
                }
            }
            (pending, ta)
        }

        fn established(&mut self) -> (TunnelHandle, Packet) {
            let (pending, ta) = self.run_to_source();
            let (mut ctx, routers) = self.ctx();
            assert_eq!(
                handle_ta(&mut routers[0], &mut ctx, &ta, Port::East),
                TaOutcome::Source {
                    opuk_pair: pending.opuk.public.pair_id()
                }
            );
            let (tc, handle) = generate_tc(&mut routers[0], &mut ctx, &pending, &ta, Port::East, Some(100)).unwrap();
            (handle, tc)
        }
    }

    #[test]
    fn ti_sealed_part_opens_only_at_endpoint() {
        let mut line = Line::new();
        let (ti, pending) = line.ti();
        let sealed = ti.parts[1].as_sealed().unwrap();
        for (i, r) in line.routers.iter().enumerate() {
            assert_eq!(sealed.open(&r.global.private).is_ok(), i == 3);
        }
        // part 1 equals the key inside part 2
        let inner = sealed.open(&line.routers[3].global.private).unwrap();
        assert_eq!(inner[0], ti.parts[0]);
        assert_eq!(inner[1], Part::Word(pending.r.value));
    }

    #[test]
    fn one_time_keys_differ_per_tunnel() {
        let mut line = Line::new();
        let (a, _) = line.ti();
        let (b, _) = line.ti();
        assert_ne!(
            a.parts[0].as_key().unwrap().pair_id(),
            b.parts[0].as_key().unwrap().pair_id()
        );
    }

    #[test]
    fn forwarded_ti_carries_forwarder_temp_key() {
        let mut line = Line::new();
        let (ti, _) = line.ti();
        let (mut ctx, routers) = line.ctx();
        let TiOutcome::Forward(fwd) = handle_ti(&mut routers[1], &mut ctx, &ti, Port::West) else {
            panic!("expected forward");
        };
        let opuk = ti.parts[0].as_key().unwrap().pair_id();
        let own = routers[1].tl_entry(opuk).unwrap().own_temp.public;
        assert_eq!(fwd.parts[2], Part::Key(own));
        assert_eq!(fwd.parts[..2], ti.parts[..2]);
    }

    #[test]
    fn duplicate_ti_is_discarded() {
        let mut line = Line::new();
        let (ti, _) = line.ti();
        let (mut ctx, routers) = line.ctx();
        assert!(matches!(
            handle_ti(&mut routers[1], &mut ctx, &ti, Port::West),
            TiOutcome::Forward(_)
        ));
        let before = routers[1].tl_entry(ti.parts[0].as_key().unwrap().pair_id()).cloned();
        assert_eq!(
            handle_ti(&mut routers[1], &mut ctx, &ti, Port::South),
            TiOutcome::Discard
        );
        assert_eq!(
            routers[1].tl_entry(ti.parts[0].as_key().unwrap().pair_id()).cloned(),
            before
        );
        assert_eq!(routers[1].tl_len(), 1);
        assert_eq!(routers[1].counters.ti_duplicates, 1);
    }

    #[test]
    fn mismatched_key_inside_ti_is_rejected() {
        let mut line = Line::new();
        let (mut ti, _) = line.ti();
        let impostor = line.keys.keygen_asym();
        ti.parts[0] = Part::Key(impostor.public);
        let (mut ctx, routers) = line.ctx();
        assert_eq!(
            handle_ti(&mut routers[3], &mut ctx, &ti, Port::West),
            TiOutcome::Rejected
        );
        assert!(routers[3].routes().next().is_none());
    }

    #[test]
    fn ta_outer_layer_is_for_previous_hop() {
        let mut line = Line::new();
        let (pending, ta) = line.run_to_endpoint();
        let outer = ta.parts[1].as_sealed().unwrap();
        let r3 = line.routers[2].tl_entry(pending.opuk.public.pair_id()).unwrap();
        assert_eq!(outer.required_pair_id(), r3.own_temp.public.pair_id());
        let inner = outer.open(&r3.own_temp.private).unwrap()[0]
            .as_sealed()
            .unwrap()
            .clone();
        // only the source's one-time private key opens the inner layer
        assert!(inner.open(&r3.own_temp.private).is_err());
        let body = inner.open(&pending.opuk.private).unwrap();
        assert_eq!(body[0], Part::Word(pending.r.value));
        // endpoint row is in place before the TC ever arrives
        let e = &line.routers[3];
        let n_e = e.tl_entry(pending.opuk.public.pair_id()).unwrap().own_nonce.unwrap();
        assert_eq!(body[1], Part::Nonce(n_e.value));
        assert_eq!(e.route(n_e.value).unwrap().vci_out, VciNext::Endpoint);
    }

    #[test]
    fn ta_at_source_has_triple_one_time_key_nesting() {
        let mut line = Line::new();
        let (pending, ta) = line.run_to_source();
        let pair = pending.opuk.public.pair_id();
        let outer = ta.parts[1].as_sealed().unwrap();
        assert_eq!(outer.required_pair_id(), pending.temp.public.pair_id());
        let mut layer = outer.open(&pending.temp.private).unwrap()[0]
            .as_sealed()
            .unwrap()
            .clone();
        let mut depth = 1;
        let mut nonces = vec![];
        loop {
            assert_eq!(layer.required_pair_id(), pair);
            let body = layer.open(&pending.opuk.private).unwrap().to_vec();
            nonces.push(body[1].as_nonce().unwrap());
            match &body[0] {
                Part::Sealed(next) => {
                    layer = next.clone();
                    depth += 1;
                }
                Part::Word(r) => {
                    assert_eq!(*r, pending.r.value);
                    break;
                }
                other => panic!("unexpected {other:?}"),
            }
        }
        assert_eq!(depth, 3);
        let own = |i: usize| line.routers[i].tl_entry(pair).unwrap().own_nonce.unwrap().value;
        // outermost belongs to R2, innermost to the endpoint
        assert_eq!(nonces, vec![own(1), own(2), own(3)]);
    }

    #[test]
    fn stray_ta_is_discarded() {
        let mut line = Line::new();
        let (_, ta) = line.run_to_endpoint();
        let (mut ctx, _) = line.ctx();
        let mut fresh = RouterState::new(Coord::new(0, 1), ctx.keys.keygen_asym());
        assert_eq!(handle_ta(&mut fresh, &mut ctx, &ta, Port::East), TaOutcome::Stray);
        assert_eq!(fresh.counters.stray_ta, 1);
    }

    #[test]
    fn tc_matches_layered_shape() {
        let mut line = Line::new();
        let (handle, tc) = line.established();
        let pair = handle.opuk_pair;
        let entry = |i: usize| line.routers[i].tl_entry(pair).unwrap().clone();
        let (r2, r3, e) = (entry(1), entry(2), entry(3));
        assert_eq!(
            handle.symkeys,
            vec![r2.own_symkey.unwrap(), r3.own_symkey.unwrap(), e.own_symkey.unwrap()]
        );
        assert_eq!(handle.hop_count, 3);
        assert_eq!(handle.vci_first, r2.own_nonce.unwrap().value);
        assert_eq!(handle.expires_cycle, Some(handle.created_cycle + 100));

        // {TC || n_R2 || enc(K_R2, n_R3 || enc(K_R3, n_E || enc(K_E, r)))}
        assert_eq!(tc.parts[0], Part::Nonce(r2.own_nonce.unwrap().value));
        let l2 = tc.parts[1].as_sealed().unwrap().open(&r2.own_symkey.unwrap()).unwrap();
        assert_eq!(l2[0], Part::Nonce(r3.own_nonce.unwrap().value));
        let l3 = l2[1].as_sealed().unwrap().open(&r3.own_symkey.unwrap()).unwrap();
        assert_eq!(l3[0], Part::Nonce(e.own_nonce.unwrap().value));
        let le = l3[1].as_sealed().unwrap().open(&e.own_symkey.unwrap()).unwrap();
        assert!(matches!(le, [Part::Word(_)]));
    }

    #[test]
    fn wrong_r_aborts_tunnel() {
        let mut line = Line::new();
        let (mut pending, ta) = line.run_to_source();
        pending.r.value ^= 1;
        let (mut ctx, routers) = line.ctx();
        assert_eq!(
            generate_tc(&mut routers[0], &mut ctx, &pending, &ta, Port::East, None).unwrap_err(),
            TunnelError::Authenticity
        );
    }

    #[test]
    fn tc_installs_vci_rows_and_completes() {
        let mut line = Line::new();
        let (handle, mut tc) = line.established();
        let pair = handle.opuk_pair;
        let nonce = |line: &Line, i: usize| line.routers[i].tl_entry(pair).unwrap().own_nonce.unwrap().value;
        let (n2, n3, ne) = (nonce(&line, 1), nonce(&line, 2), nonce(&line, 3));

        let (mut ctx, routers) = line.ctx();
        let TcOutcome::Forward { tc: next, out } = handle_tc(&mut routers[1], &mut ctx, &tc) else {
            panic!("R2 forwards");
        };
        assert_eq!(out, Port::East);
        assert_eq!(routers[1].route(n2).unwrap().vci_out, VciNext::Forward(n3));
        // {TC || n_R3 || enc(K_R3, n_E || enc(K_E, r))}
        assert_eq!(next.parts[0], Part::Nonce(n3));
        tc = next;
        let TcOutcome::Forward { tc: next, .. } = handle_tc(&mut routers[2], &mut ctx, &tc) else {
            panic!("R3 forwards");
        };
        // {TC || n_E || enc(K_E, r)}
        assert_eq!(next.parts[0], Part::Nonce(ne));
        let TcOutcome::Complete { opuk_pair, r } = handle_tc(&mut routers[3], &mut ctx, &next) else {
            panic!("endpoint completes");
        };
        assert_eq!(opuk_pair, pair);
        let _ = r;

        let mesh = Mesh::new(4, 1);
        let (path, ports) = trace_vci_chain(&mesh, &line.routers, Coord::new(0, 0), &handle).unwrap();
        assert_eq!(path.len(), 4);
        assert_eq!(*path.last().unwrap(), Coord::new(3, 0));
        assert!(!has_y_to_x_turn(&ports));
    }

    #[test]
    fn unknown_tc_nonce_is_discarded() {
        let mut line = Line::new();
        let (_, mut tc) = line.established();
        tc.parts[0] = Part::Nonce(12345);
        let (mut ctx, routers) = line.ctx();
        assert_eq!(handle_tc(&mut routers[1], &mut ctx, &tc), TcOutcome::Unknown);
    }

    #[test]
    fn data_transfer_swaps_vcis_and_endpoint_reads_destination() {
        let mut line = Line::new();
        let (handle, mut tc) = line.established();
        for i in 1..=3 {
            let (mut ctx, routers) = line.ctx();
            if let TcOutcome::Forward { tc: next, .. } = handle_tc(&mut routers[i], &mut ctx, &tc) {
                tc = next;
            }
        }
        let dest = Coord::new(3, 3);
        let payload = enc(&line.keys.keygen_sym(), vec![Part::Bytes(vec![1, 2, 3])]).unwrap();
        let mut dt = send_dt(&handle, &mut line.ids, Coord::new(0, 0), dest, payload.clone(), 5, 10).unwrap();
        assert_eq!(dt.vci, Some(handle.vci_first));
        // no plaintext coordinates anywhere in the packet
        assert!(KeyChain::new().readable_coords(&dt.visible_parts()).is_empty());

        let pair = handle.opuk_pair;
        let nonce = |i: usize| line.routers[i].tl_entry(pair).unwrap().own_nonce.unwrap().value;
        let (n3, ne) = (nonce(2), nonce(3));
        assert_eq!(
            forward_dt(&mut line.routers[0], &mut dt, Port::Local),
            DtOutcome::Swapped { port: Port::East }
        );
        assert_eq!(
            forward_dt(&mut line.routers[1], &mut dt, Port::West),
            DtOutcome::Swapped { port: Port::East }
        );
        assert_eq!(dt.vci, Some(n3));
        assert_eq!(
            forward_dt(&mut line.routers[2], &mut dt, Port::West),
            DtOutcome::Swapped { port: Port::East }
        );
        assert_eq!(dt.vci, Some(ne));
        let DtOutcome::Endpoint { symkey } = forward_dt(&mut line.routers[3], &mut dt, Port::West) else {
            panic!("endpoint");
        };
        assert_eq!(open_destination(&dt, &symkey), Some(dest));
        assert_eq!(dt.parts, vec![Part::Sealed(payload)]);
    }

    #[test]
    fn unknown_vci_is_counted() {
        let mut line = Line::new();
        let mut ids = IdAllocator::default();
        let mut pkt = Packet {
            id: ids.packet(),
            pkt_type: PacketType::Dt,
            vci: Some(77),
            dest: None,
            chaff_header: None,
            parts: vec![],
            flits: ids.flits(1),
            creation_cycle: 0,
            truth: GroundTruth {
                origin: Coord::new(0, 0),
                final_dest: None,
                dummy: false,
            },
        };
        assert_eq!(
            forward_dt(&mut line.routers[1], &mut pkt, Port::West),
            DtOutcome::Unknown
        );
        assert_eq!(line.routers[1].counters.unknown_vci, 1);
    }

    #[test]
    fn expired_tunnel_refuses_data() {
        let mut line = Line::new();
        let (handle, _) = line.established();
        let payload = enc(&line.keys.keygen_sym(), vec![]).unwrap();
        let late = handle.expires_cycle.unwrap();
        assert!(matches!(
            send_dt(
                &handle,
                &mut line.ids,
                Coord::new(0, 0),
                Coord::new(1, 1),
                payload,
                5,
                late
            ),
            Err(TunnelError::Expired(_))
        ));
    }

    #[test]
    fn purge_drops_every_trace_of_a_tunnel() {
        let mut line = Line::new();
        let (handle, mut tc) = line.established();
        for i in 1..=3 {
            let (mut ctx, routers) = line.ctx();
            if let TcOutcome::Forward { tc: next, .. } = handle_tc(&mut routers[i], &mut ctx, &tc) {
                tc = next;
            }
        }
        for r in &mut line.routers {
            r.purge(handle.opuk_pair);
            assert_eq!(r.tl_len(), 0);
            assert!(r.routes().next().is_none());
        }
        assert!(line.routers[0].source_route(handle.vci_first).is_none());
    }

    #[test]
    fn endpoint_candidates_4x4_corner() {
        let mesh = Mesh::new(4, 4);
        let mut got = endpoint_candidates(&mesh, Coord::new(0, 0), 3, 4);
        got.sort();
        let mut want = vec![
            Coord::new(3, 0),
            Coord::new(0, 3),
            Coord::new(2, 1),
            Coord::new(1, 2),
            Coord::new(3, 1),
            Coord::new(1, 3),
            Coord::new(2, 2),
        ];
        want.sort();
        assert_eq!(got, want);
        assert_eq!(endpoint_candidates(&mesh, Coord::new(0, 0), 3, 3).len(), 4);
    }

    #[test]
    fn select_endpoint_errors_on_tiny_mesh() {
        let mesh = Mesh::new(2, 2);
        let cfg = TunnelConfig::default();
        let mut rng = stream_rng(0, Stream::Tunnel, 0);
        assert!(matches!(
            select_endpoint(&mesh, Coord::new(0, 0), &cfg, &mut rng, None, None),
            Err(TunnelError::NoEndpoint { .. })
        ));
        assert!(cfg.validate(&mesh).is_err());
    }

    #[test]
    fn validate_rejects_mesh_with_unreachable_centre() {
        // 3x3 corners reach 4 hops, but the centre is at most 2 from anyone
        let cfg = TunnelConfig {
            h_max: 3,
            ..TunnelConfig::default()
        };
        let err = cfg.validate(&Mesh::new(3, 3)).unwrap_err();
        assert!(
            matches!(
                err,
                TunnelError::NoEndpoint {
                    src: Coord { x: 1, y: 1 },
                    ..
                }
            ),
            "{err}"
        );
        assert!(cfg.validate(&Mesh::new(4, 4)).is_ok());
    }

    #[test]
    fn select_endpoint_full_path_uses_destination() {
        let mesh = Mesh::new(8, 8);
        let cfg = TunnelConfig {
            mode: TunnelMode::FullPath,
            ..TunnelConfig::default()
        };
        let mut rng = stream_rng(0, Stream::Tunnel, 0);
        let d = Coord::new(7, 7);
        assert_eq!(
            select_endpoint(&mesh, Coord::new(0, 0), &cfg, &mut rng, None, Some(d)).unwrap(),
            d
        );
    }

    #[test]
    fn select_endpoint_excludes_previous() {
        let mesh = Mesh::new(4, 4);
        let cfg = TunnelConfig::default();
        let mut rng = stream_rng(3, Stream::Tunnel, 0);
        let prev = Coord::new(2, 2);
        for _ in 0..200 {
            assert_ne!(
                select_endpoint(&mesh, Coord::new(0, 0), &cfg, &mut rng, Some(prev), None).unwrap(),
                prev
            );
        }
    }

    #[test]
    fn y_to_x_turn_detection() {
        assert!(!has_y_to_x_turn(&[Port::East, Port::East, Port::North, Port::North]));
        assert!(has_y_to_x_turn(&[Port::North, Port::East]));
        assert!(!has_y_to_x_turn(&[Port::West, Port::South]));
    }
}
