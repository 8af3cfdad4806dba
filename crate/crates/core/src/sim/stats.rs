//! Run statistics and ground-truth audits.

use serde::Serialize;

use crate::mesh::Coord;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: u64,
    pub p99: u64,
    /// Legitimate packets injected but not delivered when the run ended.
    pub in_flight: usize,
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Summarise per-packet latencies (tail ejection minus head injection).
pub fn measure_packet_latency(latencies: &[u64], in_flight: usize) -> LatencyStats {
    if latencies.is_empty() {
        return LatencyStats {
            in_flight,
            ..LatencyStats::default()
        };
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_unstable();
    LatencyStats {
        count: sorted.len(),
        mean: sorted.iter().sum::<u64>() as f64 / sorted.len() as f64,
        p50: percentile(&sorted, 0.50),
        p99: percentile(&sorted, 0.99),
        in_flight,
    }
}

/// One delivered legitimate packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub src: Coord,
    pub dst: Coord,
    pub created: u64,
    pub injected: u64,
    pub ejected: u64,
}

impl Delivery {
    pub fn latency(&self) -> u64 {
        self.ejected - self.injected
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DeliveryAudit {
    pub created: u64,
    pub injected: u64,
    pub delivered: u64,
    pub payload_mismatch: u64,
    pub misdelivered: u64,
    /// Delivered flit sequence differs from the legitimate injected one.
    pub flit_mismatch: u64,
    pub duplicates: u64,
    pub delivered_flits: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ObfuscationStats {
    pub dummy_packets: u64,
    pub chaff_flits: u64,
    pub spliced_packets: u64,
    /// Chaff flits removed at endpoints.
    pub winnowed: u64,
    pub foreign_chaff: u64,
    pub delayed_packets: u64,
    pub delay_cycles: u64,
    /// Chaff flits seen on a link after their tunnel ended, or ejected.
    pub chaff_beyond_endpoint: u64,
    /// Largest number of links any single chaff flit crossed.
    pub max_chaff_links: u32,
}

impl ObfuscationStats {
    pub fn mean_delay(&self) -> f64 {
        if self.delayed_packets == 0 {
            0.0
        } else {
            self.delay_cycles as f64 / self.delayed_packets as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ProtocolStats {
    pub handshakes_started: u64,
    pub handshakes_completed: u64,
    pub handshakes_abandoned: u64,
    pub authenticity_failures: u64,
    pub rotations: u64,
    pub unknown_vci_drops: u64,
    pub undecryptable_dest: u64,
    pub stray_ta: u64,
    pub unknown_tc: u64,
    pub ti_duplicates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    MidTunnel,
    Endpoint,
    PostTunnel,
}

/// What routers could name while handling data packets.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AnonymityAudit {
    pub observations: [u64; 3],
    /// Observations naming the true source.
    pub names_source: u64,
    /// Observations naming both source and destination.
    pub names_both: u64,
    /// Mid-tunnel observations naming anyone at all.
    pub mid_tunnel_names: u64,
    pub endpoint_names_dest: u64,
    pub first_violations: Vec<String>,
}

impl AnonymityAudit {
    pub fn violations(&self) -> u64 {
        self.names_source + self.mid_tunnel_names
    }

    pub fn total(&self) -> u64 {
        self.observations.iter().sum()
    }

    pub(crate) fn note(&mut self, msg: String) {
        if self.first_violations.len() < 16 {
            self.first_violations.push(msg);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HandshakeRecord {
    pub src: Coord,
    pub endpoint: Coord,
    pub hops: u32,
    pub ti_sent: u64,
    pub ready: u64,
    pub opuk_pair: u64,
}

impl HandshakeRecord {
    pub fn cycles(&self) -> u64 {
        self.ready - self.ti_sent
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SimStats {
    pub cycles: u64,
    pub deliveries: Vec<Delivery>,
    pub delivery: DeliveryAudit,
    pub obfuscation: ObfuscationStats,
    pub protocol: ProtocolStats,
    pub anonymity: AnonymityAudit,
    pub handshakes: Vec<HandshakeRecord>,
    pub dropped_flits: u64,
}

impl SimStats {
    /// Latency over legitimate packets created at or after `from_cycle`.
    pub fn latency(&self, from_cycle: u64, in_flight: usize) -> LatencyStats {
        let lats: Vec<u64> = self
            .deliveries
            .iter()
            .filter(|d| d.created >= from_cycle)
            .map(Delivery::latency)
            .collect();
        measure_packet_latency(&lats, in_flight)
    }
}
