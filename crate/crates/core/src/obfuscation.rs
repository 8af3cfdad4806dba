//! Traffic obfuscation: chaff at the source NI, winnowing and random delay
//! at the tunnel endpoint.
//!
//! Chaff comes in two forms. When the outbound link has been idle for more
//! than `T_c` cycles the NI may emit a whole dummy packet tagged with
//! `enc(K_SE, [tag])`; when a new packet arrives the NI may splice one dummy
//! flit into it at position `chId`, tagging the packet with
//! `enc(K_SE, [tag, chId])`. Only the endpoint holds `K_SE`, so only it can
//! tell chaff from data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envelope::{enc, KeyHandle, Part};
use crate::mesh::Coord;
use crate::packet::{DestHeader, FlitTag, GroundTruth, IdAllocator, Packet, PacketType};
use crate::rng::mix64;
use crate::tunnel::TunnelHandle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChaffConfig {
    pub enabled: bool,
    /// Percent of eligible events that produce chaff.
    pub pc: f64,
    /// Idle cycles on the outbound link before a dummy packet is considered.
    pub tc: u64,
    /// Inclusive flit-count range for dummy packets.
    pub dummy_flits: (usize, usize),
}

impl Default for ChaffConfig {
    fn default() -> Self {
        ChaffConfig {
            enabled: false,
            pc: 50.0,
            tc: 20,
            dummy_flits: (4, 5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayConfig {
    pub enabled: bool,
    /// Percent of packets delayed at the endpoint.
    pub pd: f64,
    /// Inclusive delay range in cycles.
    pub range: (u64, u64),
}

impl Default for DelayConfig {
    fn default() -> Self {
        DelayConfig {
            enabled: false,
            pd: 50.0,
            range: (1, 5),
        }
    }
}

impl ChaffConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=100.0).contains(&self.pc) {
            return Err(format!("chaff rate must be within 0..=100, got {}", self.pc));
        }
        if self.tc < 1 {
            return Err("chaff idle threshold must be >= 1".into());
        }
        let (lo, hi) = self.dummy_flits;
        if lo < 1 || lo > hi {
            return Err(format!("bad dummy flit range {lo}..={hi}"));
        }
        Ok(())
    }
}

impl DelayConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=100.0).contains(&self.pd) {
            return Err(format!("delay rate must be within 0..=100, got {}", self.pd));
        }
        let (lo, hi) = self.range;
        if lo < 1 || lo > hi {
            return Err(format!("bad delay range {lo}..={hi}"));
        }
        Ok(())
    }
}

/// 64-bit tag identifying an NI inside chaff headers.
pub fn ni_tag(node_id: usize) -> u64 {
    mix64(node_id as u64 ^ 0xC4AF_F000)
}

fn hit<R: Rng + ?Sized>(rng: &mut R, percent: f64) -> bool {
    rng.random_range(0.0..100.0) < percent
}

/// Per-NI chaffing state.
#[derive(Debug, Clone, Default)]
pub struct ChaffState {
    pub cflag: bool,
    /// Last cycle any flit left the NI.
    pub last_out: u64,
    /// A legitimate packet finished leaving the NI in the previous cycle.
    pub legit_sent: bool,
}

/// What one chaffing tick decided.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChaffDecision {
    /// Emit a dummy packet of this many flits.
    pub dummy: Option<usize>,
    /// Splice a chaff flit into the arriving packet at this index.
    pub splice_at: Option<usize>,
}

impl ChaffState {
    /// One wake-up of the chaffing logic. `arrival` is the flit count of a
    /// packet that reached the NI queue this cycle, if any. Callers must
    /// only invoke this while the NI has a live tunnel.
    pub fn tick<R: Rng + ?Sized>(
        &mut self,
        cfg: &ChaffConfig,
        cycle: u64,
        arrival: Option<usize>,
        rng: &mut R,
    ) -> ChaffDecision {
        if std::mem::take(&mut self.legit_sent) {
            self.cflag = false;
        }
        let mut out = ChaffDecision::default();
        if !self.cflag && cycle.saturating_sub(self.last_out) > cfg.tc {
            self.cflag = true;
            if hit(rng, cfg.pc) {
                let (lo, hi) = cfg.dummy_flits;
                out.dummy = Some(rng.random_range(lo..=hi));
            }
        }
        if let Some(len) = arrival {
            self.cflag = true;
            if hit(rng, cfg.pc) {
                out.splice_at = Some(rng.random_range(0..=len));
            }
        }
        out
    }
}

/// A whole dummy packet travelling the tunnel. Its destination header
/// names the endpoint so it looks like any other DT packet.
pub fn dummy_packet(
    tunnel: &TunnelHandle,
    ids: &mut IdAllocator,
    origin: Coord,
    tag: u64,
    n_flits: usize,
    now: u64,
) -> Packet {
    let key = tunnel.endpoint_key();
    let mut flits = ids.flits(n_flits);
    for f in &mut flits {
        f.chaff = true;
    }
    Packet {
        id: ids.packet(),
        pkt_type: PacketType::Dt,
        vci: Some(tunnel.vci_first),
        dest: Some(DestHeader::Sealed(seal(&key, vec![Part::Coord(tunnel.endpoint)]))),
        chaff_header: Some(seal(&key, vec![Part::Word(tag)])),
        parts: vec![],
        flits,
        creation_cycle: now,
        truth: GroundTruth {
            origin,
            final_dest: None,
            dummy: true,
        },
    }
}

fn seal(key: &KeyHandle, parts: Vec<Part>) -> crate::envelope::Envelope {
    enc(key, parts).expect("symmetric key seals")
}

/// Splice one chaff flit into `pkt` at `ch_id` (0..=len) and tag the packet.
pub fn splice_chaff(pkt: &mut Packet, ch_id: usize, key: &KeyHandle, tag: u64, ids: &mut IdAllocator) {
    assert!(ch_id <= pkt.flits.len(), "chaff index {ch_id} past packet end");
    assert!(pkt.chaff_header.is_none(), "packet {} already carries chaff", pkt.id);
    let flit = FlitTag {
        chaff: true,
        ..ids.flit()
    };
    pkt.flits.insert(ch_id, flit);
    pkt.chaff_header = Some(seal(key, vec![Part::Word(tag), Part::Word(ch_id as u64)]));
}

#[derive(Debug, Clone, PartialEq)]
pub enum Winnowed {
    /// Whole-packet dummy: drop it.
    Dummy,
    /// Chaff flit removed; the original packet is restored.
    Restored(Packet),
    /// No chaff header.
    Clean(Packet),
    /// Chaff header present but not ours to open; forwarded as-is.
    Foreign(Packet),
}

/// Filter chaff at the tunnel endpoint. Classification uses only what the
/// decrypted chaff header says, never the ground-truth tags.
pub fn winnow(mut pkt: Packet, key: &KeyHandle) -> Winnowed {
    let Some(header) = pkt.chaff_header.as_ref() else {
        return Winnowed::Clean(pkt);
    };
    match header.open(key) {
        Ok([Part::Word(_)]) => Winnowed::Dummy,
        Ok([Part::Word(_), Part::Word(ch)]) if (*ch as usize) < pkt.flits.len() => {
            let ch = *ch as usize;
            pkt.flits.remove(ch);
            pkt.chaff_header = None;
            Winnowed::Restored(pkt)
        }
        _ => Winnowed::Foreign(pkt),
    }
}

/// Draw the endpoint-exit delay for one packet: `None` means forward now.
pub fn draw_delay<R: Rng + ?Sized>(cfg: &DelayConfig, rng: &mut R) -> Option<u64> {
    if !cfg.enabled || !hit(rng, cfg.pd) {
        return None;
    }
    let (lo, hi) = cfg.range;
    Some(rng.random_range(lo..=hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::KeyFactory;
    use crate::mesh::Port;
    use crate::rng::{stream_rng, Stream};

    fn tunnel(keys: &mut KeyFactory) -> TunnelHandle {
        TunnelHandle {
            opuk_pair: 1,
            endpoint: Coord::new(3, 0),
            hop_count: 3,
            vci_first: 42,
            symkeys: vec![keys.keygen_sym(), keys.keygen_sym(), keys.keygen_sym()],
            port_first: Port::East,
            started_cycle: 0,
            created_cycle: 0,
            expires_cycle: None,
            dest: None,
        }
    }

    fn data(ids: &mut IdAllocator, n: usize) -> Packet {
        Packet {
            id: ids.packet(),
            pkt_type: PacketType::Dt,
            vci: Some(42),
            dest: None,
            chaff_header: None,
            parts: vec![Part::Bytes(vec![7])],
            flits: ids.flits(n),
            creation_cycle: 0,
            truth: GroundTruth {
                origin: Coord::new(0, 0),
                final_dest: Some(Coord::new(3, 3)),
                dummy: false,
            },
        }
    }

    #[test]
    fn idle_link_triggers_dummy_packet() {
        let cfg = ChaffConfig {
            enabled: true,
            pc: 100.0,
            ..ChaffConfig::default()
        };
        let mut st = ChaffState::default();
        let mut rng = stream_rng(0, Stream::Chaff, 0);
        // idle 20 is not enough, 25 is
        assert_eq!(st.tick(&cfg, 20, None, &mut rng).dummy, None);
        let d = st.tick(&cfg, 25, None, &mut rng).dummy.unwrap();
        assert!((4..=5).contains(&d));
        // cflag now set: no second dummy in the same gap
        assert_eq!(st.tick(&cfg, 60, None, &mut rng).dummy, None);
        // a legitimate send clears it
        st.legit_sent = true;
        st.last_out = 60;
        assert_eq!(st.tick(&cfg, 70, None, &mut rng).dummy, None);
        assert!(st.tick(&cfg, 81, None, &mut rng).dummy.is_some());
    }

    #[test]
    fn zero_rate_never_chaffs() {
        let cfg = ChaffConfig {
            enabled: true,
            pc: 0.0,
            ..ChaffConfig::default()
        };
        let mut st = ChaffState::default();
        let mut rng = stream_rng(5, Stream::Chaff, 0);
        for c in 0..10_000 {
            st.legit_sent = c % 7 == 0;
            assert_eq!(st.tick(&cfg, c, Some(5), &mut rng), ChaffDecision::default());
        }
    }

    #[test]
    fn splice_index_covers_both_ends() {
        let cfg = ChaffConfig {
            enabled: true,
            pc: 100.0,
            ..ChaffConfig::default()
        };
        let mut rng = stream_rng(9, Stream::Chaff, 0);
        let mut seen = [false; 6];
        for _ in 0..500 {
            let mut st = ChaffState::default();
            seen[st.tick(&cfg, 0, Some(5), &mut rng).splice_at.unwrap()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn splice_then_winnow_restores_packet() {
        let mut keys = KeyFactory::new();
        let t = tunnel(&mut keys);
        let mut ids = IdAllocator::default();
        let original = data(&mut ids, 5);
        let mut chaffed = original.clone();
        splice_chaff(&mut chaffed, 2, &t.endpoint_key(), ni_tag(0), &mut ids);
        assert_eq!(chaffed.n_flits(), 6);
        assert!(chaffed.flits[2].chaff);
        assert_eq!(
            chaffed
                .flits
                .iter()
                .filter(|f| !f.chaff)
                .map(|f| f.id)
                .collect::<Vec<_>>(),
            original.flits.iter().map(|f| f.id).collect::<Vec<_>>()
        );
        assert_eq!(winnow(chaffed, &t.endpoint_key()), Winnowed::Restored(original));
    }

    #[test]
    fn dummy_packet_is_discarded() {
        let mut keys = KeyFactory::new();
        let t = tunnel(&mut keys);
        let mut ids = IdAllocator::default();
        let d = dummy_packet(&t, &mut ids, Coord::new(0, 0), ni_tag(0), 4, 0);
        assert_eq!(d.n_flits(), 4);
        assert_eq!(winnow(d, &t.endpoint_key()), Winnowed::Dummy);
    }

    #[test]
    fn foreign_chaff_passes_through() {
        let mut keys = KeyFactory::new();
        let t = tunnel(&mut keys);
        let other = keys.keygen_sym();
        let mut ids = IdAllocator::default();
        let mut p = data(&mut ids, 5);
        splice_chaff(&mut p, 0, &other, ni_tag(1), &mut ids);
        assert!(matches!(winnow(p.clone(), &t.endpoint_key()), Winnowed::Foreign(q) if q == p));
        let clean = data(&mut ids, 5);
        assert!(matches!(winnow(clean, &t.endpoint_key()), Winnowed::Clean(_)));
    }

    #[test]
    fn degenerate_delay_range() {
        let cfg = DelayConfig {
            enabled: true,
            pd: 100.0,
            range: (3, 3),
        };
        let mut rng = stream_rng(0, Stream::Delay, 0);
        assert!((0..100).all(|_| draw_delay(&cfg, &mut rng) == Some(3)));
        let off = DelayConfig { pd: 0.0, ..cfg };
        assert!((0..100).all(|_| draw_delay(&off, &mut rng).is_none()));
    }

    #[test]
    fn tags_are_distinct() {
        let tags: std::collections::HashSet<u64> = (0..1024).map(ni_tag).collect();
        assert_eq!(tags.len(), 1024);
    }

    #[test]
    fn config_validation() {
        assert!(ChaffConfig {
            pc: 101.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ChaffConfig {
            tc: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DelayConfig {
            range: (0, 5),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DelayConfig::default().validate().is_ok());
    }
}
