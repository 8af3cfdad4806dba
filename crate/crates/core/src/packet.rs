//! Packets and flits.
//!
//! A [`Packet`] is the protocol-level unit. On the wire it travels as a
//! sequence of [`Flit`]s; the first flit on the wire carries the packet
//! header (boxed) and the rest only carry their identity. Ground-truth tags
//! (`is_chaff`, [`GroundTruth`]) exist for auditing and are never consulted
//! by routing or winnowing decisions.

use serde::{Deserialize, Serialize};

use crate::envelope::{Envelope, Part};
use crate::mesh::Coord;

pub type PacketId = u64;
pub type FlitId = u64;

/// Machine words that fit in one flit.
pub const WORDS_PER_FLIT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PacketType {
    /// Tunnel initiation (broadcast).
    Ti,
    /// Tunnel acceptance (endpoint back to source).
    Ta,
    /// Tunnel confirmation (source to endpoint, installs VCIs).
    Tc,
    /// Data transfer.
    Dt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlitKind {
    Head,
    Body,
    Tail,
    Single,
}

impl FlitKind {
    pub fn at(index: usize, len: usize) -> FlitKind {
        match (index, len) {
            (_, 1) => FlitKind::Single,
            (0, _) => FlitKind::Head,
            (i, n) if i + 1 == n => FlitKind::Tail,
            _ => FlitKind::Body,
        }
    }

    pub fn is_head(self) -> bool {
        matches!(self, FlitKind::Head | FlitKind::Single)
    }

    pub fn is_tail(self) -> bool {
        matches!(self, FlitKind::Tail | FlitKind::Single)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DestHeader {
    Plain(Coord),
    Sealed(Envelope),
}

/// Identity of one flit inside its packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlitTag {
    pub id: FlitId,
    /// Simulation-only: this flit is a chaff flit.
    pub chaff: bool,
    /// Cycle the flit left its source NI; `None` before injection.
    pub inject_cycle: Option<u64>,
}

/// Simulation-only oracle data. Never read by protocol logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruth {
    pub origin: Coord,
    pub final_dest: Option<Coord>,
    pub dummy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub id: PacketId,
    pub pkt_type: PacketType,
    /// VCI for packets travelling inside a tunnel.
    pub vci: Option<u64>,
    pub dest: Option<DestHeader>,
    pub chaff_header: Option<Envelope>,
    /// Body: control content for TI/TA/TC, the payload envelope for DT.
    pub parts: Vec<Part>,
    pub flits: Vec<FlitTag>,
    pub creation_cycle: u64,
    pub truth: GroundTruth,
}

impl Packet {
    pub fn n_flits(&self) -> usize {
        self.flits.len()
    }

    /// Protocol-visible parts: header fields plus body, as any router
    /// handling the packet sees them.
    pub fn visible_parts(&self) -> Vec<Part> {
        let mut out = Vec::with_capacity(self.parts.len() + 2);
        match &self.dest {
            Some(DestHeader::Plain(c)) => out.push(Part::Coord(*c)),
            Some(DestHeader::Sealed(e)) => out.push(Part::Sealed(e.clone())),
            None => {}
        }
        if let Some(v) = self.vci {
            out.push(Part::Nonce(v));
        }
        if let Some(ch) = &self.chaff_header {
            out.push(Part::Sealed(ch.clone()));
        }
        out.extend(self.parts.iter().cloned());
        out
    }

    /// Number of flits a control packet with these parts occupies: one
    /// header word plus the body, rounded up to whole flits.
    pub fn control_flits(parts: &[Part]) -> usize {
        let words = 1 + parts.iter().map(Part::words).sum::<usize>();
        words.div_ceil(WORDS_PER_FLIT)
    }

    /// Split into wire flits. The header rides on the first flit.
    pub fn into_flits(self) -> Vec<Flit> {
        let len = self.flits.len();
        assert!(len > 0, "packet {} has no flits", self.id);
        let tags = self.flits.clone();
        let packet_id = self.id;
        let mut header = Some(Box::new(self));
        tags.into_iter()
            .enumerate()
            .map(|(i, tag)| Flit {
                id: tag.id,
                packet_id,
                kind: FlitKind::at(i, len),
                is_chaff: tag.chaff,
                inject_cycle: tag.inject_cycle,
                header: header.take(),
            })
            .collect()
    }

    /// Reassemble a packet from its wire flits, carrying injection cycles
    /// back into the flit tags.
    pub fn from_flits(mut flits: Vec<Flit>) -> Packet {
        let mut packet = *flits
            .first_mut()
            .and_then(|f| f.header.take())
            .expect("first flit carries the header");
        assert_eq!(
            packet.flits.len(),
            flits.len(),
            "flit count mismatch for packet {}",
            packet.id
        );
        for (tag, flit) in packet.flits.iter_mut().zip(&flits) {
            debug_assert_eq!(tag.id, flit.id);
            tag.inject_cycle = flit.inject_cycle;
        }
        packet
    }
}

/// Flow-control unit on a link.
#[derive(Debug, Clone)]
pub struct Flit {
    pub id: FlitId,
    pub packet_id: PacketId,
    pub kind: FlitKind,
    pub is_chaff: bool,
    pub inject_cycle: Option<u64>,
    pub header: Option<Box<Packet>>,
}

impl Flit {
    pub fn packet(&self) -> Option<&Packet> {
        self.header.as_deref()
    }

    pub fn packet_mut(&mut self) -> Option<&mut Packet> {
        self.header.as_deref_mut()
    }
}

/// Allocates packet and flit ids.
#[derive(Debug, Default, Clone)]
pub struct IdAllocator {
    next_packet: PacketId,
    next_flit: FlitId,
}

impl IdAllocator {
    pub fn packet(&mut self) -> PacketId {
        self.next_packet += 1;
        self.next_packet
    }

    pub fn flits(&mut self, n: usize) -> Vec<FlitTag> {
        (0..n)
            .map(|_| {
                self.next_flit += 1;
                FlitTag {
                    id: self.next_flit,
                    chaff: false,
                    inject_cycle: None,
                }
            })
            .collect()
    }

    pub fn flit(&mut self) -> FlitTag {
        self.flits(1).pop().unwrap()
    }
}
