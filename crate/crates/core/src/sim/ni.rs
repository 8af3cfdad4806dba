//! Network interface: packet queue, flit injection and reassembly.

use std::collections::VecDeque;

use crate::mesh::Coord;
use crate::obfuscation::ChaffState;
use crate::packet::Flit;
use crate::rng::SimRng;

/// Work waiting at the NI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outgoing {
    Data {
        dest: Coord,
        created: u64,
        /// Chaff flit position chosen when the packet arrived.
        splice: Option<usize>,
        seq: u64,
        flits: usize,
    },
    Dummy {
        flits: usize,
    },
}

#[derive(Debug)]
pub struct Ni {
    pub queue: VecDeque<Outgoing>,
    /// Flits of the packet being injected.
    pub flits: VecDeque<Flit>,
    pub sending_legit: bool,
    /// Free slots in the router's local input buffer.
    pub credits: usize,
    pub chaff: ChaffState,
    pub traffic_rng: SimRng,
    pub chaff_rng: SimRng,
    /// Flits arriving on the ejection link, with arrival cycle.
    pub eject: VecDeque<(u64, Flit)>,
    pub assembling: Vec<Flit>,
}

impl Ni {
    pub fn new(credits: usize, traffic_rng: SimRng, chaff_rng: SimRng) -> Self {
        Ni {
            queue: VecDeque::new(),
            flits: VecDeque::new(),
            sending_legit: false,
            credits,
            chaff: ChaffState::default(),
            traffic_rng,
            chaff_rng,
            eject: VecDeque::new(),
            assembling: Vec::new(),
        }
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.flits.is_empty() && self.eject.is_empty() && self.assembling.is_empty()
    }
}
