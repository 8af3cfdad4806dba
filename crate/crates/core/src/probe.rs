//! Boundary-link probes.
//!
//! A probe on an NI's outbound link (NI to router) sees every flit the NI
//! emits, chaff included. A probe on the inbound link (router to NI) sees
//! what survives to the destination. Probes only record cycles; they never
//! touch the flits.

use serde::{Deserialize, Serialize};

use crate::mesh::Coord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Cycle from which all probes record. `None` uses the simulation warm-up.
    pub activation: Option<u64>,
    /// IFD array length.
    pub l: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            activation: None,
            l: 250,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Outbound,
    Inbound,
}

/// Flit cycles seen on every boundary link since activation.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    activation: u64,
    /// Stop recording a stream once it holds this many flit cycles.
    cap: usize,
    out: Vec<Vec<u64>>,
    inn: Vec<Vec<u64>>,
    out_packets: Vec<u64>,
    in_packets: Vec<u64>,
}

impl ProbeSet {
    pub fn new(nodes: usize, activation: u64, cap: usize) -> Self {
        ProbeSet {
            activation,
            cap,
            out: vec![Vec::new(); nodes],
            inn: vec![Vec::new(); nodes],
            out_packets: vec![0; nodes],
            in_packets: vec![0; nodes],
        }
    }

    pub fn activation(&self) -> u64 {
        self.activation
    }

    pub fn record(&mut self, dir: Direction, node: usize, cycle: u64, head: bool) {
        if cycle < self.activation {
            return;
        }
        let (stream, packets) = match dir {
            Direction::Outbound => (&mut self.out[node], &mut self.out_packets[node]),
            Direction::Inbound => (&mut self.inn[node], &mut self.in_packets[node]),
        };
        if head {
            *packets += 1;
        }
        if stream.len() < self.cap {
            debug_assert!(stream.last().is_none_or(|&c| c <= cycle));
            stream.push(cycle);
        }
    }

    pub fn cycles(&self, dir: Direction, node: usize) -> &[u64] {
        match dir {
            Direction::Outbound => &self.out[node],
            Direction::Inbound => &self.inn[node],
        }
    }

    pub fn packet_count(&self, dir: Direction, node: usize) -> u64 {
        match dir {
            Direction::Outbound => self.out_packets[node],
            Direction::Inbound => self.in_packets[node],
        }
    }

    /// Every stream has reached its cap.
    pub fn full(&self) -> bool {
        self.out.iter().chain(&self.inn).all(|s| s.len() >= self.cap)
    }

    pub fn ifd(&self, dir: Direction, node: usize, l: usize) -> IfdArray {
        IfdArray::from_cycles(self.cycles(dir, node), l)
    }
}

/// Inter-flit delays, zero-padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IfdArray {
    pub values: Vec<u64>,
    pub valid_len: usize,
}

impl IfdArray {
    /// Successive differences of flit cycles, first flit as epoch,
    /// truncated or zero-padded to `l`.
    pub fn from_cycles(cycles: &[u64], l: usize) -> Self {
        let mut values: Vec<u64> = cycles.windows(2).map(|w| w[1] - w[0]).take(l).collect();
        let valid_len = values.len();
        values.resize(l, 0);
        IfdArray { values, valid_len }
    }

    pub fn valid(&self) -> &[u64] {
        &self.values[..self.valid_len]
    }

    /// Flit offsets from the epoch (prefix sums of the valid delays).
    pub fn offsets(&self) -> Vec<u64> {
        std::iter::once(0)
            .chain(self.valid().iter().scan(0u64, |acc, &d| {
                *acc += d;
                Some(*acc)
            }))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuspicionConfig {
    pub period: u64,
    pub threshold: f64,
}

impl Default for SuspicionConfig {
    fn default() -> Self {
        SuspicionConfig {
            period: 10_000,
            threshold: 0.05,
        }
    }
}

/// Relative count mismatch used by the collector.
pub fn count_mismatch(out: u64, inn: u64) -> f64 {
    out.abs_diff(inn) as f64 / out.max(inn).max(1) as f64
}

/// Pairs whose outbound count at `s` and inbound count at `d` are within
/// the threshold. Pairs with no traffic at all are never flagged.
pub fn suspicion_scan(counts: &[(Coord, u64, u64)], cfg: &SuspicionConfig) -> Vec<(Coord, Coord)> {
    let mut flagged = Vec::new();
    for &(s, out, _) in counts {
        for &(d, _, inn) in counts {
            if s == d || (out == 0 && inn == 0) {
                continue;
            }
            if count_mismatch(out, inn) <= cfg.threshold {
                flagged.push((s, d));
            }
        }
    }
    flagged
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ifd_hand_trace() {
        let a = IfdArray::from_cycles(&[10, 25, 31], 4);
        assert_eq!(a.values, vec![15, 6, 0, 0]);
        assert_eq!(a.valid_len, 2);
        assert_eq!(a.offsets(), vec![0, 15, 21]);
        assert_eq!(IfdArray::from_cycles(&[7], 3).valid_len, 0);
        assert_eq!(IfdArray::from_cycles(&[7, 8], 1).values, vec![1]);
    }

    #[test]
    fn truncates_to_l() {
        let cycles: Vec<u64> = (0..100).map(|i| i * 3).collect();
        let a = IfdArray::from_cycles(&cycles, 10);
        assert_eq!(a.values, vec![3; 10]);
        assert_eq!(a.valid_len, 10);
    }

    #[test]
    fn mismatch_examples() {
        assert!(count_mismatch(100, 98) <= 0.05);
        assert!(count_mismatch(100, 60) > 0.05);
        assert_eq!(count_mismatch(0, 0), 0.0);
    }

    #[test]
    fn scan_flags_close_counts_only() {
        let a = Coord::new(0, 0);
        let b = Coord::new(1, 0);
        let c = Coord::new(2, 0);
        let cfg = SuspicionConfig::default();
        let flagged = suspicion_scan(&[(a, 100, 0), (b, 0, 98), (c, 0, 60)], &cfg);
        assert_eq!(flagged, vec![(a, b)]);
        assert!(suspicion_scan(&[(a, 0, 0), (b, 0, 0)], &cfg).is_empty());
    }

    #[test]
    fn probes_ignore_pre_activation_and_cap() {
        let mut p = ProbeSet::new(1, 5, 3);
        for c in 0..10 {
            p.record(Direction::Outbound, 0, c, c % 2 == 0);
        }
        assert_eq!(p.cycles(Direction::Outbound, 0), &[5, 6, 7]);
        assert_eq!(p.packet_count(Direction::Outbound, 0), 2);
    }
}
