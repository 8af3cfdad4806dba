//! Input-queued wormhole router with credit-based flow control.
//!
//! Each of the five input ports has a FIFO of `buffer_depth` flits. A head
//! flit's route is computed by the simulator (it needs protocol state);
//! the router then either switches the packet to an output, absorbs it into
//! the local protocol engine, or drops it. An output stays owned by one
//! packet from head to tail. The engine has its own per-output queues,
//! which win over pass-through traffic whenever they are non-empty, so a
//! control packet re-emitted here always precedes data that arrived behind
//! it.

use std::collections::VecDeque;

use crate::mesh::Port;
use crate::packet::{Flit, Packet};

#[derive(Debug, Clone)]
pub struct BufFlit {
    pub flit: Flit,
    pub arrived: u64,
    pub ready: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Out(Port),
    Absorb,
    Drop,
}

#[derive(Debug, Clone, Default)]
pub struct InputPort {
    pub buf: VecDeque<BufFlit>,
    pub route: Option<Route>,
    /// The packet being switched has left its tunnel (plaintext destination).
    pub plain: bool,
}

impl InputPort {
    /// Head flit waiting for route computation.
    pub fn needs_route(&self, cycle: u64) -> bool {
        self.route.is_none() && self.buf.front().is_some_and(|b| b.ready <= cycle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Owner {
    Input(usize),
    Engine,
}

#[derive(Debug, Clone)]
struct OutputPort {
    owner: Option<Owner>,
    credits: usize,
    rr: usize,
}

#[derive(Debug, Clone)]
pub struct Pending {
    pub ready: u64,
    pub packet: Packet,
}

#[derive(Debug, Clone)]
pub struct RouterCore {
    pub inputs: [InputPort; 5],
    outputs: [OutputPort; 5],
    /// Engine packets waiting for each output.
    pub engine_fifo: [VecDeque<Pending>; 5],
    engine_sending: [VecDeque<Flit>; 5],
    /// Flits of absorbed packets, per arrival port.
    assembling: [Vec<Flit>; 5],
    /// Delayed packets: (release cycle, sequence, output, packet).
    pen: Vec<(u64, u64, Port, Packet)>,
    pen_seq: u64,
}

/// Everything one router did in a cycle.
#[derive(Debug, Default)]
pub struct TickOutput {
    /// Flits placed on output links, with the plain flag of their packet.
    pub sent: Vec<(Port, Flit, bool)>,
    /// Input ports that freed a slot (one credit each to upstream).
    pub freed: Vec<Port>,
    /// Absorbed packets completed this cycle, with their arrival port.
    pub absorbed: Vec<(Port, Packet)>,
    pub dropped_flits: u64,
}

impl RouterCore {
    /// `credits[p]` is the downstream buffer capacity behind output `p`.
    pub fn new(credits: [usize; 5]) -> Self {
        RouterCore {
            inputs: Default::default(),
            outputs: credits.map(|c| OutputPort {
                owner: None,
                credits: c,
                rr: 0,
            }),
            engine_fifo: Default::default(),
            engine_sending: Default::default(),
            assembling: Default::default(),
            pen: Vec::new(),
            pen_seq: 0,
        }
    }

    pub fn push_input(&mut self, port: Port, flit: Flit, arrived: u64, ready: u64) {
        self.inputs[port.index()]
            .buf
            .push_back(BufFlit { flit, arrived, ready });
    }

    pub fn return_credit(&mut self, port: Port) {
        let out = &mut self.outputs[port.index()];
        out.credits = out.credits.saturating_add(1);
    }

    pub fn credits(&self, port: Port) -> usize {
        self.outputs[port.index()].credits
    }

    pub fn emit(&mut self, port: Port, packet: Packet, ready: u64) {
        self.engine_fifo[port.index()].push_back(Pending { ready, packet });
    }

    pub fn emit_delayed(&mut self, port: Port, packet: Packet, release: u64) {
        self.pen_seq += 1;
        self.pen.push((release, self.pen_seq, port, packet));
    }

    /// Move delayed packets whose release cycle has come into the engine queues.
    pub fn release_pen(&mut self, cycle: u64) {
        if self.pen.is_empty() {
            return;
        }
        let mut due: Vec<(u64, u64, Port, Packet)> = Vec::new();
        let mut i = 0;
        while i < self.pen.len() {
            if self.pen[i].0 <= cycle {
                due.push(self.pen.swap_remove(i));
            } else {
                i += 1;
            }
        }
        due.sort_by_key(|&(release, seq, _, _)| (release, seq));
        for (release, _, port, packet) in due {
            self.emit(port, packet, release);
        }
    }

    pub fn pen_len(&self) -> usize {
        self.pen.len()
    }

    /// Oldest waiting item in any input buffer or engine queue, as
    /// (cycle it started waiting, description).
    pub fn oldest_wait(&self) -> Option<(u64, String)> {
        let inputs = self.inputs.iter().enumerate().filter_map(|(i, ip)| {
            ip.buf
                .front()
                .map(|b| (b.arrived, format!("input {} flit {}", Port::from_index(i), b.flit.id)))
        });
        let engine = self.engine_fifo.iter().enumerate().filter_map(|(i, q)| {
            q.front().map(|p| {
                (
                    p.ready,
                    format!("engine queue {} packet {}", Port::from_index(i), p.packet.id),
                )
            })
        });
        inputs.chain(engine).min_by_key(|(c, _)| *c)
    }

    pub fn is_idle(&self) -> bool {
        self.inputs.iter().all(|i| i.buf.is_empty())
            && self.engine_fifo.iter().all(VecDeque::is_empty)
            && self.engine_sending.iter().all(VecDeque::is_empty)
            && self.assembling.iter().all(Vec::is_empty)
            && self.pen.is_empty()
    }

    /// Absorb/drop pops, then switch allocation and traversal. Routes for
    /// ready head flits must already be set.
    pub fn tick(&mut self, cycle: u64) -> TickOutput {
        let mut out = TickOutput::default();

        for i in 0..5 {
            let input = &mut self.inputs[i];
            let (Some(route @ (Route::Absorb | Route::Drop)), Some(front)) = (input.route, input.buf.front()) else {
                continue;
            };
            if front.ready > cycle {
                continue;
            }
            let flit = input.buf.pop_front().expect("front checked").flit;
            out.freed.push(Port::from_index(i));
            let tail = flit.kind.is_tail();
            if route == Route::Absorb {
                self.assembling[i].push(flit);
                if tail {
                    let flits = std::mem::take(&mut self.assembling[i]);
                    out.absorbed.push((Port::from_index(i), Packet::from_flits(flits)));
                }
            } else {
                out.dropped_flits += 1;
            }
            if tail {
                input.route = None;
            }
        }

        for o in 0..5 {
            if self.outputs[o].owner.is_none() {
                self.allocate(o, cycle);
            }
            let Some(owner) = self.outputs[o].owner else { continue };
            if self.outputs[o].credits == 0 {
                continue;
            }
            let (flit, plain) = match owner {
                Owner::Engine => {
                    let flit = self.engine_sending[o].pop_front().expect("engine owner has flits");
                    // engine emissions leave with the header they were built with
                    let plain = flit.packet().is_some_and(|p| p.vci.is_none());
                    (flit, plain)
                }
                Owner::Input(i) => {
                    let input = &mut self.inputs[i];
                    match input.buf.front() {
                        Some(b) if b.ready <= cycle => {}
                        _ => continue,
                    }
                    let flit = input.buf.pop_front().expect("front checked").flit;
                    out.freed.push(Port::from_index(i));
                    (flit, input.plain)
                }
            };
            let tail = flit.kind.is_tail();
            self.outputs[o].credits -= 1;
            if tail {
                self.outputs[o].owner = None;
                if let Owner::Input(i) = owner {
                    self.inputs[i].route = None;
                    self.inputs[i].plain = false;
                }
            }
            out.sent.push((Port::from_index(o), flit, plain));
        }
        out
    }

    fn allocate(&mut self, o: usize, cycle: u64) {
        if let Some(front) = self.engine_fifo[o].front() {
            if front.ready <= cycle {
                let p = self.engine_fifo[o].pop_front().expect("front checked").packet;
                self.engine_sending[o] = p.into_flits().into();
                self.outputs[o].owner = Some(Owner::Engine);
            }
            // a queued engine packet blocks pass-through until it has gone
            return;
        }
        let start = self.outputs[o].rr;
        for k in 0..5 {
            let i = (start + k) % 5;
            let input = &self.inputs[i];
            if input.route != Some(Route::Out(Port::from_index(o))) {
                continue;
            }
            match input.buf.front() {
                Some(b) if b.ready <= cycle && b.flit.kind.is_head() => {
                    self.outputs[o].owner = Some(Owner::Input(i));
                    self.outputs[o].rr = (i + 1) % 5;
                    return;
                }
                _ => {}
            }
        }
    }
}
