//! Tunnel-event log and optional flit-level trace, with CSV writers.

use std::fmt;
use std::io::{self, Write};

use crate::mesh::Coord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TunnelEventKind {
    TiSent,
    TaSent,
    TcSent,
    TunnelReady,
    Rotated,
}

impl fmt::Display for TunnelEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TunnelEventKind::TiSent => "TI_SENT",
            TunnelEventKind::TaSent => "TA_SENT",
            TunnelEventKind::TcSent => "TC_SENT",
            TunnelEventKind::TunnelReady => "TUNNEL_READY",
            TunnelEventKind::Rotated => "ROTATED",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TunnelEvent {
    pub cycle: u64,
    pub kind: TunnelEventKind,
    pub src: Coord,
    pub endpoint: Coord,
    pub hops: u32,
}

fn coord_field(c: Coord) -> String {
    format!("{}:{}", c.x, c.y)
}

pub fn write_tunnel_log<W: Write + ?Sized>(w: &mut W, events: &[TunnelEvent]) -> io::Result<()> {
    writeln!(w, "cycle,event,src,endpoint,hops")?;
    for e in events {
        writeln!(
            w,
            "{},{},{},{},{}",
            e.cycle,
            e.kind,
            coord_field(e.src),
            coord_field(e.endpoint),
            e.hops
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlitEvent {
    /// NI placed the flit on its outbound link.
    Inject,
    /// Router sent the flit on an output link.
    Send,
    /// NI received the flit.
    Eject,
}

impl fmt::Display for FlitEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlitEvent::Inject => "inject",
            FlitEvent::Send => "send",
            FlitEvent::Eject => "eject",
        })
    }
}

/// `link_id` is `node * 5 + port` of the sending side; inject and eject
/// use the node's local port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    pub cycle: u64,
    pub link_id: u32,
    pub flit_id: u64,
    pub event: FlitEvent,
}

pub fn write_trace<W: Write + ?Sized>(w: &mut W, records: &[TraceRecord]) -> io::Result<()> {
    for r in records {
        writeln!(w, "{},{},{},{}", r.cycle, r.link_id, r.flit_id, r.event)?;
    }
    Ok(())
}
