//! Cycle-level mesh network-on-chip simulator with outbound-tunnel
//! anonymous routing, chaff/delay obfuscation, boundary-link probes for
//! flow-correlation experiments and a Pearson baseline attacker.

pub mod correlator;
pub mod dataset;
pub mod envelope;
pub mod error;
pub mod experiment;
pub mod mesh;
pub mod obfuscation;
pub mod packet;
pub mod probe;
pub mod rng;
pub mod sim;
pub mod traffic;
pub mod tunnel;

pub use error::{Error, Result};
pub use mesh::{Coord, Mesh, Port};
pub use sim::{RunConfig, SimConfig, Simulation};
