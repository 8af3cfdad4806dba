//! 2D mesh topology: tile coordinates, router ports and dimension-ordered
//! (XY) routing, including the XY-shaped broadcast used for tunnel
//! initiation.
//!
//! `y` grows towards [`Port::North`]; row `y = 0` is the southern edge.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Tile position in the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u16; 2]", into = "[u16; 2]")]
pub struct Coord {
    pub x: u16,
    pub y: u16,
}

impl Coord {
    pub const fn new(x: u16, y: u16) -> Self {
        Coord { x, y }
    }

    pub fn manhattan(self, other: Coord) -> u32 {
        u32::from(self.x.abs_diff(other.x)) + u32::from(self.y.abs_diff(other.y))
    }
}

impl From<[u16; 2]> for Coord {
    fn from(v: [u16; 2]) -> Self {
        Coord::new(v[0], v[1])
    }
}

impl From<Coord> for [u16; 2] {
    fn from(c: Coord) -> Self {
        [c.x, c.y]
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Router port. The four compass ports connect to neighbouring routers,
/// `Local` connects to the tile's network interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Port {
    North,
    East,
    South,
    West,
    Local,
}

impl Port {
    pub const COMPASS: [Port; 4] = [Port::North, Port::East, Port::South, Port::West];
    pub const ALL: [Port; 5] = [Port::North, Port::East, Port::South, Port::West, Port::Local];

    pub const fn index(self) -> usize {
        match self {
            Port::North => 0,
            Port::East => 1,
            Port::South => 2,
            Port::West => 3,
            Port::Local => 4,
        }
    }

    pub const fn from_index(i: usize) -> Port {
        Port::ALL[i]
    }

    /// The port on the neighbouring router that faces this one.
    pub const fn opposite(self) -> Port {
        match self {
            Port::North => Port::South,
            Port::South => Port::North,
            Port::East => Port::West,
            Port::West => Port::East,
            Port::Local => Port::Local,
        }
    }

    pub const fn is_x(self) -> bool {
        matches!(self, Port::East | Port::West)
    }

    pub const fn is_y(self) -> bool {
        matches!(self, Port::North | Port::South)
    }
}

impl fmt::Display for Port {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Port::North => "N",
            Port::East => "E",
            Port::South => "S",
            Port::West => "W",
            Port::Local => "L",
        };
        f.write_str(s)
    }
}

/// Mesh dimensions. Serialized as `"WxH"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Mesh {
    pub width: u16,
    pub height: u16,
}

impl Mesh {
    pub const fn new(width: u16, height: u16) -> Self {
        Mesh { width, height }
    }

    pub fn nodes(&self) -> usize {
        usize::from(self.width) * usize::from(self.height)
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.x < self.width && c.y < self.height
    }

    pub fn node_id(&self, c: Coord) -> usize {
        debug_assert!(self.contains(c), "{c} outside {self}");
        usize::from(c.y) * usize::from(self.width) + usize::from(c.x)
    }

    pub fn coord(&self, id: usize) -> Coord {
        let w = usize::from(self.width);
        Coord::new((id % w) as u16, (id / w) as u16)
    }

    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.nodes()).map(move |i| self.coord(i))
    }

    /// Longest minimal path in the mesh.
    pub fn diameter(&self) -> u32 {
        u32::from(self.width.saturating_sub(1)) + u32::from(self.height.saturating_sub(1))
    }

    pub fn neighbor(&self, c: Coord, port: Port) -> Option<Coord> {
        let n = match port {
            Port::North if c.y + 1 < self.height => Coord::new(c.x, c.y + 1),
            Port::South if c.y > 0 => Coord::new(c.x, c.y - 1),
            Port::East if c.x + 1 < self.width => Coord::new(c.x + 1, c.y),
            Port::West if c.x > 0 => Coord::new(c.x - 1, c.y),
            _ => return None,
        };
        Some(n)
    }

    /// Port on `a` leading to the adjacent tile `b`.
    pub fn port_towards(&self, a: Coord, b: Coord) -> Option<Port> {
        Port::COMPASS.into_iter().find(|&p| self.neighbor(a, p) == Some(b))
    }
}

impl fmt::Display for Mesh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl std::str::FromStr for Mesh {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("mesh must look like WxH, got {s:?}"))?;
        let w: u16 = w.trim().parse().map_err(|e| format!("mesh width: {e}"))?;
        let h: u16 = h.trim().parse().map_err(|e| format!("mesh height: {e}"))?;
        if w == 0 || h == 0 {
            return Err(format!("mesh dimensions must be positive, got {s:?}"));
        }
        Ok(Mesh::new(w, h))
    }
}

impl TryFrom<String> for Mesh {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Mesh> for String {
    fn from(m: Mesh) -> Self {
        m.to_string()
    }
}

/// Dimension-ordered routing: all X hops first, then Y.
pub fn xy_next_hop(cur: Coord, dest: Coord) -> Port {
    use std::cmp::Ordering::*;
    match (dest.x.cmp(&cur.x), dest.y.cmp(&cur.y)) {
        (Greater, _) => Port::East,
        (Less, _) => Port::West,
        (Equal, Greater) => Port::North,
        (Equal, Less) => Port::South,
        (Equal, Equal) => Port::Local,
    }
}

/// Full XY path from `src` to `dst`, both ends included.
pub fn xy_path(src: Coord, dst: Coord) -> Vec<Coord> {
    let mut path = vec![src];
    let mut cur = src;
    while cur != dst {
        cur = match xy_next_hop(cur, dst) {
            Port::East => Coord::new(cur.x + 1, cur.y),
            Port::West => Coord::new(cur.x - 1, cur.y),
            Port::North => Coord::new(cur.x, cur.y + 1),
            Port::South => Coord::new(cur.x, cur.y - 1),
            Port::Local => unreachable!(),
        };
        path.push(cur);
    }
    path
}

/// Output ports for forwarding a broadcast copy that arrived on `arrival`
/// (`Port::Local` for the originating router).
///
/// The originator sends on every existing compass port. A copy moving
/// along X keeps its X direction and also spawns copies north and south;
/// a copy moving along Y only continues in its Y direction. Every router
/// therefore sees exactly one copy, delivered along its XY path from the
/// originator, and no copy ever turns from Y back into X.
pub fn xy_broadcast_ports(mesh: &Mesh, cur: Coord, arrival: Port) -> Vec<Port> {
    let candidates: &[Port] = match arrival {
        Port::Local => &Port::COMPASS,
        // arrived from the west, travelling east
        Port::West => &[Port::East, Port::North, Port::South],
        Port::East => &[Port::West, Port::North, Port::South],
        // arrived from the south, travelling north
        Port::South => &[Port::North],
        Port::North => &[Port::South],
    };
    candidates
        .iter()
        .copied()
        .filter(|&p| mesh.neighbor(cur, p).is_some())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xy_next_hop_examples() {
        assert_eq!(xy_next_hop(Coord::new(0, 0), Coord::new(2, 1)), Port::East);
        assert_eq!(xy_next_hop(Coord::new(2, 1), Coord::new(2, 1)), Port::Local);
        assert_eq!(xy_next_hop(Coord::new(3, 2), Coord::new(3, 0)), Port::South);
        assert_eq!(xy_next_hop(Coord::new(3, 2), Coord::new(1, 5)), Port::West);
    }

    #[test]
    fn broadcast_from_west_at_south_edge() {
        let mesh = Mesh::new(4, 4);
        // (2,0) has no southern neighbour; the copy continues east and spawns north.
        let ports = xy_broadcast_ports(&mesh, Coord::new(2, 0), Port::West);
        assert_eq!(ports, vec![Port::East, Port::North]);
    }

    #[test]
    fn broadcast_degenerate_mesh() {
        let mesh = Mesh::new(1, 1);
        assert!(xy_broadcast_ports(&mesh, Coord::new(0, 0), Port::Local).is_empty());
    }

    #[test]
    fn mesh_parse() {
        assert_eq!("8x8".parse::<Mesh>().unwrap(), Mesh::new(8, 8));
        assert!("0x4".parse::<Mesh>().is_err());
        assert!("44".parse::<Mesh>().is_err());
    }

    #[test]
    fn node_ids_round_trip() {
        let mesh = Mesh::new(5, 3);
        for id in 0..mesh.nodes() {
            assert_eq!(mesh.node_id(mesh.coord(id)), id);
        }
    }

    #[test]
    fn xy_path_is_x_then_y() {
        let p = xy_path(Coord::new(0, 3), Coord::new(2, 1));
        assert_eq!(
            p,
            vec![
                Coord::new(0, 3),
                Coord::new(1, 3),
                Coord::new(2, 3),
                Coord::new(2, 2),
                Coord::new(2, 1)
            ]
        );
    }
}
