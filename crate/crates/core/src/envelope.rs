//! Functional model of the public-key and symmetric encryption used by the
//! tunnel protocol.
//!
//! No bytes are ever enciphered. An [`Envelope`] simply records which key is
//! needed to open it, and [`Envelope::open`] succeeds iff the caller holds
//! that key. Nesting is preserved exactly, so wrong-key paths are
//! deterministic and the layered handshake can be checked structurally.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::mesh::Coord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyKind {
    AsymPublic,
    AsymPrivate,
    Symmetric,
}

/// Opaque key handle. An asymmetric pair shares `pair_id`; a symmetric key
/// is its own pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyHandle {
    key_id: u64,
    kind: KeyKind,
    pair_id: u64,
}

impl KeyHandle {
    pub fn key_id(&self) -> u64 {
        self.key_id
    }

    pub fn kind(&self) -> KeyKind {
        self.kind
    }

    pub fn pair_id(&self) -> u64 {
        self.pair_id
    }

    /// The kind of key that opens envelopes sealed with this one.
    fn opener_kind(&self) -> Option<KeyKind> {
        match self.kind {
            KeyKind::AsymPublic => Some(KeyKind::AsymPrivate),
            KeyKind::Symmetric => Some(KeyKind::Symmetric),
            KeyKind::AsymPrivate => None,
        }
    }
}

/// Asymmetric key pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyPair {
    pub public: KeyHandle,
    pub private: KeyHandle,
}

/// Hands out fresh key handles. Ids come from counters, so a given call
/// sequence always yields the same handles.
#[derive(Debug, Default, Clone)]
pub struct KeyFactory {
    next_key: u64,
    next_pair: u64,
}

impl KeyFactory {
    pub fn new() -> Self {
        Self::default()
    }

    fn fresh(&mut self, kind: KeyKind, pair_id: u64) -> KeyHandle {
        self.next_key += 1;
        KeyHandle {
            key_id: self.next_key,
            kind,
            pair_id,
        }
    }

    pub fn keygen_asym(&mut self) -> KeyPair {
        self.next_pair += 1;
        let pair = self.next_pair;
        KeyPair {
            public: self.fresh(KeyKind::AsymPublic, pair),
            private: self.fresh(KeyKind::AsymPrivate, pair),
        }
    }

    pub fn keygen_sym(&mut self) -> KeyHandle {
        self.next_pair += 1;
        let pair = self.next_pair;
        self.fresh(KeyKind::Symmetric, pair)
    }
}

/// A random nonce used as a virtual-circuit identifier, or as the source's
/// authenticity value `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce {
    pub value: u64,
    pub owner: Coord,
}

/// Draws nonces that are unique within a run. A colliding draw is simply
/// redrawn. `space` bounds the value range (`None` = full `u64`), which is
/// only useful for exercising the collision path.
#[derive(Debug, Clone)]
pub struct NonceSource {
    used: HashSet<u64>,
    space: Option<u64>,
    collisions: u64,
}

impl Default for NonceSource {
    fn default() -> Self {
        Self::new()
    }
}

impl NonceSource {
    pub fn new() -> Self {
        NonceSource {
            used: HashSet::new(),
            space: None,
            collisions: 0,
        }
    }

    pub fn with_space(space: u64) -> Self {
        assert!(space > 0);
        NonceSource {
            space: Some(space),
            ..Self::new()
        }
    }

    pub fn gen_nonce<R: Rng + ?Sized>(&mut self, owner: Coord, rng: &mut R) -> Nonce {
        if let Some(space) = self.space {
            assert!(
                (self.used.len() as u64) < space,
                "nonce space of {space} values exhausted"
            );
        }
        loop {
            let value = match self.space {
                Some(space) => rng.random_range(0..space),
                None => rng.random(),
            };
            if self.used.insert(value) {
                return Nonce { value, owner };
            }
            self.collisions += 1;
        }
    }

    pub fn collisions(&self) -> u64 {
        self.collisions
    }

    pub fn issued(&self) -> usize {
        self.used.len()
    }
}

/// One element of a packet body or envelope body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    /// A plain machine word (the random value `r`, a chaff tag, a position).
    Word(u64),
    /// A nonce value used as a VCI.
    Nonce(u64),
    Key(KeyHandle),
    Coord(Coord),
    Bytes(Vec<u8>),
    Sealed(Envelope),
}

impl Part {
    /// Size in machine words, as it would occupy flit payload.
    pub fn words(&self) -> usize {
        match self {
            Part::Word(_) | Part::Nonce(_) | Part::Key(_) | Part::Coord(_) => 1,
            Part::Bytes(b) => b.len().div_ceil(8).max(1),
            Part::Sealed(e) => e.words(),
        }
    }

    pub fn as_word(&self) -> Option<u64> {
        match self {
            Part::Word(w) => Some(*w),
            _ => None,
        }
    }

    pub fn as_nonce(&self) -> Option<u64> {
        match self {
            Part::Nonce(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_key(&self) -> Option<KeyHandle> {
        match self {
            Part::Key(k) => Some(*k),
            _ => None,
        }
    }

    pub fn as_coord(&self) -> Option<Coord> {
        match self {
            Part::Coord(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_sealed(&self) -> Option<&Envelope> {
        match self {
            Part::Sealed(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("cannot seal with a private key")]
    SealWithPrivate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("decryption failed: key {offered_pair}/{offered_kind:?} does not open envelope for pair {required_pair}")]
pub struct DecryptFailure {
    pub required_pair: u64,
    pub offered_pair: u64,
    pub offered_kind: KeyKind,
}

/// Encrypted container. The only attribute visible without the key is the
/// pair id of the key that opens it.
#[derive(Clone, PartialEq, Eq)]
pub struct Envelope {
    pair_id: u64,
    opener: KeyKind,
    body: Vec<Part>,
}

impl fmt::Debug for Envelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Envelope(pair {})", self.pair_id)
    }
}

impl Envelope {
    pub fn seal(key: &KeyHandle, parts: Vec<Part>) -> Result<Envelope, EnvelopeError> {
        let opener = key.opener_kind().ok_or(EnvelopeError::SealWithPrivate)?;
        Ok(Envelope {
            pair_id: key.pair_id,
            opener,
            body: parts,
        })
    }

    pub fn open(&self, key: &KeyHandle) -> Result<&[Part], DecryptFailure> {
        if key.pair_id == self.pair_id && key.kind == self.opener {
            Ok(&self.body)
        } else {
            Err(DecryptFailure {
                required_pair: self.pair_id,
                offered_pair: key.pair_id,
                offered_kind: key.kind,
            })
        }
    }

    pub fn required_pair_id(&self) -> u64 {
        self.pair_id
    }

    /// Ciphertext size in words (one word of overhead per layer).
    pub fn words(&self) -> usize {
        1 + self.body.iter().map(Part::words).sum::<usize>()
    }
}

/// Seal `parts` under `key`.
pub fn enc(key: &KeyHandle, parts: Vec<Part>) -> Result<Envelope, EnvelopeError> {
    Envelope::seal(key, parts)
}

/// Open `env` with `key`.
pub fn dec<'a>(key: &KeyHandle, env: &'a Envelope) -> Result<&'a [Part], DecryptFailure> {
    env.open(key)
}

/// A set of keys held by one party, indexed for opening envelopes.
#[derive(Debug, Default, Clone)]
pub struct KeyChain {
    by_pair: BTreeMap<(u64, KeyKind), KeyHandle>,
}

impl KeyChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: KeyHandle) {
        self.by_pair.insert((key.pair_id, key.kind), key);
    }

    pub fn opener_for(&self, env: &Envelope) -> Option<&KeyHandle> {
        self.by_pair.get(&(env.pair_id, env.opener))
    }

    /// Every tile coordinate readable from `parts` by a holder of this key
    /// chain, descending into every envelope it can open.
    pub fn readable_coords(&self, parts: &[Part]) -> BTreeSet<Coord> {
        let mut out = BTreeSet::new();
        self.collect_coords(parts, &mut out);
        out
    }

    fn collect_coords(&self, parts: &[Part], out: &mut BTreeSet<Coord>) {
        for part in parts {
            match part {
                Part::Coord(c) => {
                    out.insert(*c);
                }
                Part::Sealed(env) => {
                    if let Some(key) = self.opener_for(env) {
                        if let Ok(inner) = env.open(key) {
                            self.collect_coords(inner, out);
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use proptest::prelude::*;

    #[test]
    fn round_trip_asymmetric() {
        let mut kf = KeyFactory::new();
        let kp = kf.keygen_asym();
        let env = enc(&kp.public, vec![Part::Word(42)]).unwrap();
        assert_eq!(dec(&kp.private, &env).unwrap(), &[Part::Word(42)]);
    }

    #[test]
    fn wrong_private_key_fails() {
        let mut kf = KeyFactory::new();
        let a = kf.keygen_asym();
        let b = kf.keygen_asym();
        let env = enc(&a.public, vec![Part::Word(1)]).unwrap();
        assert!(dec(&b.private, &env).is_err());
        // the public half never opens its own envelope
        assert!(dec(&a.public, &env).is_err());
    }

    #[test]
    fn sealing_with_private_key_is_rejected() {
        let mut kf = KeyFactory::new();
        let a = kf.keygen_asym();
        assert_eq!(enc(&a.private, vec![]).unwrap_err(), EnvelopeError::SealWithPrivate);
    }

    #[test]
    fn keygen_ids_are_distinct_and_deterministic() {
        let mut a = KeyFactory::new();
        let mut b = KeyFactory::new();
        let a1 = a.keygen_asym();
        let a2 = a.keygen_asym();
        assert_ne!(a1.public.pair_id(), a2.public.pair_id());
        assert_eq!(a1, b.keygen_asym());
        let s = a.keygen_sym();
        assert_eq!(s.kind(), KeyKind::Symmetric);
        assert_ne!(s.pair_id(), a2.public.pair_id());
    }

    #[test]
    fn nonce_collision_is_redrawn() {
        // Filling a 4-value space forces redraws; every value still comes out once.
        let owner = Coord::new(0, 0);
        let mut total = 0;
        for seed in 0..8 {
            let mut src = NonceSource::with_space(4);
            let mut rng = stream_rng(seed, Stream::Crypto, 0);
            let mut seen: Vec<u64> = (0..4).map(|_| src.gen_nonce(owner, &mut rng).value).collect();
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2, 3]);
            assert_eq!(src.issued(), 4);
            total += src.collisions();
        }
        assert!(total > 0);
    }

    #[test]
    fn nonce_sequences_are_seeded() {
        let draw = |seed| {
            let mut src = NonceSource::new();
            let mut rng = stream_rng(seed, Stream::Crypto, 0);
            (0..5)
                .map(|_| src.gen_nonce(Coord::new(1, 1), &mut rng).value)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn triple_nesting_peels_in_order() {
        // Same shape as the acceptance reply collected back at the source:
        // each layer holds the previous layer plus a (nonce, key) pair.
        let mut kf = KeyFactory::new();
        let owner = kf.keygen_asym();
        let k = [kf.keygen_sym(), kf.keygen_sym(), kf.keygen_sym()];
        let mut layer = enc(&owner.public, vec![Part::Word(7), Part::Nonce(30), Part::Key(k[2])]).unwrap();
        for (n, key) in [(20u64, k[1]), (10u64, k[0])] {
            layer = enc(&owner.public, vec![Part::Sealed(layer), Part::Nonce(n), Part::Key(key)]).unwrap();
        }
        let l1 = dec(&owner.private, &layer).unwrap();
        assert_eq!(l1[1], Part::Nonce(10));
        let l2 = dec(&owner.private, l1[0].as_sealed().unwrap()).unwrap();
        assert_eq!(l2[1], Part::Nonce(20));
        let l3 = dec(&owner.private, l2[0].as_sealed().unwrap()).unwrap();
        assert_eq!(l3, &[Part::Word(7), Part::Nonce(30), Part::Key(k[2])]);
    }

    #[test]
    fn keychain_reads_only_openable_layers() {
        let mut kf = KeyFactory::new();
        let held = kf.keygen_sym();
        let other = kf.keygen_sym();
        let secret = enc(&other, vec![Part::Coord(Coord::new(3, 3))]).unwrap();
        let visible = enc(&held, vec![Part::Coord(Coord::new(1, 2)), Part::Sealed(secret)]).unwrap();
        let mut chain = KeyChain::new();
        chain.insert(held);
        let coords = chain.readable_coords(&[Part::Sealed(visible)]);
        assert_eq!(coords.into_iter().collect::<Vec<_>>(), vec![Coord::new(1, 2)]);
    }

    /// Random nesting of up to depth 5, each layer under its own key.
    fn nested(depth: usize, kf: &mut KeyFactory, sym_mask: u8) -> (Envelope, Vec<(KeyHandle, KeyHandle)>) {
        let mut keys = Vec::new();
        let mut body = vec![Part::Word(0xfeed)];
        for level in 0..depth {
            let (seal, open) = if sym_mask & (1 << level) != 0 {
                let k = kf.keygen_sym();
                (k, k)
            } else {
                let kp = kf.keygen_asym();
                (kp.public, kp.private)
            };
            let env = enc(&seal, body).unwrap();
            keys.push((seal, open));
            body = vec![Part::Word(level as u64), Part::Sealed(env)];
        }
        let env = body.pop().unwrap();
        keys.reverse();
        (env.as_sealed().unwrap().clone(), keys)
    }

    proptest! {
        #[test]
        fn nesting_round_trips_and_rejects_foreign_keys(depth in 1usize..=5, sym_mask in any::<u8>()) {
            let mut kf = KeyFactory::new();
            let (outer, keys) = nested(depth, &mut kf, sym_mask);
            let stranger = kf.keygen_asym();
            let stranger_sym = kf.keygen_sym();
            let mut env = outer.clone();
            for (i, (seal, open)) in keys.iter().enumerate() {
                prop_assert!(env.open(&stranger.private).is_err());
                prop_assert!(env.open(&stranger_sym).is_err());
                if seal.kind() == KeyKind::AsymPublic {
                    prop_assert!(env.open(seal).is_err());
                }
                let body = env.open(open).unwrap().to_vec();
                if i + 1 == keys.len() {
                    prop_assert_eq!(body, vec![Part::Word(0xfeed)]);
                } else {
                    prop_assert_eq!(&body[0], &Part::Word((keys.len() - 2 - i) as u64));
                    env = body[1].as_sealed().unwrap().clone();
                }
            }
            // opening never mutates
            let again = nested(depth, &mut KeyFactory::new(), sym_mask).0;
            prop_assert_eq!(outer, again);
        }
    }
}
