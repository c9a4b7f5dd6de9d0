use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::{mask, BtbGeometry, Replacement};
use crate::error::{Error, Result};

/// Largest set count the dense simulator will allocate.
pub const MAX_SIMULATED_SETS: u64 = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Hit,
    Miss,
}

/// Mutable contents of a simulated BTB.
///
/// Each set is a fixed slice of `ways` slots of which the first `fill` are
/// live. Under LRU the live slots are kept most-recent first; under FIFO they
/// are kept newest-inserted first. Random replacement keeps insertion order
/// and picks victims from a seeded generator.
///
/// Entries are matched on every PC bit outside the index field (the tag plus
/// the bits below `index_lo`), so two distinct branches never share an entry
/// unless the tag is truncated.
#[derive(Clone, Debug)]
pub struct BtbState {
    geometry: BtbGeometry,
    slots: Vec<u64>,
    fill: Vec<u32>,
    rng: Option<ChaCha8Rng>,
    misses: u64,
    accesses: u64,
}

impl BtbState {
    pub fn new(geometry: BtbGeometry) -> Result<Self> {
        let sets = geometry.sets();
        if sets > MAX_SIMULATED_SETS {
            return Err(Error::Geometry(format!(
                "{sets} sets exceeds the simulator limit of {MAX_SIMULATED_SETS}"
            )));
        }
        let ways = geometry.ways() as usize;
        let rng = match geometry.replacement() {
            Replacement::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        Ok(Self {
            geometry,
            slots: vec![0; sets as usize * ways],
            fill: vec![0; sets as usize],
            rng,
            misses: 0,
            accesses: 0,
        })
    }

    pub fn geometry(&self) -> &BtbGeometry {
        &self.geometry
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn accesses(&self) -> u64 {
        self.accesses
    }

    pub fn reset_counters(&mut self) {
        self.misses = 0;
        self.accesses = 0;
    }

    /// Key stored for `pc`: tag bits shifted down over the index field, with
    /// the unused low bits kept in place.
    pub fn entry_key(&self, pc: u64) -> u64 {
        let d = self.geometry.decompose(pc);
        (d.tag << self.geometry.index_lo()) | d.unused_low
    }

    /// Live entry keys of one set in policy order (see the type docs).
    pub fn set_contents(&self, index: u64) -> &[u64] {
        let ways = self.geometry.ways() as usize;
        let start = index as usize * ways;
        &self.slots[start..start + self.fill[index as usize] as usize]
    }

    pub fn access(&mut self, pc: u64) -> Access {
        let ways = self.geometry.ways() as usize;
        let index = ((pc >> self.geometry.index_lo()) & mask(self.geometry.index_bits())) as usize;
        let key = self.entry_key(pc);
        let fill = self.fill[index] as usize;
        let set = &mut self.slots[index * ways..(index + 1) * ways];
        self.accesses += 1;

        if let Some(pos) = set[..fill].iter().position(|&k| k == key) {
            if self.geometry.replacement() == Replacement::Lru {
                set[..=pos].rotate_right(1);
            }
            return Access::Hit;
        }

        self.misses += 1;
        match self.geometry.replacement() {
            Replacement::Lru | Replacement::Fifo => {
                // Newest goes to the front; when full the tail (least recent
                // or oldest) falls off.
                let live = if fill < ways {
                    self.fill[index] += 1;
                    fill + 1
                } else {
                    ways
                };
                set[..live].rotate_right(1);
                set[0] = key;
            }
            Replacement::Random { .. } => {
                if fill < ways {
                    set[fill] = key;
                    self.fill[index] += 1;
                } else {
                    let rng = self.rng.as_mut().expect("random policy carries a generator");
                    let victim = rng.random_range(0..ways);
                    set[victim] = key;
                }
            }
        }
        debug_assert!(self.fill[index] as usize <= ways);
        Access::Miss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_way() -> BtbGeometry {
        BtbGeometry::new(2, 4, 6).unwrap()
    }

    #[test]
    fn fresh_state_misses() {
        let mut s = BtbState::new(two_way()).unwrap();
        assert_eq!(s.access(0x1234), Access::Miss);
        assert_eq!((s.misses(), s.accesses()), (1, 1));
    }

    #[test]
    fn immediate_reaccess_hits() {
        let mut s = BtbState::new(two_way()).unwrap();
        s.access(0x40);
        assert_eq!(s.access(0x40), Access::Hit);
    }

    #[test]
    fn lru_cyclic_thrash() {
        // Three tags on the same index of a 2-way set: hand-replaying LRU
        // gives a miss on every access.
        let mut s = BtbState::new(two_way()).unwrap();
        let (a, b, c) = (0x10, 0x10 | 1 << 7, 0x10 | 2 << 7);
        for _ in 0..5 {
            for pc in [a, b, c] {
                assert_eq!(s.access(pc), Access::Miss);
            }
        }
        assert_eq!(s.set_contents(1).len(), 2);
    }

    #[test]
    fn lru_keeps_recent_entry() {
        let mut s = BtbState::new(two_way()).unwrap();
        let (a, b, c) = (0x10, 0x10 | 1 << 7, 0x10 | 2 << 7);
        s.access(a);
        s.access(b);
        s.access(a); // a becomes MRU, b is the victim
        s.access(c);
        assert_eq!(s.access(a), Access::Hit);
        assert_eq!(s.access(b), Access::Miss);
    }

    #[test]
    fn fifo_ignores_hits() {
        let geo = two_way().with_replacement(Replacement::Fifo);
        let mut s = BtbState::new(geo).unwrap();
        let (a, b, c) = (0x10, 0x10 | 1 << 7, 0x10 | 2 << 7);
        s.access(a);
        s.access(b);
        s.access(a);
        s.access(c); // evicts a, the oldest insertion
        assert_eq!(s.access(b), Access::Hit);
        assert_eq!(s.access(a), Access::Miss);
    }

    #[test]
    fn random_policy_is_seeded() {
        let geo = two_way().with_replacement(Replacement::Random { seed: 3 });
        let run = || {
            let mut s = BtbState::new(geo).unwrap();
            (0..200u64)
                .map(|i| s.access(0x10 | (i % 5) << 7))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn low_bits_distinguish_entries() {
        // 0x04 and 0x0c share index and tag but are different branches.
        let geo = BtbGeometry::new(1, 4, 6).unwrap();
        let mut s = BtbState::new(geo).unwrap();
        s.access(0x04);
        assert_eq!(s.access(0x0c), Access::Miss);
        assert_eq!(s.access(0x04), Access::Miss);
    }

    #[test]
    fn oversized_geometry_rejected() {
        let geo = BtbGeometry::new(1, 4, 40).unwrap();
        assert!(BtbState::new(geo).is_err());
    }
}
