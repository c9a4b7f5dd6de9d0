use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the modelled virtual address space. Index and tag bits must lie
/// below this bound.
pub const VA_BITS: u8 = 48;

/// Replacement policy applied when a full set takes a new entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum Replacement {
    #[default]
    Lru,
    Fifo,
    Random { seed: u64 },
}

impl std::fmt::Display for Replacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Replacement::Lru => f.write_str("lru"),
            Replacement::Fifo => f.write_str("fifo"),
            Replacement::Random { seed } => write!(f, "random(seed={seed})"),
        }
    }
}

/// Organization of a set-associative BTB indexed by slices of the branch PC.
///
/// Bits are numbered from 0 at the LSB. The set index is PC bits
/// `index_lo..=index_hi`; the tag is PC bits `index_hi+1..=tag_hi`. Capacity is
/// always derived as `sets * ways`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct BtbGeometry {
    ways: u32,
    index_lo: u8,
    index_hi: u8,
    tag_hi: u8,
    replacement: Replacement,
}

#[derive(Serialize, Deserialize)]
struct RawGeometry {
    ways: u32,
    index_lo: u8,
    index_hi: u8,
    #[serde(default = "default_tag_hi")]
    tag_hi: u8,
    #[serde(default)]
    replacement: Replacement,
}

fn default_tag_hi() -> u8 {
    VA_BITS - 1
}

impl TryFrom<RawGeometry> for BtbGeometry {
    type Error = Error;

    fn try_from(raw: RawGeometry) -> Result<Self> {
        BtbGeometry::new(raw.ways, raw.index_lo, raw.index_hi)?
            .with_tag_hi(raw.tag_hi)
            .map(|g| g.with_replacement(raw.replacement))
    }
}

impl From<BtbGeometry> for RawGeometry {
    fn from(g: BtbGeometry) -> Self {
        RawGeometry {
            ways: g.ways,
            index_lo: g.index_lo,
            index_hi: g.index_hi,
            tag_hi: g.tag_hi,
            replacement: g.replacement,
        }
    }
}

impl BtbGeometry {
    pub fn new(ways: u32, index_lo: u8, index_hi: u8) -> Result<Self> {
        if ways == 0 {
            return Err(Error::Geometry("ways must be at least 1".into()));
        }
        if index_lo > index_hi {
            return Err(Error::Geometry(format!(
                "index_lo ({index_lo}) exceeds index_hi ({index_hi})"
            )));
        }
        if index_hi >= VA_BITS {
            return Err(Error::Geometry(format!(
                "index_hi ({index_hi}) must be below bit {VA_BITS}"
            )));
        }
        Ok(Self {
            ways,
            index_lo,
            index_hi,
            tag_hi: VA_BITS - 1,
            replacement: Replacement::Lru,
        })
    }

    /// Builds a geometry from a power-of-two set count, placing the index
    /// field just above `index_lo`.
    pub fn with_sets(sets: u64, ways: u32, index_lo: u8) -> Result<Self> {
        if sets == 0 || !sets.is_power_of_two() {
            return Err(Error::Geometry(format!(
                "set count {sets} is not a power of two"
            )));
        }
        let bits = sets.trailing_zeros();
        if bits == 0 {
            return Err(Error::Geometry("at least two sets are required".into()));
        }
        let hi = u32::from(index_lo) + bits - 1;
        let hi = u8::try_from(hi).map_err(|_| Error::Geometry("index field too wide".into()))?;
        Self::new(ways, index_lo, hi)
    }

    pub fn with_replacement(mut self, replacement: Replacement) -> Self {
        self.replacement = replacement;
        self
    }

    /// Truncates the tag to PC bits `index_hi+1..=tag_hi`. Addresses that
    /// differ only above `tag_hi` alias onto the same entry.
    pub fn with_tag_hi(mut self, tag_hi: u8) -> Result<Self> {
        if tag_hi < self.index_hi || tag_hi >= VA_BITS {
            return Err(Error::Geometry(format!(
                "tag_hi ({tag_hi}) must lie in [{}, {}]",
                self.index_hi,
                VA_BITS - 1
            )));
        }
        self.tag_hi = tag_hi;
        Ok(self)
    }

    pub fn ways(&self) -> u32 {
        self.ways
    }

    pub fn index_lo(&self) -> u8 {
        self.index_lo
    }

    pub fn index_hi(&self) -> u8 {
        self.index_hi
    }

    pub fn tag_hi(&self) -> u8 {
        self.tag_hi
    }

    pub fn replacement(&self) -> Replacement {
        self.replacement
    }

    pub fn index_bits(&self) -> u32 {
        u32::from(self.index_hi - self.index_lo) + 1
    }

    pub fn sets(&self) -> u64 {
        1u64 << self.index_bits()
    }

    pub fn capacity(&self) -> u64 {
        self.sets() * u64::from(self.ways)
    }

    pub fn decompose(&self, pc: u64) -> AddressDecomposition {
        let low_mask = mask(u32::from(self.index_lo));
        let tag_width = u32::from(self.tag_hi - self.index_hi);
        AddressDecomposition {
            unused_low: pc & low_mask,
            index: (pc >> self.index_lo) & mask(self.index_bits()),
            tag: (pc >> (self.index_hi + 1)) & mask(tag_width),
        }
    }
}

impl std::fmt::Display for BtbGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} sets x {} ways (capacity {}), index bits {}..={} (1-based {}..={}), {}",
            self.sets(),
            self.ways,
            self.capacity(),
            self.index_lo,
            self.index_hi,
            self.index_lo + 1,
            self.index_hi + 1,
            self.replacement
        )
    }
}

pub(crate) fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

/// A branch PC split into the fields a BTB lookup uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AddressDecomposition {
    pub unused_low: u64,
    pub index: u64,
    pub tag: u64,
}

impl AddressDecomposition {
    /// Reassembles the PC bits at or below `tag_hi`.
    pub fn recompose(&self, geometry: &BtbGeometry) -> u64 {
        self.unused_low | (self.index << geometry.index_lo) | (self.tag << (geometry.index_hi + 1))
    }
}
