//! Test-only oracles, written independently of the library code paths they
//! check.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

/// Misses per measured round for a cyclic trace of distinct PCs under LRU
/// with warm-up: every branch in a set whose load exceeds `ways` misses,
/// every other branch hits.
pub fn analytic_misses(pcs: &[u64], index_lo: u32, index_bits: u32, ways: u64) -> u64 {
    let mut load: BTreeMap<u64, u64> = BTreeMap::new();
    let distinct: HashSet<u64> = pcs.iter().copied().collect();
    for pc in distinct {
        let set = (pc / (1u64 << index_lo)) % (1u64 << index_bits);
        *load.entry(set).or_default() += 1;
    }
    load.values().filter(|&&l| l > ways).sum()
}

/// Brute-force LRU: each set is a list of (pc, last-use time); the victim is
/// the entry with the oldest time.
pub struct ReferenceLru {
    index_lo: u32,
    index_bits: u32,
    ways: usize,
    sets: BTreeMap<u64, Vec<(u64, u64)>>,
    clock: u64,
}

impl ReferenceLru {
    pub fn new(index_lo: u32, index_bits: u32, ways: usize) -> Self {
        Self {
            index_lo,
            index_bits,
            ways,
            sets: BTreeMap::new(),
            clock: 0,
        }
    }

    pub fn set_of(&self, pc: u64) -> u64 {
        (pc >> self.index_lo) & ((1 << self.index_bits) - 1)
    }

    /// Returns true on hit.
    pub fn access(&mut self, pc: u64) -> bool {
        self.clock += 1;
        let now = self.clock;
        let ways = self.ways;
        let set = self.sets.entry(self.set_of(pc)).or_default();
        if let Some(e) = set.iter_mut().find(|e| e.0 == pc) {
            e.1 = now;
            return true;
        }
        if set.len() == ways {
            let victim = set
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.1)
                .map(|(i, _)| i)
                .unwrap();
            set.remove(victim);
        }
        set.push((pc, now));
        false
    }

    /// PCs of one set, most recently used first.
    pub fn recency(&self, set: u64) -> Vec<u64> {
        let mut v = self.sets.get(&set).cloned().unwrap_or_default();
        v.sort_by_key(|e| std::cmp::Reverse(e.1));
        v.into_iter().map(|e| e.0).collect()
    }

    pub fn touched_sets(&self) -> Vec<u64> {
        self.sets.keys().copied().collect()
    }
}

/// What an assembler would lay out for an emitted gadget, computed by
/// reading the text line by line.
#[derive(Debug, Default)]
pub struct ParsedGadget {
    pub size: u64,
    pub labels: BTreeMap<String, u64>,
    /// Offset of every `br`.
    pub branch_offsets: Vec<u64>,
    pub ret_count: usize,
    /// Instructions written out individually (not from `.rept`).
    pub instructions: Vec<(u64, String)>,
    pub instruction_count: u64,
    pub header: Option<(u64, u64)>,
}

pub fn parse_gadget(text: &str) -> ParsedGadget {
    let mut p = ParsedGadget::default();
    let lines: Vec<&str> = text.lines().map(str::trim).collect();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        i += 1;
        if let Some(h) = line.strip_prefix("# btb-recon:") {
            let mut b = 0;
            let mut n = 0;
            for kv in h.split_whitespace() {
                if let Some(v) = kv.strip_prefix("B=") {
                    b = v.parse().unwrap();
                }
                if let Some(v) = kv.strip_prefix("N=") {
                    n = v.parse().unwrap();
                }
            }
            p.header = Some((b, n));
            continue;
        }
        if line.is_empty() || line.starts_with('#') || line.starts_with("//") {
            continue;
        }
        if let Some(label) = line.strip_suffix(':') {
            p.labels.insert(label.to_string(), p.size);
            continue;
        }
        if let Some(k) = line.strip_prefix(".p2align ") {
            let a = 1u64 << k.trim().parse::<u32>().unwrap();
            p.size = p.size.div_ceil(a) * a;
            continue;
        }
        if let Some(k) = line.strip_prefix(".rept ") {
            let count: u64 = k.trim().parse().unwrap();
            let mut body = Vec::new();
            while lines[i] != ".endr" {
                body.push(lines[i]);
                i += 1;
            }
            i += 1;
            assert!(body.iter().all(|l| !l.starts_with("br") && !l.starts_with("ret")));
            p.instruction_count += count * body.len() as u64;
            p.size += 4 * count * body.len() as u64;
            continue;
        }
        if line.starts_with('.') {
            continue;
        }
        let mnemonic = line.split_whitespace().next().unwrap().to_ascii_lowercase();
        match mnemonic.as_str() {
            "br" => p.branch_offsets.push(p.size),
            "ret" => p.ret_count += 1,
            _ => {}
        }
        p.instructions.push((p.size, line.to_string()));
        p.instruction_count += 1;
        p.size += 4;
    }
    p
}
