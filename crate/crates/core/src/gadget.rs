//! Probe gadgets: `B` unconditional indirect branches laid out `N` bytes
//! apart, each block jumping to the next.
//!
//! Block `k` starts at `base + k*N` and holds an address-materialization
//! instruction at +0, `br x0` at +4 and nop padding up to `N` bytes. A final
//! `ret` sits at `base + B*N`.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::btb_sim::VA_BITS;
use crate::error::{Error, Result};

/// Offset of the indirect branch inside each block.
pub const BRANCH_OFFSET: u64 = 4;
/// Smallest stride that fits the two-instruction block body.
pub const MIN_STRIDE: u64 = 8;
pub const DEFAULT_ALIGNMENT_EXPONENT: u8 = 21;
/// Base address used when simulating gadgets.
pub const DEFAULT_SIM_BASE: u64 = 0x4000_0000;
/// Entry symbol of emitted gadgets.
pub const ENTRY_SYMBOL: &str = "btb_gadget";

// `adr` reaches +/-1 MiB; at and beyond this stride blocks use `adrp`.
const ADR_LIMIT: u64 = 1 << 20;
// `adrp` reaches +/-4 GiB.
const ADRP_LIMIT: u64 = 1 << 32;
// Runs of padding nops longer than this are emitted as a `.rept` block.
const INLINE_NOPS: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GadgetSpec {
    pub branch_count: u64,
    pub stride: u64,
    pub base_address: u64,
    pub alignment_exponent: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoBranches,
    StrideNotPowerOfTwo(u64),
    StrideTooSmall(u64),
    BaseNotAligned { base: u64, alignment: u64 },
    AddressOverflow { last_pc: u128 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoBranches => f.write_str("branch count must be at least 1"),
            Violation::StrideNotPowerOfTwo(n) => write!(f, "stride not power of two ({n})"),
            Violation::StrideTooSmall(n) => {
                write!(f, "stride {n} below minimum {MIN_STRIDE} (no room for adr+br)")
            }
            Violation::BaseNotAligned { base, alignment } => {
                write!(f, "base not aligned ({base:#x} is not a multiple of {alignment:#x})")
            }
            Violation::AddressOverflow { last_pc } => {
                write!(f, "gadget extends past the {VA_BITS}-bit address space (last pc {last_pc:#x})")
            }
        }
    }
}

fn violations_error(v: &[Violation]) -> Error {
    Error::Gadget(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
}

impl GadgetSpec {
    /// Spec at the default simulation base with the default alignment.
    pub fn new(branch_count: u64, stride: u64) -> Self {
        Self {
            branch_count,
            stride,
            base_address: DEFAULT_SIM_BASE,
            alignment_exponent: DEFAULT_ALIGNMENT_EXPONENT,
        }
    }

    pub fn with_base(mut self, base_address: u64) -> Self {
        self.base_address = base_address;
        self
    }

    pub fn with_alignment_exponent(mut self, exponent: u8) -> Self {
        self.alignment_exponent = exponent;
        self
    }

    /// Bytes covered by the blocks plus the trailing `ret`.
    pub fn footprint(&self) -> u64 {
        self.branch_count * self.stride + 4
    }

    /// Every invariant violation; an empty list means the spec is usable.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.branch_count == 0 {
            out.push(Violation::NoBranches);
        }
        if !self.stride.is_power_of_two() {
            out.push(Violation::StrideNotPowerOfTwo(self.stride));
        }
        if self.stride < MIN_STRIDE {
            out.push(Violation::StrideTooSmall(self.stride));
        }
        let alignment = 1u64.checked_shl(self.alignment_exponent.into()).unwrap_or(0);
        if alignment == 0 || !self.base_address.is_multiple_of(alignment) {
            out.push(Violation::BaseNotAligned {
                base: self.base_address,
                alignment,
            });
        }
        let end = u128::from(self.base_address)
            + u128::from(self.branch_count) * u128::from(self.stride)
            + 4;
        if end > 1u128 << VA_BITS {
            out.push(Violation::AddressOverflow { last_pc: end - 4 });
        }
        out
    }

    pub fn build_trace(&self) -> Result<BranchTrace> {
        let v = self.validate();
        if !v.is_empty() {
            return Err(violations_error(&v));
        }
        let pcs = (0..self.branch_count)
            .map(|k| self.base_address + k * self.stride + BRANCH_OFFSET)
            .collect();
        Ok(BranchTrace {
            stride: self.stride,
            pcs,
        })
    }

    /// GNU-assembler source for the gadget.
    ///
    /// Placement is left to the linker/loader, so the base address and its
    /// alignment are not part of the output; only the block structure is.
    pub fn emit_asm(&self) -> Result<String> {
        let v: Vec<_> = self
            .validate()
            .into_iter()
            .filter(|v| !matches!(v, Violation::BaseNotAligned { .. } | Violation::AddressOverflow { .. }))
            .collect();
        if !v.is_empty() {
            return Err(violations_error(&v));
        }
        let (b, n) = (self.branch_count, self.stride);
        if n >= ADRP_LIMIT {
            return Err(Error::Gadget(format!(
                "stride {n} exceeds the adrp reach of 4 GiB"
            )));
        }
        let far = n >= ADR_LIMIT;
        let align = n.trailing_zeros();
        let pad = n / 4 - 2;

        let mut s = String::new();
        // Writing to a String cannot fail.
        let _ = writeln!(s, "# btb-recon: B={b} N={n}");
        let _ = writeln!(s, "// {b} blocks of {n} bytes, ret at offset {}; footprint {} bytes.", b * n, self.footprint());
        if far {
            let _ = writeln!(s, "// block: +0 adrp x0, nextK (page-aligned label, exact address); +4 br x0; {pad} nops.");
        } else {
            let _ = writeln!(s, "// block: +0 adr x0, nextK; +4 br x0; {pad} nops.");
        }
        let _ = writeln!(s, "// branch pc of block k = {ENTRY_SYMBOL} + k*{n} + {BRANCH_OFFSET}.");
        s.push_str("\t.text\n");
        let _ = writeln!(s, "\t.global {ENTRY_SYMBOL}");
        let _ = writeln!(s, "\t.type {ENTRY_SYMBOL}, %function");
        let _ = writeln!(s, "\t.p2align {align}");
        let _ = writeln!(s, "{ENTRY_SYMBOL}:");
        for k in 1..=b {
            let mnemonic = if far { "adrp" } else { "adr" };
            let _ = writeln!(s, "\t{mnemonic} x0, next{k}");
            s.push_str("\tbr x0\n");
            if pad <= INLINE_NOPS {
                for _ in 0..pad {
                    s.push_str("\tnop\n");
                }
            } else {
                let _ = writeln!(s, "\t.rept {pad}\n\tnop\n\t.endr");
            }
            let _ = writeln!(s, "\t.p2align {align}");
            let _ = writeln!(s, "next{k}:");
        }
        s.push_str("\tret\n");
        let _ = writeln!(s, "\t.size {ENTRY_SYMBOL}, .-{ENTRY_SYMBOL}");
        Ok(s)
    }
}

/// PCs of a gadget's indirect branches in execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchTrace {
    stride: u64,
    pcs: Vec<u64>,
}

impl BranchTrace {
    pub fn stride(&self) -> u64 {
        self.stride
    }

    pub fn pcs(&self) -> &[u64] {
        &self.pcs
    }

    pub fn len(&self) -> usize {
        self.pcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pcs.is_empty()
    }
}
