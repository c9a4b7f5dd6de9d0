mod common;

use btb_recon::GadgetSpec;
use common::parse_gadget;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LISTING_SNAPSHOT: &str = include_str!("fixtures/listing_b3_n16.S");

#[test]
fn listing_snapshot() {
    let text = GadgetSpec::new(3, 16).emit_asm().unwrap();
    assert_eq!(text, LISTING_SNAPSHOT);
    let p = parse_gadget(&text);
    assert_eq!(p.branch_offsets, [4, 20, 36]);
    assert_eq!(p.labels["next1"], 16);
    assert_eq!(p.labels["next2"], 32);
    assert_eq!(p.labels["next3"], 48);
    assert_eq!(p.size, 52);
    let per_block: Vec<Vec<&str>> = p
        .instructions
        .chunks(4)
        .take(3)
        .map(|c| c.iter().map(|(_, i)| i.split_whitespace().next().unwrap()).collect())
        .collect();
    for block in per_block {
        assert_eq!(block, ["adr", "br", "nop", "nop"]);
    }
}

#[test]
fn random_specs_have_listing_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let b = rng.random_range(1..=64);
        let n = 1u64 << rng.random_range(3..=21);
        let spec = GadgetSpec::new(b, n);
        let text = spec.emit_asm().unwrap();
        let p = parse_gadget(&text);
        assert_eq!(p.header, Some((b, n)));
        assert_eq!(p.branch_offsets.len() as u64, b, "B={b} N={n}");
        assert_eq!(p.ret_count, 1);
        for (k, &off) in p.branch_offsets.iter().enumerate() {
            assert_eq!(off, k as u64 * n + 4, "B={b} N={n}");
        }
        assert_eq!(p.size, spec.footprint());
        assert_eq!(p.size, b * n + 4);
        assert_eq!(p.instruction_count, b * (n / 4) + 1);
        assert_eq!(text, spec.emit_asm().unwrap());
    }
}

proptest! {
    #[test]
    fn trace_shape(b in 1u64..5000, exp in 3u32..=21, base_pages in 0u64..64) {
        let n = 1u64 << exp;
        let spec = GadgetSpec::new(b, n).with_base(base_pages << 21);
        let trace = spec.build_trace().unwrap();
        prop_assert_eq!(trace.len() as u64, b);
        prop_assert!(trace.pcs().windows(2).all(|w| w[1] - w[0] == n));
        // Every PC agrees on the low `exp` bits, which equal the branch offset.
        let low = n - 1;
        prop_assert!(trace.pcs().iter().all(|pc| pc & low == 4));
    }
}

/// Assembles the text with clang, when present, and checks the `.text`
/// section size of the object against B*N+4.
#[test]
fn assembles_to_expected_footprint() {
    let have_clang = std::process::Command::new("clang")
        .arg("--version")
        .output()
        .is_ok_and(|o| o.status.success());
    if !have_clang {
        eprintln!("clang not found; skipping assembler check");
        return;
    }
    let dir = std::env::temp_dir().join(format!("btb-recon-asm-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    for (b, n) in [(1, 8), (3, 16), (5, 256), (2, 1 << 20)] {
        let spec = GadgetSpec::new(b, n);
        let src = dir.join(format!("g_{b}_{n}.S"));
        let obj = dir.join(format!("g_{b}_{n}.o"));
        std::fs::write(&src, spec.emit_asm().unwrap()).unwrap();
        let out = std::process::Command::new("clang")
            .args(["--target=aarch64-linux-gnu", "-c"])
            .arg(&src)
            .arg("-o")
            .arg(&obj)
            .output()
            .unwrap();
        if !out.status.success() {
            let err = String::from_utf8_lossy(&out.stderr);
            if err.contains("unknown target") || err.contains("No available targets") {
                eprintln!("clang lacks an aarch64 backend; skipping");
                return;
            }
            panic!("assembly failed for B={b} N={n}: {err}");
        }
        let elf = std::fs::read(&obj).unwrap();
        assert_eq!(elf_section_size(&elf, ".text"), Some(spec.footprint()), "B={b} N={n}");
    }
    let _ = std::fs::remove_dir_all(&dir);
}

fn elf_section_size(elf: &[u8], name: &str) -> Option<u64> {
    let u16_at = |o: usize| u16::from_le_bytes(elf[o..o + 2].try_into().unwrap()) as usize;
    let u32_at = |o: usize| u32::from_le_bytes(elf[o..o + 4].try_into().unwrap()) as usize;
    let u64_at = |o: usize| u64::from_le_bytes(elf[o..o + 8].try_into().unwrap());
    let shoff = u64_at(0x28) as usize;
    let (entsize, count, strndx) = (u16_at(0x3a), u16_at(0x3c), u16_at(0x3e));
    let strtab = u64_at(shoff + strndx * entsize + 0x18) as usize;
    (0..count).find_map(|i| {
        let sh = shoff + i * entsize;
        let start = strtab + u32_at(sh);
        let end = start + elf[start..].iter().position(|&c| c == 0)?;
        (&elf[start..end] == name.as_bytes()).then(|| u64_at(sh + 0x20))
    })
}
