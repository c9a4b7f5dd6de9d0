//! Recovering BTB parameters from a miss-rate matrix.
//!
//! Four deductions, each threshold-driven and returning the matrix cells it
//! rested on:
//!
//! * **index_lo** - the first stride doubling that makes large-B rows jump
//!   fixes the lowest index bit (half the sets become unreachable).
//! * **capacity** - at stride `2^index_lo` every index bit varies, so the
//!   largest B that stays below `theta_low` is the entry count.
//! * **index_hi** - once the stride fixes every index bit, all branches share
//!   one set and further doublings change nothing; the start of that plateau
//!   is `index_hi + 1`.
//! * **ways** - in single-set columns, the largest B that still fits.
//!
//! Rates above 1.0 are read as 1.0.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gadget::{BRANCH_OFFSET, MIN_STRIDE};
use crate::sweep::MissMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Rates below this count as "buffered" when locating capacity.
    pub theta_low: f64,
    /// Minimum band-mean increase between adjacent strides that marks an
    /// index bit.
    pub delta_jump: f64,
    /// Largest per-cell difference for two stride columns to be "similar".
    pub epsilon_similar: f64,
    /// Rates at or below this count as zero in single-set columns.
    pub theta_zero: f64,
    /// Rows with `B >= capacity_band * max B` form the index_lo band.
    pub capacity_band: f64,
    /// Cell differences worth fewer mispredictions than this are treated as
    /// stray events when comparing columns.
    pub min_significant_misses: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            theta_low: 0.25,
            delta_jump: 0.20,
            epsilon_similar: 0.05,
            theta_zero: 0.05,
            capacity_band: 0.5,
            min_significant_misses: 2.0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("theta_low", self.theta_low),
            ("delta_jump", self.delta_jump),
            ("epsilon_similar", self.epsilon_similar),
            ("theta_zero", self.theta_zero),
            ("capacity_band", self.capacity_band),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.delta_jump <= self.epsilon_similar {
            return Err(Error::Config(format!(
                "delta_jump ({}) must exceed epsilon_similar ({})",
                self.delta_jump, self.epsilon_similar
            )));
        }
        if !(self.min_significant_misses >= 0.0 && self.min_significant_misses.is_finite()) {
            return Err(Error::Config("min_significant_misses must be non-negative".into()));
        }
        Ok(())
    }
}

/// A matrix cell as read by inference (clamped to at most 1.0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRef {
    pub b: u64,
    pub n: u64,
    pub rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub cells: Vec<CellRef>,
    pub comparisons: Vec<String>,
    pub flags: Vec<String>,
}

impl Evidence {
    fn cite(&mut self, cell: CellRef) {
        if !self.cells.contains(&cell) {
            self.cells.push(cell);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conclusion<T> {
    pub value: T,
    pub evidence: Evidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Indeterminate {
    pub reason: String,
    pub evidence: Evidence,
}

impl fmt::Display for Indeterminate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.reason)
    }
}

impl std::error::Error for Indeterminate {}

pub type Inference<T> = std::result::Result<Conclusion<T>, Indeterminate>;

fn indeterminate<T>(reason: impl Into<String>, evidence: Evidence) -> Inference<T> {
    Err(Indeterminate {
        reason: reason.into(),
        evidence,
    })
}

/// Every numeric conclusion must cite at least two cells.
fn conclude<T>(value: T, evidence: Evidence) -> Inference<T> {
    if evidence.cells.len() < 2 {
        return indeterminate(
            format!("conclusion rests on {} cell(s); at least 2 required", evidence.cells.len()),
            evidence,
        );
    }
    Ok(Conclusion { value, evidence })
}

/// A PC bit position with its 1-based echo.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPosition {
    pub bit: u8,
    pub one_based: u8,
}

impl BitPosition {
    pub fn new(bit: u8) -> Self {
        Self {
            bit,
            one_based: bit + 1,
        }
    }
}

impl fmt::Display for BitPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bit {} (1-based: {})", self.bit, self.one_based)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacity {
    /// Largest grid B below `theta_low` in the reference column.
    pub raw: u64,
    /// `raw` rounded to the nearest power of two (ties round up).
    pub rounded: u64,
    /// Every cell of the reference column was below `theta_low`, so the
    /// true capacity may exceed the grid.
    pub grid_limited: bool,
    /// Stride of the reference column.
    pub reference_stride: u64,
}

fn nearest_power_of_two(x: u64) -> u64 {
    if x.is_power_of_two() {
        return x;
    }
    let hi = x.next_power_of_two();
    let lo = hi / 2;
    if x - lo < hi - x {
        lo
    } else {
        hi
    }
}

/// Clamped view of the power-of-two stride columns of a matrix.
struct Columns {
    /// exponent -> (B -> clamped rate)
    by_exp: BTreeMap<u32, BTreeMap<u64, f64>>,
    rounds: u32,
}

impl Columns {
    fn new(m: &MissMatrix) -> Self {
        let mut by_exp: BTreeMap<u32, BTreeMap<u64, f64>> = BTreeMap::new();
        for (b, n, r) in m.present() {
            if n.is_power_of_two() {
                by_exp.entry(n.trailing_zeros()).or_default().insert(b, r.min(1.0));
            }
        }
        Self {
            by_exp,
            rounds: m.metadata.measure_rounds.max(1),
        }
    }

    fn cell(&self, exp: u32, b: u64) -> Option<CellRef> {
        self.by_exp.get(&exp)?.get(&b).map(|&rate| CellRef { b, n: 1 << exp, rate })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Lowest set-index bit from the first stride doubling that raises the
/// large-B band mean by more than `delta_jump`.
pub fn infer_index_lo(matrix: &MissMatrix, cfg: &InferenceConfig) -> Inference<BitPosition> {
    let cols = Columns::new(matrix);
    let mut ev = Evidence::default();
    let Some(max_b) = matrix.present().map(|(b, _, _)| b).max() else {
        return indeterminate("matrix has no cells", ev);
    };
    let band_floor = cfg.capacity_band * max_b as f64;
    let exps: Vec<u32> = cols.by_exp.keys().copied().collect();
    let mut unresolved_below = false;

    for pair in exps.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi != lo + 1 {
            ev.comparisons.push(format!("N=2^{lo} -> N=2^{hi}: not consecutive, skipped"));
            unresolved_below = true;
            continue;
        }
        let (a, b) = (&cols.by_exp[&lo], &cols.by_exp[&hi]);
        let rows: Vec<u64> = a
            .keys()
            .filter(|&&bb| bb as f64 >= band_floor && b.contains_key(&bb))
            .copied()
            .collect();
        if rows.is_empty() {
            ev.comparisons.push(format!("N=2^{lo} -> N=2^{hi}: no shared band rows"));
            unresolved_below = true;
            continue;
        }
        let ma = mean(&rows.iter().map(|r| a[r]).collect::<Vec<_>>());
        let mb = mean(&rows.iter().map(|r| b[r]).collect::<Vec<_>>());
        let jumped = mb - ma > cfg.delta_jump;
        ev.comparisons.push(format!(
            "N=2^{lo} -> N=2^{hi}: band mean {ma:.4} -> {mb:.4} (increase {:.4} {} delta_jump {})",
            mb - ma,
            if jumped { ">" } else { "<=" },
            cfg.delta_jump
        ));
        if jumped {
            for &r in &rows {
                ev.cite(cols.cell(lo, r).expect("shared row"));
                ev.cite(cols.cell(hi, r).expect("shared row"));
            }
            let bit = lo as u8;
            if unresolved_below {
                ev.flags.push(
                    "ambiguous: some smaller stride pairs could not be compared".to_string(),
                );
            }
            if lo == exps[0] {
                ev.flags.push(format!(
                    "jump at the smallest stride in the matrix: index bits below bit {bit} cannot be ruled out{}",
                    if u64::from(1u32 << lo) <= MIN_STRIDE {
                        " (strides under 8 bytes cannot be probed, and every branch sits at block offset +4)"
                    } else {
                        "; extend N downward"
                    }
                ));
            }
            return conclude(BitPosition::new(bit), ev);
        }
    }
    indeterminate("no index-lo signature; extend N or B range", ev)
}

/// Entry count from the reference column `N = 2^index_lo`.
pub fn infer_capacity(matrix: &MissMatrix, index_lo: u8, cfg: &InferenceConfig) -> Inference<Capacity> {
    let cols = Columns::new(matrix);
    let mut ev = Evidence::default();
    let wanted = u32::from(index_lo);
    let Some((&exp, column)) = cols.by_exp.range(wanted..).next() else {
        return indeterminate(
            format!("no stride column at or above N=2^{index_lo}"),
            ev,
        );
    };
    if exp != wanted {
        ev.flags.push(format!(
            "reference column N=2^{wanted} absent; using N=2^{exp}"
        ));
    }
    let cells: Vec<CellRef> = column.keys().map(|&b| cols.cell(exp, b).expect("present")).collect();
    let Some(raw) = cells.iter().filter(|c| c.rate < cfg.theta_low).map(|c| c.b).max() else {
        cells.iter().take(2).for_each(|&c| ev.cite(c));
        return indeterminate("capacity below grid minimum", ev);
    };
    let at = cells.iter().position(|c| c.b == raw).expect("raw is a row");
    ev.cite(cells[at]);
    let grid_limited = at + 1 == cells.len();
    if grid_limited {
        if at > 0 {
            ev.cite(cells[at - 1]);
        }
        ev.flags.push(format!("capacity at or beyond grid maximum (>= {raw}, grid-limited)"));
    } else {
        let above = cells[at + 1];
        ev.cite(above);
        ev.comparisons.push(format!(
            "N={}: rate {:.4} at B={} < theta_low {} <= rate {:.4} at B={}",
            1u64 << exp,
            cells[at].rate,
            raw,
            cfg.theta_low,
            above.rate,
            above.b
        ));
    }
    if cells[..at].iter().any(|c| c.rate >= cfg.theta_low) {
        ev.flags.push("reference column is not monotone in B".to_string());
    }
    conclude(
        Capacity {
            raw,
            rounded: nearest_power_of_two(raw),
            grid_limited,
            reference_stride: 1 << exp,
        },
        ev,
    )
}

enum Similarity {
    Similar,
    Differs(CellRef, CellRef),
    Incomparable,
}

fn compare(cols: &Columns, a: u32, b: u32, cfg: &InferenceConfig) -> Similarity {
    let (ca, cb) = (&cols.by_exp[&a], &cols.by_exp[&b]);
    let mut shared = false;
    for (&row, &ra) in ca {
        let Some(&rb) = cb.get(&row) else { continue };
        shared = true;
        let diff = (ra - rb).abs();
        let misses = diff * (row * u64::from(cols.rounds)) as f64;
        if diff > cfg.epsilon_similar && misses + 1e-9 >= cfg.min_significant_misses {
            return Similarity::Differs(cols.cell(a, row).unwrap(), cols.cell(b, row).unwrap());
        }
    }
    if shared {
        Similarity::Similar
    } else {
        Similarity::Incomparable
    }
}

/// Highest set-index bit: one below the start of the trailing run of
/// mutually similar stride columns.
pub fn infer_index_hi(matrix: &MissMatrix, cfg: &InferenceConfig) -> Inference<BitPosition> {
    let cols = Columns::new(matrix);
    let mut ev = Evidence::default();
    let exps: Vec<u32> = cols.by_exp.keys().copied().collect();
    if exps.len() < 2 {
        return indeterminate("fewer than two stride columns; no plateau possible", ev);
    }

    // Smallest start whose trailing run is pairwise similar.
    let mut start = None;
    for (i, &j) in exps.iter().enumerate() {
        let run = &exps[i..];
        if run.len() < 2 {
            break;
        }
        let all_similar = run.iter().enumerate().all(|(k, &a)| {
            run[k + 1..]
                .iter()
                .all(|&b| matches!(compare(&cols, a, b, cfg), Similarity::Similar))
        });
        if all_similar {
            start = Some((i, j));
            break;
        }
    }
    let Some((i, j_star)) = start else {
        return indeterminate("no stable plateau of at least two stride columns", ev);
    };
    let plateau = &exps[i..];
    ev.comparisons.push(format!(
        "columns N=2^{}..=2^{} pairwise similar (epsilon_similar {}, min {} mispredictions)",
        j_star,
        plateau.last().unwrap(),
        cfg.epsilon_similar,
        cfg.min_significant_misses
    ));

    // Saturated columns are similar for lack of signal, not because they
    // share one set.
    let buffered = plateau
        .iter()
        .find_map(|&e| cols.by_exp[&e].iter().find(|(_, &r)| r <= cfg.theta_zero).map(|(&b, _)| (e, b)));
    let Some((be, bb)) = buffered else {
        plateau
            .iter()
            .take(2)
            .filter_map(|&e| cols.by_exp[&e].keys().next().and_then(|&b| cols.cell(e, b)))
            .for_each(|c| ev.cite(c));
        return indeterminate(
            "plateau columns are saturated (no rate at or below theta_zero); add small-B rows",
            ev,
        );
    };

    if i == 0 {
        return indeterminate(
            format!("plateau spans every column from N=2^{j_star}; extend N downward"),
            ev,
        );
    }
    let prev = exps[i - 1];
    let boundary = plateau.iter().find_map(|&e| match compare(&cols, prev, e, cfg) {
        Similarity::Differs(x, y) => Some((e, x, y)),
        _ => None,
    });
    let Some((e, x, y)) = boundary else {
        return indeterminate(
            format!("column N=2^{prev} shares no rows with the plateau"),
            ev,
        );
    };
    ev.cite(x);
    ev.cite(y);
    ev.comparisons.push(format!(
        "N=2^{prev} vs N=2^{e} at B={}: {:.4} vs {:.4}",
        x.b, x.rate, y.rate
    ));
    // One plateau cell that still buffers, and its twin in another plateau
    // column, back the "one shared set" reading.
    ev.cite(cols.cell(be, bb).unwrap());
    if let Some(twin) = plateau.iter().filter(|&&o| o != be).find_map(|&o| cols.cell(o, bb)) {
        ev.cite(twin);
    }
    if prev + 1 != j_star {
        ev.flags.push(format!(
            "ambiguous: no column between N=2^{prev} and N=2^{j_star}; index_hi lies in {}..={}",
            prev,
            j_star - 1
        ));
    }
    conclude(BitPosition::new((j_star - 1) as u8), ev)
}

/// Associativity by majority vote over single-set columns.
pub fn infer_ways(matrix: &MissMatrix, index_hi: u8, cfg: &InferenceConfig) -> Inference<u32> {
    let cols = Columns::new(matrix);
    let mut ev = Evidence::default();
    let first = u32::from(index_hi) + 1;
    let single: Vec<u32> = cols.by_exp.range(first..).map(|(&e, _)| e).collect();
    if single.is_empty() {
        return indeterminate(
            format!("no single-set column (N >= 2^{first}) in the matrix"),
            ev,
        );
    }

    let mut votes: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for &e in &single {
        let col = &cols.by_exp[&e];
        let Some(w) = col.iter().filter(|(_, &r)| r <= cfg.theta_zero).map(|(&b, _)| b).max() else {
            ev.comparisons.push(format!("N=2^{e}: no row at or below theta_zero; no vote"));
            continue;
        };
        ev.cite(cols.cell(e, w).unwrap());
        if let Some((&above, _)) = col.range(w + 1..).next() {
            ev.cite(cols.cell(e, above).unwrap());
            ev.comparisons.push(format!(
                "N=2^{e}: largest B with rate <= {} is {w}; B={above} reads {:.4}",
                cfg.theta_zero,
                col[&above]
            ));
        } else {
            ev.comparisons.push(format!("N=2^{e}: every row buffered up to B={w}"));
            ev.flags.push(format!("N=2^{e}: ways may exceed grid maximum B={w}"));
        }
        votes.entry(w).or_default().push(e);
    }
    let Some(top) = votes.values().map(Vec::len).max() else {
        return indeterminate("no single-set column has a buffered row", ev);
    };
    let leaders: Vec<u64> = votes.iter().filter(|(_, v)| v.len() == top).map(|(&w, _)| w).collect();
    let ways = *leaders.last().unwrap();
    if leaders.len() > 1 {
        ev.flags.push(format!("tie between {leaders:?}; taking the maximum"));
    }
    for (&w, exps) in &votes {
        if w != ways {
            for e in exps {
                ev.flags.push(format!("dissent: N=2^{e} suggests {w} way(s)"));
            }
        }
    }
    let ways = match u32::try_from(ways) {
        Ok(w) => w,
        Err(_) => return indeterminate(format!("implausible way count {ways}"), ev),
    };
    conclude(ways, ev)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub consistent: bool,
    pub sets: Option<u64>,
    pub product: Option<u64>,
    pub suggestions: Vec<String>,
}

/// Checks `2^(index_hi - index_lo + 1) * ways == capacity` and, when it fails,
/// lists the single-parameter changes that would reconcile them.
pub fn cross_check(capacity: u64, index_lo: u8, index_hi: u8, ways: u32) -> CrossCheck {
    if index_hi < index_lo {
        return CrossCheck {
            consistent: false,
            sets: None,
            product: None,
            suggestions: vec![format!("index_hi ({index_hi}) lies below index_lo ({index_lo})")],
        };
    }
    let sets = 1u64 << (index_hi - index_lo + 1);
    let product = sets * u64::from(ways);
    let mut suggestions = Vec::new();
    if product != capacity {
        if capacity.is_multiple_of(sets) {
            suggestions.push(format!("ways={}", capacity / sets));
        }
        suggestions.push(format!("capacity={product}"));
        let per_way = capacity / u64::from(ways);
        if capacity.is_multiple_of(u64::from(ways)) && per_way.is_power_of_two() && per_way > 1 {
            let hi = u32::from(index_lo) + per_way.trailing_zeros() - 1;
            suggestions.push(format!("index_hi={hi} ({per_way} sets)"));
        }
    }
    CrossCheck {
        consistent: product == capacity,
        sets: Some(sets),
        product: Some(product),
        suggestions,
    }
}

/// Outcome of one deduction inside a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Finding<T> {
    Determined { value: T, evidence: Evidence },
    Indeterminate { reason: String, evidence: Evidence },
}

impl<T> From<Inference<T>> for Finding<T> {
    fn from(r: Inference<T>) -> Self {
        match r {
            Ok(c) => Finding::Determined {
                value: c.value,
                evidence: c.evidence,
            },
            Err(e) => Finding::Indeterminate {
                reason: e.reason,
                evidence: e.evidence,
            },
        }
    }
}

impl<T> Finding<T> {
    pub fn value(&self) -> Option<&T> {
        match self {
            Finding::Determined { value, .. } => Some(value),
            Finding::Indeterminate { .. } => None,
        }
    }

    pub fn evidence(&self) -> &Evidence {
        match self {
            Finding::Determined { evidence, .. } | Finding::Indeterminate { evidence, .. } => evidence,
        }
    }
}

pub const ASSUMPTIONS: &[&str] = &[
    "bit positions are 0-based (LSB = bit 0); 1-based echoes are given alongside",
    "the BTB is indexed by the branch instruction's own PC (block offset +4)",
    "input miss rates above 1.0 are read as 1.0",
    "set index is a contiguous slice of PC bits",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub capacity: Finding<Capacity>,
    pub index_lo: Finding<BitPosition>,
    pub index_hi: Finding<BitPosition>,
    pub sets: Option<u64>,
    pub ways: Finding<u32>,
    pub cross_check: Option<CrossCheck>,
    pub consistent: bool,
    pub config: InferenceConfig,
    pub assumptions: Vec<String>,
}

impl InferenceReport {
    /// Every parameter determined, capacity inside the grid, and the four
    /// consistent with one another.
    pub fn is_complete(&self) -> bool {
        self.index_lo.value().is_some()
            && self.index_hi.value().is_some()
            && self.ways.value().is_some()
            && self.capacity.value().is_some_and(|c| !c.grid_limited)
            && self.consistent
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn infer_all(matrix: &MissMatrix, cfg: &InferenceConfig) -> Result<InferenceReport> {
    cfg.validate()?;
    let index_lo = infer_index_lo(matrix, cfg);
    let capacity = match &index_lo {
        Ok(lo) => infer_capacity(matrix, lo.value.bit, cfg),
        Err(_) => indeterminate("requires index_lo", Evidence::default()),
    };
    let index_hi = infer_index_hi(matrix, cfg);
    let ways = match &index_hi {
        Ok(hi) => infer_ways(matrix, hi.value.bit, cfg),
        Err(_) => indeterminate("requires index_hi", Evidence::default()),
    };

    let sets = match (&index_lo, &index_hi) {
        (Ok(lo), Ok(hi)) if hi.value.bit >= lo.value.bit => {
            Some(1u64 << (hi.value.bit - lo.value.bit + 1))
        }
        _ => None,
    };
    let check = match (&capacity, &index_lo, &index_hi, &ways) {
        (Ok(c), Ok(lo), Ok(hi), Ok(w)) => {
            Some(cross_check(c.value.rounded, lo.value.bit, hi.value.bit, w.value))
        }
        _ => None,
    };
    let mut assumptions: Vec<String> = ASSUMPTIONS.iter().map(|s| s.to_string()).collect();
    assumptions.push(format!("branch offset within each block: +{BRANCH_OFFSET} bytes"));
    Ok(InferenceReport {
        consistent: check.as_ref().is_some_and(|c| c.consistent),
        capacity: capacity.into(),
        index_lo: index_lo.into(),
        index_hi: index_hi.into(),
        sets,
        ways: ways.into(),
        cross_check: check,
        config: cfg.clone(),
        assumptions,
    })
}
