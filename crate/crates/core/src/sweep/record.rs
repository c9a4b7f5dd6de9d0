use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(B, N, C)` observation from any backend.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub branch_count: u64,
    pub stride: u64,
    pub mispredictions: u64,
    pub measure_rounds: u32,
    pub backend: String,
}

impl MeasurementRecord {
    pub fn new(
        branch_count: u64,
        stride: u64,
        mispredictions: u64,
        measure_rounds: u32,
        backend: impl Into<String>,
    ) -> Self {
        Self {
            branch_count,
            stride,
            mispredictions,
            measure_rounds,
            backend: backend.into(),
        }
    }

    /// Mispredictions per executed measured branch. May exceed 1.0.
    pub fn miss_rate(&self) -> f64 {
        self.mispredictions as f64 / (self.branch_count * u64::from(self.measure_rounds)) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IngestWarning {
    StrideNotPowerOfTwo { line: usize, stride: u64 },
    RateAboveOne { line: usize, rate_bits: u64 },
}

impl std::fmt::Display for IngestWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IngestWarning::StrideNotPowerOfTwo { line, stride } => {
                write!(f, "line {line}: stride {stride} is not a power of two")
            }
            IngestWarning::RateAboveOne { line, rate_bits } => {
                write!(f, "line {line}: miss rate {} exceeds 1.0", f64::from_bits(*rate_bits))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvIngest {
    pub records: Vec<MeasurementRecord>,
    pub warnings: Vec<IngestWarning>,
}

pub const CSV_BACKEND: &str = "csv";

/// Parses the `B,N,C` line protocol.
///
/// `#` lines are comments, except `# measure_rounds=k`, which applies to every
/// following record. A `B,N,C` header is accepted before the first record.
pub fn ingest_csv<R: BufRead>(reader: R) -> Result<CsvIngest> {
    let mut out = CsvIngest::default();
    let mut rounds = 1u32;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(k) = parse_rounds_directive(comment, lineno)? {
                rounds = k;
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if out.records.is_empty()
            && fields.len() == 3
            && fields.iter().zip(["b", "n", "c"]).all(|(f, h)| f.eq_ignore_ascii_case(h))
        {
            continue;
        }
        let [b, n, c] = fields[..] else {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 fields B,N,C, found {}", fields.len()),
            });
        };
        let field = |name: &str, text: &str| -> Result<u64> {
            text.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("{name} is not a non-negative integer: {text:?}"),
            })
        };
        let (b, n, c) = (field("B", b)?, field("N", n)?, field("C", c)?);
        if b == 0 {
            return Err(Error::Parse {
                line: lineno,
                msg: "B must be at least 1".into(),
            });
        }
        if !n.is_power_of_two() {
            out.warnings.push(IngestWarning::StrideNotPowerOfTwo { line: lineno, stride: n });
        }
        let record = MeasurementRecord::new(b, n, c, rounds, CSV_BACKEND);
        if record.miss_rate() > 1.0 {
            out.warnings.push(IngestWarning::RateAboveOne {
                line: lineno,
                rate_bits: record.miss_rate().to_bits(),
            });
        }
        out.records.push(record);
    }
    Ok(out)
}

fn parse_rounds_directive(comment: &str, line: usize) -> Result<Option<u32>> {
    let Some(rest) = comment.trim().strip_prefix("measure_rounds") else {
        return Ok(None);
    };
    let Some(value) = rest.trim().strip_prefix('=') else {
        return Ok(None);
    };
    match value.trim().parse::<u32>() {
        Ok(k) if k >= 1 => Ok(Some(k)),
        _ => Err(Error::Parse {
            line,
            msg: format!("invalid measure_rounds directive: {:?}", value.trim()),
        }),
    }
}

pub fn ingest_csv_str(text: &str) -> Result<CsvIngest> {
    ingest_csv(text.as_bytes())
}

pub fn ingest_csv_path(path: impl AsRef<Path>) -> Result<CsvIngest> {
    let file = std::fs::File::open(path)?;
    ingest_csv(std::io::BufReader::new(file))
}

/// Writes records back in the line protocol, emitting a rounds directive
/// wherever the round count changes.
pub fn to_line_protocol(records: &[MeasurementRecord]) -> String {
    let mut out = String::from("B,N,C\n");
    let mut rounds = 1;
    for r in records {
        if r.measure_rounds != rounds {
            rounds = r.measure_rounds;
            let _ = writeln!(out, "# measure_rounds={rounds}");
        }
        let _ = writeln!(out, "{},{},{}", r.branch_count, r.stride, r.mispredictions);
    }
    out
}

/// Distinct `(B, N)` pairs present in `records`.
pub fn covered_cells(records: &[MeasurementRecord]) -> BTreeSet<(u64, u64)> {
    records.iter().map(|r| (r.branch_count, r.stride)).collect()
}
