//! Matrix export, terminal heatmaps and human-readable inference reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::infer::{Finding, InferenceReport};
use crate::sweep::{MatrixMetadata, MissMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixFormat {
    Json,
    Csv,
}

/// Significant digits used for CSV rates.
pub const CSV_SIGNIFICANT_DIGITS: usize = 12;

/// Formats `x` with at most 12 significant digits, no exponent and no locale
/// dependence. Whole numbers keep a trailing `.0`.
pub fn format_rate(x: f64) -> String {
    let rounded: f64 = format!("{:.*e}", CSV_SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .expect("float formatting round-trips");
    let s = rounded.to_string();
    if s.contains('.') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        s + ".0"
    }
}

pub fn export_matrix(matrix: &MissMatrix, format: MatrixFormat) -> Result<Vec<u8>> {
    match format {
        MatrixFormat::Json => Ok(matrix.to_json()?.into_bytes()),
        MatrixFormat::Csv => Ok(matrix_csv(matrix).into_bytes()),
    }
}

/// First column B, header row of strides, body of rates; absent cells are
/// empty fields.
pub fn matrix_csv(matrix: &MissMatrix) -> String {
    let mut out = String::from("B");
    for n in matrix.n_values() {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for &b in matrix.b_values() {
        let _ = write!(out, "{b}");
        for &n in matrix.n_values() {
            out.push(',');
            if let Some(r) = matrix.get(b, n) {
                out.push_str(&format_rate(r));
            }
        }
        out.push('\n');
    }
    out
}

/// Reads the CSV produced by [`matrix_csv`]. The CSV carries no metadata, so
/// it is supplied by the caller.
pub fn import_matrix_csv(text: &str, metadata: MatrixMetadata) -> Result<MissMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty matrix CSV".into(),
    })?;
    let mut head = header.split(',').map(str::trim);
    if !head.next().is_some_and(|h| h.eq_ignore_ascii_case("b")) {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with B".into(),
        });
    }
    let n_values = head
        .map(|t| {
            t.parse::<u64>().map_err(|_| Error::Parse {
                line: 1,
                msg: format!("bad stride {t:?}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n_values.len() + 1 {
            return Err(err(format!("expected {} fields", n_values.len() + 1)));
        }
        let b: u64 = fields[0].parse().map_err(|_| err(format!("bad B {:?}", fields[0])))?;
        let rates = fields[1..]
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|_| err(format!("bad rate {f:?}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((b, rates));
    }
    let b_values = rows.iter().map(|(b, _)| *b).collect();
    let mut m = MissMatrix::empty(metadata, b_values, n_values.clone())?;
    for (b, rates) in rows {
        for (&n, r) in n_values.iter().zip(rates) {
            m.set(b, n, r)?;
        }
    }
    Ok(m)
}

/// Long-format table (`B N rate`), one block per B separated by blank
/// lines, as gnuplot `splot ... with pm3d` expects. Absent cells are `NaN`.
pub fn plot_table(matrix: &MissMatrix) -> String {
    let mut out = String::from("# B\tN\tlog2N\tmiss_rate\n");
    for (i, &b) in matrix.b_values().iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for &n in matrix.n_values() {
            let rate = matrix.get(b, n).map_or_else(|| "NaN".to_string(), format_rate);
            let _ = writeln!(out, "{b}\t{n}\t{}\t{rate}", n.trailing_zeros());
        }
    }
    out
}

/// Bucketing of rates into heatmap glyphs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRendering {
    boundaries: Vec<f64>,
}

pub const DEFAULT_BUCKETS: [f64; 4] = [0.05, 0.25, 0.5, 0.9];
const BUCKET_GLYPHS: &[char] = &['.', ':', '+', '*', '#', '%', '&', '$', '@'];
pub const OVERFLOW_GLYPH: char = '!';
pub const MISSING_GLYPH: char = ' ';
/// Title, column header and rule above the rows, legend below.
pub const ASCII_FIXED_LINES: usize = 4;

impl Default for HeatmapRendering {
    fn default() -> Self {
        Self {
            boundaries: DEFAULT_BUCKETS.to_vec(),
        }
    }
}

impl HeatmapRendering {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if !boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("bucket boundaries must be strictly ascending".into()));
        }
        if boundaries.len() + 1 > BUCKET_GLYPHS.len() {
            return Err(Error::Config(format!(
                "at most {} bucket boundaries are supported",
                BUCKET_GLYPHS.len() - 1
            )));
        }
        Ok(Self { boundaries })
    }

    /// Bucket `i` holds `boundaries[i-1] <= r < boundaries[i]`.
    pub fn bucket(&self, rate: f64) -> usize {
        self.boundaries.iter().take_while(|&&b| rate >= b).count()
    }

    pub fn glyph(&self, rate: Option<f64>) -> char {
        match rate {
            None => MISSING_GLYPH,
            Some(r) if r > 1.0 => OVERFLOW_GLYPH,
            Some(r) => BUCKET_GLYPHS[self.bucket(r)],
        }
    }

    pub fn legend(&self) -> String {
        let mut parts = Vec::new();
        let mut lower = "0".to_string();
        for (i, b) in self.boundaries.iter().enumerate() {
            parts.push(format!("{}=[{lower},{b})", BUCKET_GLYPHS[i]));
            lower = b.to_string();
        }
        parts.push(format!("{}=[{lower},1]", BUCKET_GLYPHS[self.boundaries.len()]));
        parts.push(format!("{OVERFLOW_GLYPH}=>1"));
        parts.push("blank=not measured".to_string());
        format!("legend: {}", parts.join(" "))
    }

    /// One line per B row; columns are labelled by log2(N).
    pub fn render(&self, matrix: &MissMatrix) -> String {
        let width = matrix
            .b_values()
            .iter()
            .map(|b| b.to_string().len())
            .max()
            .unwrap_or(1)
            .max(1);
        let mut out = String::new();
        let _ = writeln!(out, "miss rate heatmap (rows: B, columns: log2 N)");
        let _ = write!(out, "{:>width$} |", "B");
        for n in matrix.n_values() {
            let _ = write!(out, "{:>3}", n.trailing_zeros());
        }
        out.push('\n');
        let _ = writeln!(out, "{}-+{}", "-".repeat(width), "-".repeat(3 * matrix.n_values().len()));
        for &b in matrix.b_values() {
            let _ = write!(out, "{b:>width$} |");
            for &n in matrix.n_values() {
                let _ = write!(out, "  {}", self.glyph(matrix.get(b, n)));
            }
            out.push('\n');
        }
        out.push_str(&self.legend());
        out.push('\n');
        out
    }
}

pub fn render_ascii(matrix: &MissMatrix, buckets: &[f64]) -> Result<String> {
    Ok(HeatmapRendering::new(buckets.to_vec())?.render(matrix))
}

fn finding_line<T>(out: &mut String, name: &str, f: &Finding<T>, show: impl Fn(&T) -> String) {
    match f {
        Finding::Determined { value, evidence } => {
            let _ = writeln!(out, "{name:<10} {}", show(value));
            for c in &evidence.comparisons {
                let _ = writeln!(out, "{:<10}   {c}", "");
            }
            for fl in &evidence.flags {
                let _ = writeln!(out, "{:<10}   note: {fl}", "");
            }
        }
        Finding::Indeterminate { reason, .. } => {
            let _ = writeln!(out, "{name:<10} indeterminate: {reason}");
        }
    }
}

/// Plain-text report echoing both bit-numbering conventions.
pub fn report_text(report: &InferenceReport) -> String {
    let mut out = String::from("BTB inference report\n");
    finding_line(&mut out, "capacity", &report.capacity, |c| {
        format!(
            "{} entries (raw grid value {}{}, reference stride N={})",
            c.rounded,
            c.raw,
            if c.grid_limited { ", grid-limited" } else { "" },
            c.reference_stride
        )
    });
    finding_line(&mut out, "index_lo", &report.index_lo, |b| b.to_string());
    finding_line(&mut out, "index_hi", &report.index_hi, |b| b.to_string());
    match report.sets {
        Some(s) => {
            let _ = writeln!(out, "{:<10} {s} ({} index bits)", "sets", s.trailing_zeros());
        }
        None => {
            let _ = writeln!(out, "{:<10} indeterminate", "sets");
        }
    }
    finding_line(&mut out, "ways", &report.ways, |w| w.to_string());
    match &report.cross_check {
        Some(c) if c.consistent => {
            let _ = writeln!(
                out,
                "consistent: {} sets x ways = {}",
                c.sets.unwrap_or(0),
                c.product.unwrap_or(0)
            );
        }
        Some(c) => {
            let _ = writeln!(out, "INCONSISTENT; reconcile with one of: {}", c.suggestions.join(", "));
        }
        None => {
            let _ = writeln!(out, "consistency not checked (missing parameters)");
        }
    }
    out.push_str("assumptions:\n");
    for a in &report.assumptions {
        let _ = writeln!(out, "  - {a}");
    }
    out
}
