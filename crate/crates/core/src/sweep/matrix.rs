use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::MeasurementRecord;
use crate::btb_sim::{BtbGeometry, NoiseModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixMetadata {
    pub backend: String,
    #[serde(default)]
    pub geometry: Option<BtbGeometry>,
    #[serde(default)]
    pub noise: Option<NoiseModel>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub timestamp: Option<String>,
    pub warmup_rounds: u32,
    pub measure_rounds: u32,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MatrixMetadata {
    pub fn new(backend: impl Into<String>, warmup_rounds: u32, measure_rounds: u32) -> Self {
        Self {
            backend: backend.into(),
            geometry: None,
            noise: None,
            seed: None,
            timestamp: None,
            warmup_rounds,
            measure_rounds,
            notes: Vec::new(),
        }
    }
}

/// Miss rates over a `(B, N)` grid. Absent cells are `None`, never 0.0.
///
/// Cells are stored row-major: all strides of the first branch count, then
/// the next branch count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct MissMatrix {
    pub metadata: MatrixMetadata,
    b_values: Vec<u64>,
    n_values: Vec<u64>,
    cells: Vec<Option<f64>>,
}

#[derive(Deserialize)]
struct RawMatrix {
    metadata: MatrixMetadata,
    b_values: Vec<u64>,
    n_values: Vec<u64>,
    cells: Vec<Option<f64>>,
}

impl TryFrom<RawMatrix> for MissMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        let mut m = MissMatrix::empty(raw.metadata, raw.b_values, raw.n_values)?;
        if raw.cells.len() != m.cells.len() {
            return Err(Error::Matrix(format!(
                "expected {} cells, found {}",
                m.cells.len(),
                raw.cells.len()
            )));
        }
        if let Some(bad) = raw.cells.iter().flatten().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::Matrix(format!("invalid miss rate {bad}")));
        }
        m.cells = raw.cells;
        Ok(m)
    }
}

fn strictly_ascending(v: &[u64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl MissMatrix {
    /// A matrix with every cell absent.
    pub fn empty(metadata: MatrixMetadata, b_values: Vec<u64>, n_values: Vec<u64>) -> Result<Self> {
        if !strictly_ascending(&b_values) || !strictly_ascending(&n_values) {
            return Err(Error::Matrix("axes must be strictly ascending".into()));
        }
        if b_values.first() == Some(&0) {
            return Err(Error::Matrix("branch counts must be positive".into()));
        }
        let cells = vec![None; b_values.len() * n_values.len()];
        Ok(Self {
            metadata,
            b_values,
            n_values,
            cells,
        })
    }

    pub fn b_values(&self) -> &[u64] {
        &self.b_values
    }

    pub fn n_values(&self) -> &[u64] {
        &self.n_values
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    fn offset(&self, b: u64, n: u64) -> Option<usize> {
        let bi = self.b_values.binary_search(&b).ok()?;
        let ni = self.n_values.binary_search(&n).ok()?;
        Some(bi * self.n_values.len() + ni)
    }

    /// Rate at `(b, n)`, or `None` if the cell is off-grid or unmeasured.
    pub fn get(&self, b: u64, n: u64) -> Option<f64> {
        self.offset(b, n).and_then(|o| self.cells[o])
    }

    pub fn set(&mut self, b: u64, n: u64, rate: Option<f64>) -> Result<()> {
        let o = self
            .offset(b, n)
            .ok_or_else(|| Error::Matrix(format!("B={b}, N={n} is not on the grid")))?;
        self.cells[o] = rate;
        Ok(())
    }

    /// Row-major cells.
    pub fn cells(&self) -> &[Option<f64>] {
        &self.cells
    }

    /// `(B, N, rate)` for every present cell, row-major.
    pub fn present(&self) -> impl Iterator<Item = (u64, u64, f64)> + '_ {
        self.b_values.iter().flat_map(move |&b| {
            self.n_values
                .iter()
                .filter_map(move |&n| self.get(b, n).map(|r| (b, n, r)))
        })
    }

    pub fn present_count(&self) -> usize {
        self.cells.iter().flatten().count()
    }

    /// Records reproducing every present cell, provided each cell holds a
    /// whole number of mispredictions.
    pub fn to_records(&self) -> Result<Vec<MeasurementRecord>> {
        let rounds = self.metadata.measure_rounds;
        self.present()
            .map(|(b, n, rate)| {
                let executed = (b * u64::from(rounds)) as f64;
                let count = (rate * executed).round();
                let rec = MeasurementRecord::new(b, n, count as u64, rounds, self.metadata.backend.clone());
                if rec.miss_rate() == rate {
                    Ok(rec)
                } else {
                    Err(Error::Matrix(format!(
                        "cell B={b}, N={n} (rate {rate}) is not a whole misprediction count"
                    )))
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Union of several matrices.
///
/// Cells present in more than one input with different rates take the mean
/// and leave a note in the metadata. Inputs without cells only contribute
/// their round settings.
pub fn merge(matrices: &[MissMatrix]) -> Result<MissMatrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Merge("nothing to merge".into()))?;
    let (warmup, measure) = (first.metadata.warmup_rounds, first.metadata.measure_rounds);
    if let Some(m) = matrices
        .iter()
        .find(|m| (m.metadata.warmup_rounds, m.metadata.measure_rounds) != (warmup, measure))
    {
        return Err(Error::Merge(format!(
            "round settings differ: warmup/measure {warmup}/{measure} vs {}/{}",
            m.metadata.warmup_rounds, m.metadata.measure_rounds
        )));
    }

    let contributing: Vec<&MissMatrix> = matrices.iter().filter(|m| !m.is_empty()).collect();
    let Some(lead) = contributing.first() else {
        return Ok(first.clone());
    };

    let mut metadata = lead.metadata.clone();
    for m in &contributing[1..] {
        if m.metadata.backend != metadata.backend
            && !metadata.backend.split('+').any(|b| b == m.metadata.backend)
        {
            metadata.backend = format!("{}+{}", metadata.backend, m.metadata.backend);
        }
        if m.metadata.geometry != metadata.geometry {
            metadata.geometry = None;
        }
        if m.metadata.noise != metadata.noise {
            metadata.noise = None;
        }
        if m.metadata.seed != metadata.seed {
            metadata.seed = None;
        }
        if m.metadata.timestamp != metadata.timestamp {
            metadata.timestamp = None;
        }
        for note in &m.metadata.notes {
            if !metadata.notes.contains(note) {
                metadata.notes.push(note.clone());
            }
        }
    }

    let mut values: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    let mut b_axis = Vec::new();
    let mut n_axis = Vec::new();
    for m in &contributing {
        b_axis.extend_from_slice(m.b_values());
        n_axis.extend_from_slice(m.n_values());
        for (b, n, r) in m.present() {
            values.entry((b, n)).or_default().push(r);
        }
    }
    b_axis.sort_unstable();
    b_axis.dedup();
    n_axis.sort_unstable();
    n_axis.dedup();

    let mut out = MissMatrix::empty(metadata, b_axis, n_axis)?;
    for ((b, n), rates) in values {
        let rate = if rates.iter().all(|&r| r == rates[0]) {
            rates[0]
        } else {
            let mean = rates.iter().sum::<f64>() / rates.len() as f64;
            let note = format!("conflict at B={b}, N={n}: rates {rates:?} averaged to {mean}");
            if !out.metadata.notes.contains(&note) {
                out.metadata.notes.push(note);
            }
            mean
        };
        out.set(b, n, Some(rate))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(b: &[u64], n: &[u64], rate: impl Fn(u64, u64) -> f64) -> MissMatrix {
        let mut m = MissMatrix::empty(MatrixMetadata::new("sim", 10, 1), b.to_vec(), n.to_vec()).unwrap();
        for &bb in b {
            for &nn in n {
                m.set(bb, nn, Some(rate(bb, nn))).unwrap();
            }
        }
        m
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let m = matrix(&[1, 2], &[8, 16], |b, n| (b * n) as f64 / 64.0);
        let empty = MissMatrix::empty(MatrixMetadata::new("csv", 10, 1), vec![], vec![]).unwrap();
        assert_eq!(merge(&[m.clone(), empty.clone()]).unwrap(), m);
        assert_eq!(merge(&[empty, m.clone()]).unwrap(), m);
    }

    #[test]
    fn merge_is_idempotent() {
        let m = matrix(&[1, 2], &[8, 16], |b, _| b as f64 / 4.0);
        let merged = merge(&[m.clone(), m.clone()]).unwrap();
        assert_eq!(merged, m);
        assert!(merged.metadata.notes.is_empty());
    }

    #[test]
    fn merge_unions_axes_and_marks_missing() {
        let cap = matrix(&[1024, 2048], &[8, 16], |_, _| 0.0);
        let idx = matrix(&[1, 2], &[32, 64], |_, _| 1.0);
        let m = merge(&[cap, idx]).unwrap();
        assert_eq!(m.b_values(), &[1, 2, 1024, 2048]);
        assert_eq!(m.n_values(), &[8, 16, 32, 64]);
        assert_eq!(m.get(1, 8), None);
        assert_eq!(m.get(1024, 64), None);
        assert_eq!(m.get(1, 32), Some(1.0));
        assert_eq!(m.get(2048, 16), Some(0.0));
        assert_eq!(m.present_count(), 8);
    }

    #[test]
    fn merge_conflict_takes_mean() {
        let a = matrix(&[4], &[8], |_, _| 0.25);
        let b = matrix(&[4], &[8], |_, _| 0.75);
        let m = merge(&[a, b]).unwrap();
        assert_eq!(m.get(4, 8), Some(0.5));
        assert_eq!(m.metadata.notes.len(), 1);
        assert!(m.metadata.notes[0].contains("B=4, N=8"));
    }

    #[test]
    fn merge_rejects_round_mismatch() {
        let a = matrix(&[4], &[8], |_, _| 0.0);
        let mut b = a.clone();
        b.metadata.measure_rounds = 2;
        assert!(matches!(merge(&[a, b]), Err(Error::Merge(_))));
    }

    #[test]
    fn json_rejects_wrong_cell_count() {
        let m = matrix(&[4], &[8], |_, _| 0.0);
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["cells"] = serde_json::json!([0.0, 0.0]);
        assert!(MissMatrix::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn records_reproduce_cells() {
        let m = matrix(&[4, 5], &[8], |b, _| 3.0 / b as f64);
        let recs = m.to_records().unwrap();
        assert_eq!(recs[1].mispredictions, 3);
        let mut averaged = m.clone();
        averaged.set(4, 8, Some(0.3)).unwrap();
        assert!(averaged.to_records().is_err());
    }
}
