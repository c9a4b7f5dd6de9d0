//! The `(B, N)` grid experiment and the miss-rate matrix it produces.

mod matrix;
mod record;

pub use matrix::{merge, MatrixMetadata, MissMatrix};
pub use record::{
    covered_cells, ingest_csv, ingest_csv_path, ingest_csv_str, to_line_protocol, CsvIngest,
    IngestWarning, MeasurementRecord, CSV_BACKEND,
};

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::btb_sim::{self, inject_noise, BtbGeometry, NoiseModel, Replacement, Rounds};
use crate::error::{Error, Result};
use crate::gadget::{GadgetSpec, MIN_STRIDE};
use crate::par::{self, Execution};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    b_values: Vec<u64>,
    n_values: Vec<u64>,
    pub warmup_rounds: u32,
    pub measure_rounds: u32,
}

impl SweepGrid {
    pub fn new(b_values: Vec<u64>, n_values: Vec<u64>) -> Result<Self> {
        let grid = Self {
            b_values,
            n_values,
            warmup_rounds: Rounds::default().warmup,
            measure_rounds: Rounds::default().measure,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_rounds(mut self, rounds: Rounds) -> Result<Self> {
        rounds.validate()?;
        self.warmup_rounds = rounds.warmup;
        self.measure_rounds = rounds.measure;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_values.is_empty() || self.n_values.is_empty() {
            return Err(Error::Grid("both axes need at least one value".into()));
        }
        if !self.b_values.windows(2).all(|w| w[0] < w[1])
            || !self.n_values.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::Grid("axis values must be strictly ascending".into()));
        }
        if self.b_values[0] == 0 {
            return Err(Error::Grid("branch counts must be positive".into()));
        }
        if let Some(n) = self
            .n_values
            .iter()
            .find(|&&n| !n.is_power_of_two() || n < MIN_STRIDE)
        {
            return Err(Error::Grid(format!(
                "stride {n} is not a power of two of at least {MIN_STRIDE}"
            )));
        }
        self.rounds().validate()
    }

    pub fn b_values(&self) -> &[u64] {
        &self.b_values
    }

    pub fn n_values(&self) -> &[u64] {
        &self.n_values
    }

    pub fn rounds(&self) -> Rounds {
        Rounds {
            warmup: self.warmup_rounds,
            measure: self.measure_rounds,
        }
    }

    pub fn cells(&self) -> Vec<(u64, u64)> {
        self.b_values
            .iter()
            .flat_map(|&b| self.n_values.iter().map(move |&n| (b, n)))
            .collect()
    }

    /// B = 1K..8K in 1K steps; N = 8..1024.
    pub fn capacity_preset() -> Self {
        Self::new(
            (1..=8).map(|k| k * 1024).collect(),
            (3..=10).map(|e| 1 << e).collect(),
        )
        .expect("preset is valid")
    }

    /// B = 1..512 in powers of two; N = 2^5..2^19.
    pub fn set_index_preset() -> Self {
        Self::new(
            (0..=9).map(|e| 1 << e).collect(),
            (5..=19).map(|e| 1 << e).collect(),
        )
        .expect("preset is valid")
    }

    /// A grid large enough to recover `geometry` by inference.
    ///
    /// Rows: powers of two and multiples of capacity/4, up to 1.5 x capacity.
    /// Columns: N = 8 .. 2^(index_hi + 3).
    pub fn for_hypothesis(geometry: &BtbGeometry) -> Result<Self> {
        let capacity = geometry.capacity();
        let b_max = capacity + capacity / 2;
        let step = (capacity / 4).max(1);
        let mut b: Vec<u64> = std::iter::successors(Some(1u64), |x| Some(x * 2))
            .take_while(|&x| x <= b_max)
            .chain((1..).map(|k| k * step).take_while(|&x| x <= b_max))
            .collect();
        b.sort_unstable();
        b.dedup();
        let n = (3..=u32::from(geometry.index_hi()) + 3).map(|e| 1u64 << e).collect();
        Self::new(b, n)
    }
}

/// Named grids selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Capacity,
    SetIndex,
    /// Capacity and set-index grids, merged.
    Both,
}

impl Preset {
    pub fn grids(self) -> Vec<SweepGrid> {
        match self {
            Preset::Capacity => vec![SweepGrid::capacity_preset()],
            Preset::SetIndex => vec![SweepGrid::set_index_preset()],
            Preset::Both => vec![SweepGrid::capacity_preset(), SweepGrid::set_index_preset()],
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "capacity" => Ok(Preset::Capacity),
            "set-index" => Ok(Preset::SetIndex),
            "both" => Ok(Preset::Both),
            other => Err(Error::Grid(format!(
                "unknown preset {other:?} (expected capacity, set-index or both)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Backend {
    Simulator {
        geometry: BtbGeometry,
        noise: NoiseModel,
    },
    Dataset {
        records: Vec<MeasurementRecord>,
    },
}

impl Backend {
    pub fn simulator(geometry: BtbGeometry) -> Self {
        Backend::Simulator {
            geometry,
            noise: NoiseModel::Off,
        }
    }
}

pub fn run_sweep(backend: &Backend, grid: &SweepGrid) -> Result<MissMatrix> {
    run_sweep_with(backend, grid, Execution::default())
}

/// Fills every cell of `grid`. Cells are independent, so the result does not
/// depend on `exec`.
pub fn run_sweep_with(backend: &Backend, grid: &SweepGrid, exec: Execution) -> Result<MissMatrix> {
    grid.validate()?;
    let cells = grid.cells();
    let (metadata, rates) = match backend {
        Backend::Simulator { geometry, noise } => {
            noise.validate()?;
            let rounds = grid.rounds();
            let rates = par::map(exec, &cells, |&(b, n)| -> Result<f64> {
                let trace = GadgetSpec::new(b, n).build_trace()?;
                let record = btb_sim::replay(geometry, &trace, rounds)?;
                Ok(inject_noise(&record, &noise.for_cell(b, n))?.miss_rate())
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut meta = MatrixMetadata::new("sim", grid.warmup_rounds, grid.measure_rounds);
            meta.geometry = Some(*geometry);
            meta.noise = Some(*noise);
            meta.seed = match (noise, geometry.replacement()) {
                (NoiseModel::Poisson { seed, .. }, _) => Some(*seed),
                (NoiseModel::Off, Replacement::Random { seed }) => Some(seed),
                _ => None,
            };
            (meta, rates)
        }
        Backend::Dataset { records } => {
            let mut by_cell: HashMap<(u64, u64), Vec<f64>> = HashMap::new();
            for r in records {
                by_cell
                    .entry((r.branch_count, r.stride))
                    .or_default()
                    .push(r.miss_rate());
            }
            let rates = cells
                .iter()
                .map(|&(b, n)| {
                    let v = by_cell.get(&(b, n)).ok_or(Error::MissingCell { b, n })?;
                    Ok(v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            let backend = records
                .first()
                .map_or(CSV_BACKEND.to_string(), |r| r.backend.clone());
            (
                MatrixMetadata::new(backend, grid.warmup_rounds, grid.measure_rounds),
                rates,
            )
        }
    };
    let mut m = MissMatrix::empty(metadata, grid.b_values.clone(), grid.n_values.clone())?;
    for (&(b, n), rate) in cells.iter().zip(rates) {
        m.set(b, n, Some(rate))?;
    }
    Ok(m)
}

/// Runs every grid against `backend` and merges the results.
pub fn run_sweeps(backend: &Backend, grids: &[SweepGrid]) -> Result<MissMatrix> {
    let parts = grids
        .iter()
        .map(|g| run_sweep(backend, g))
        .collect::<Result<Vec<_>>>()?;
    merge(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a72() -> BtbGeometry {
        BtbGeometry::with_sets(2048, 2, 4).unwrap()
    }

    #[test]
    fn single_cell_sweep() {
        let grid = SweepGrid::new(vec![1], vec![8]).unwrap();
        let m = run_sweep(&Backend::simulator(a72()), &grid).unwrap();
        assert_eq!(m.cells(), &[Some(0.0)]);
    }

    #[test]
    fn capacity_preset_cells() {
        let m = run_sweep(&Backend::simulator(a72()), &SweepGrid::capacity_preset()).unwrap();
        assert_eq!(m.present_count(), 64);
        assert_eq!(m.get(4096, 16), Some(0.0));
        assert_eq!(m.get(5120, 16), Some(0.6));
    }

    #[test]
    fn dataset_echoes_records() {
        let recs = ingest_csv_str("1,8,0\n1,16,1\n2,8,1\n2,16,2\n").unwrap().records;
        let grid = SweepGrid::new(vec![1, 2], vec![8, 16]).unwrap();
        let m = run_sweep(&Backend::Dataset { records: recs }, &grid).unwrap();
        assert_eq!(m.cells(), &[Some(0.0), Some(1.0), Some(0.5), Some(1.0)]);
        assert_eq!(m.metadata.backend, "csv");
    }

    #[test]
    fn dataset_missing_cell_named() {
        let recs = ingest_csv_str("1,8,0\n1,16,1\n2,8,1\n").unwrap().records;
        let grid = SweepGrid::new(vec![1, 2], vec![8, 16]).unwrap();
        let err = run_sweep(&Backend::Dataset { records: recs }, &grid).unwrap_err();
        assert!(matches!(err, Error::MissingCell { b: 2, n: 16 }));
        assert!(err.to_string().contains("B=2, N=16"));
    }

    #[test]
    fn grid_validation() {
        assert!(SweepGrid::new(vec![], vec![8]).is_err());
        assert!(SweepGrid::new(vec![1], vec![12]).is_err());
        assert!(SweepGrid::new(vec![1], vec![4]).is_err());
        assert!(SweepGrid::new(vec![2, 1], vec![8]).is_err());
        let g = SweepGrid::new(vec![1], vec![8]).unwrap();
        assert!(g.with_rounds(Rounds { warmup: 1, measure: 0 }).is_err());
    }

    #[test]
    fn preset_ranges() {
        let c = SweepGrid::capacity_preset();
        assert_eq!(c.b_values().len(), 8);
        assert_eq!((c.n_values()[0], *c.n_values().last().unwrap()), (8, 1024));
        let s = SweepGrid::set_index_preset();
        assert_eq!((s.b_values()[0], *s.b_values().last().unwrap()), (1, 512));
        assert_eq!((s.n_values()[0], *s.n_values().last().unwrap()), (1 << 5, 1 << 19));
        assert_eq!("both".parse::<Preset>().unwrap().grids().len(), 2);
        assert!("nope".parse::<Preset>().is_err());
    }

    #[test]
    fn hypothesis_grid_bounds() {
        let g = SweepGrid::for_hypothesis(&a72()).unwrap();
        assert_eq!(*g.b_values().last().unwrap(), 6144);
        assert!(g.b_values().contains(&4096) && g.b_values().contains(&5120));
        assert_eq!(*g.n_values().last().unwrap(), 1 << 17);
    }

    #[test]
    fn sequential_equals_parallel() {
        let grid = SweepGrid::new(vec![1, 3, 700, 4100], vec![8, 64, 1 << 15]).unwrap();
        let backend = Backend::Simulator {
            geometry: a72(),
            noise: NoiseModel::Poisson { lambda: 0.05, seed: 11 },
        };
        let a = run_sweep_with(&backend, &grid, Execution::Sequential).unwrap();
        let b = run_sweep_with(&backend, &grid, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
