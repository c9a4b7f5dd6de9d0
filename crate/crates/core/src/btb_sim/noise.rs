use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sweep::MeasurementRecord;

/// Extra mispredictions layered on top of a simulated measurement, standing in
/// for interrupt-induced mispredictions on real hardware.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    #[default]
    Off,
    /// Adds a Poisson(`lambda` x executed measured branches) count.
    Poisson { lambda: f64, seed: u64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Poisson { lambda, .. } if !(lambda >= 0.0 && lambda.is_finite()) => Err(
                Error::Noise(format!("lambda must be finite and non-negative, got {lambda}")),
            ),
            _ => Ok(()),
        }
    }

    /// The same model with its seed mixed with a grid coordinate, so every
    /// sweep cell draws an independent but reproducible stream.
    pub fn for_cell(&self, branch_count: u64, stride: u64) -> NoiseModel {
        match *self {
            NoiseModel::Off => NoiseModel::Off,
            NoiseModel::Poisson { lambda, seed } => NoiseModel::Poisson {
                lambda,
                seed: splitmix64(splitmix64(seed ^ branch_count) ^ stride),
            },
        }
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn inject_noise(record: &MeasurementRecord, model: &NoiseModel) -> Result<MeasurementRecord> {
    model.validate()?;
    let NoiseModel::Poisson { lambda, seed } = *model else {
        return Ok(record.clone());
    };
    let mean = lambda * (record.branch_count * u64::from(record.measure_rounds)) as f64;
    if mean == 0.0 {
        return Ok(record.clone());
    }
    let dist = Poisson::new(mean).map_err(|e| Error::Noise(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra: f64 = dist.sample(&mut rng);
    let mut noisy = record.clone();
    noisy.mispredictions += extra as u64;
    Ok(noisy)
}
