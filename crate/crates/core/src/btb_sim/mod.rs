//! Set-associative BTB simulator used as ground truth for the inference
//! pipeline.

mod geometry;
mod noise;
mod state;

pub use geometry::{AddressDecomposition, BtbGeometry, Replacement, VA_BITS};
pub use noise::{inject_noise, NoiseModel};
pub use state::{Access, BtbState, MAX_SIMULATED_SETS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gadget::BranchTrace;
use crate::sweep::MeasurementRecord;

/// Warm-up and measured executions of a gadget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rounds {
    pub warmup: u32,
    pub measure: u32,
}

impl Default for Rounds {
    fn default() -> Self {
        Self {
            warmup: 10,
            measure: 1,
        }
    }
}

impl Rounds {
    pub fn validate(&self) -> Result<()> {
        if self.measure == 0 {
            return Err(Error::Rounds("at least one measured round is required".into()));
        }
        Ok(())
    }
}

/// Runs `pcs` cyclically on a fresh BTB and returns the misses counted over
/// the measured rounds only.
pub fn replay_addresses(geometry: &BtbGeometry, pcs: &[u64], rounds: Rounds) -> Result<u64> {
    rounds.validate()?;
    if pcs.is_empty() {
        return Err(Error::EmptyGadget);
    }
    let mut state = BtbState::new(*geometry)?;
    for _ in 0..rounds.warmup {
        for &pc in pcs {
            state.access(pc);
        }
    }
    state.reset_counters();
    for _ in 0..rounds.measure {
        for &pc in pcs {
            state.access(pc);
        }
    }
    Ok(state.misses())
}

pub fn replay(geometry: &BtbGeometry, trace: &BranchTrace, rounds: Rounds) -> Result<MeasurementRecord> {
    let misses = replay_addresses(geometry, trace.pcs(), rounds)?;
    Ok(MeasurementRecord::new(
        trace.len() as u64,
        trace.stride(),
        misses,
        rounds.measure,
        "sim",
    ))
}
