//! Branch target buffer reverse engineering.
//!
//! The pipeline: build probe gadgets ([`gadget`]), run a `(B, N)` grid against
//! a simulated BTB or ingested hardware counts ([`sweep`], [`btb_sim`]), then
//! recover capacity, set-index bits and associativity from the miss-rate
//! matrix ([`infer`]). [`report`] renders matrices and findings.
//!
//! Bit positions are 0-based (LSB = bit 0) throughout.

pub mod btb_sim;
pub mod error;
pub mod gadget;
pub mod infer;
pub mod par;
pub mod report;
pub mod sweep;

pub use btb_sim::{BtbGeometry, NoiseModel, Replacement, Rounds};
pub use error::{Error, Result};
pub use gadget::{BranchTrace, GadgetSpec};
pub use infer::{infer_all, InferenceConfig, InferenceReport};

pub use par::Execution;
pub use sweep::{run_sweep, Backend, MeasurementRecord, MissMatrix, SweepGrid};
