//! Seeded experiment drivers: regret sweeps over a hard class and
//! best-policy-identification runs, with the empirical checks that go with
//! them.
//!
//! Every (instance, replication) cell draws from its own substream of the
//! base seed and results are folded in grid order, so outputs do not depend
//! on the number of worker threads.

pub mod bpi;
pub mod learners;
pub mod regret;

use thiserror::Error;

use crate::bounds::BoundError;
use crate::instances::InstanceError;
use crate::mdp::MdpError;

pub use bpi::{run_bpi_sweep, BpiInstanceRecord, BpiRunResult, BpiSweepConfig, BPI_CSV_HEADER};
pub use learners::{builtin_learners, LearnerSpec, OptimisticQ, UniformAgent};
pub use regret::{
    adversarial_instance, averaging_inequality_check, run_regret_sweep, AveragingReport, InstanceRecord,
    RegretSweepConfig, SweepResult, REGRET_CSV_HEADER,
};

/// Version of the CSV layouts and summary JSON documents.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}
