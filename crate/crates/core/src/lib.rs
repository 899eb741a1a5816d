//! Subgroup-conditioned distributionally robust training for segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`cohort`]: samples, cohorts, subgroup partitions and loss vectors.
//! - [`synth`]: seeded synthetic cohorts with a planted hard subset inside one subgroup.
//! - [`model`]: a pixel-wise segmentation network with an optional subgroup-routed
//!   mixture-of-experts adaptation layer and exact per-sample gradients.
//! - [`robust`]: KL-ball worst-case risk (dual solver, exponential tilting, primal oracle).
//! - [`objectives`]: ERM, per-subgroup robust aggregation, GroupDRO and the penalty variant.
//! - [`metrics`]: Dice/IoU, equity-scaled metrics, worst-group readout, bootstrap intervals.
//! - [`trainer`]: deterministic momentum gradient descent and evaluation.
//! - [`oracle`], [`report`], [`study`], [`experiment`]: verification sweeps, report
//!   emission, the ablation study and the experiment configuration file.
//!
//! Per-sample work is data-parallel through [`par`]; with the `parallel` feature
//! disabled everything runs sequentially and produces bit-identical results.

pub mod cohort;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod par;
pub mod report;
pub mod rng;
pub mod robust;
pub mod study;
pub mod synth;
pub mod trainer;

pub use cohort::{
    build_partition, validate_cohort, Cohort, GroupPartition, LossVector, Sample, SubgroupId,
    Violation,
};
pub use error::{Error, Result};
pub use par::Execution;
