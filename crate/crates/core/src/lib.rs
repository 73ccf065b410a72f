//! Online robust learning: a geometric-median filter over streaming batch
//! estimates, with robust PCA and robust linear regression as base learners,
//! a distributed-aggregation simulator and a seeded experiment harness.

pub mod dataset;
pub mod drl;
pub mod error;
pub mod experiment;
pub mod median;
pub(crate) mod par;
pub mod rlr;
pub mod rpca;
pub mod synth;
pub mod trimmed;

pub use error::{OrlError, Result};
pub use median::{Estimate, SpaceTag};

/// Whether this build runs the data-parallel code paths.
pub const fn parallel_enabled() -> bool {
    par::is_parallel()
}
