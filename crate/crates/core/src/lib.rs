//! Inverse conditional permutation (ICP) resampling of sensitive attributes,
//! adversarial equalized-odds training, kernel partial correlation, and the
//! permutation test for equalized-odds violation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, experiment
//! drivers and the command line live in the `fairicp` companion crate.
#![no_std]
#![allow(clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod density;
pub mod eotest;
pub mod error;
pub mod kpc;
pub mod linalg;
pub mod nn;
pub mod perm;
pub mod rng;
pub mod trainer;

pub use data::{AttrKind, Dataset, Response, SimSpec, SimVariant, Task};
pub use density::{CondDensity, ConditionalDensity, Direction, Penalty};
pub use eotest::{eo_test, EoTestConfig, EoTestResult, KpcStatistic};
pub use error::{Error, Result};
pub use kpc::{kpc_estimate, KpcConfig};
pub use linalg::Matrix;
pub use perm::{PermMethod, PermutedCopy, RestrictedPermLaw};
pub use trainer::{train_erm, train_fairicp, Arch, Discriminator, PredictorModel, TrainConfig, TradeoffPoint};
