//! Kriging with stationary, non-stationary and intrinsic non-stationary
//! Matérn covariance functions.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod bessel;
pub mod cls;
pub mod error;
pub mod experiments;
pub mod geo;
pub mod gp;
pub mod inference;
pub mod kernels;
pub mod optimize;
pub mod par;
pub mod pipeline;
pub mod spd;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere; stable across platforms and crate versions.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
