//! Set-level outfit representation learning: a permutation-invariant
//! transformer over item features with a compatibility head and a
//! target-item head, trained end to end, plus the catalog index used for
//! complementary item retrieval.

pub mod checkpoint;
pub mod data;
pub mod distance;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod index;
pub mod losses;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
