//! Corruption-robust domain adaptation at desk scale.
//!
//! A teacher network is trained with a transfer loss to align source and
//! target features; a student initialised from it is then trained to map
//! worst-case perturbed target inputs (found by projected sign-gradient
//! ascent on the transfer loss) onto the teacher's clean features with a
//! contrastive objective. Robustness is scored with the corruption error
//! (CE/mCE) over 15 corruptions at 5 severities.

pub mod config;
pub mod corrupt;
pub mod data;
pub mod ddg;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::{Rng, Stream};
pub use tensor::Tensor;
