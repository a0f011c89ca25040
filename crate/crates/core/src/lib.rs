//! Laboratory for grokking and representation learning on toy group tasks.
//!
//! The crate is organised bottom-up:
//!
//! - [`domain`]: tasks, samples and seeded train/validation splits
//! - [`parallelogram`]: permissible/realized parallelogram sets, RQI,
//!   augmentation, predicted accuracy and the ideal-model closures
//! - [`lintheory`]: constraint matrices, nullity, the Hessian spectrum and
//!   the Monte-Carlo critical-fraction curve
//! - [`efftheory`]: effective loss, its gradient flow and closed-form solution
//! - [`trainer`]: from-scratch embedding + MLP decoder training and phase
//!   classification
//! - [`analysis`]: PCA, explained-variance entropy, RQI/accuracy tables
//! - [`sweep`]: resumable hyperparameter grids producing phase diagrams

pub mod analysis;
pub mod domain;
pub mod efftheory;
pub mod error;
pub mod linalg;
pub mod lintheory;
pub mod par;
pub mod parallelogram;
pub mod rng;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
