//! Mixture of Virtual-Kernel Experts (MVKE) for multi-task user tagging.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffgraph`]: dense tensors, a reverse-mode tape and a finite-difference checker.
//! - [`model`]: the MVKE architecture (VKE/VKG, task routing) and the plain two-tower baseline.
//! - [`data`]: the synthetic click/conversion generator with its ground truth, and dataset I/O.
//! - [`train`]: joint multi-task loss, Adam and the epoch loop.
//! - [`eval`]: AUC, evaluation reports, the expert-count sweep and gate-weight export.
//! - [`serve`]: cached fast prediction, exact top-k tag assignment and the cost benchmark.
//! - [`cli`]: the `mvke` command-line entry point.

pub mod cli;
pub mod data;
pub mod diffgraph;
pub mod error;
pub mod eval;
pub mod model;
pub mod serve;
pub mod train;

pub use error::{Error, Result};
