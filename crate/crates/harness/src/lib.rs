//! Runnable system around `pairsplat`: synthetic scenes, training,
//! evaluation, ablations, regularization and file formats.

pub mod ablation;
pub mod attention;
pub mod error;
pub mod io;
pub mod metrics;
pub mod ply;
pub mod regularizer;
pub mod scene;
pub mod train;

pub use error::{HarnessError, Result};
