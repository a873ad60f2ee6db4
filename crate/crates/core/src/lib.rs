//! Center-collapse regularization and neural-collapse diagnostics.
//!
//! - [`etf`]: simplex equiangular tight frames and their verification.
//! - [`metrics`]: class statistics, cosine statistics, imbalance factor,
//!   Pearson correlation and frequency splits.
//! - [`loss`]: pixel cross-entropy, center pooling, the center-collapse loss
//!   and their analytic gradients.
//! - [`toy`]: synthetic imbalanced scenes and a two-layer feature extractor.
//! - [`harness`]: training loop, ablation grid and loss-weight sweep.
//! - [`gradcheck`]: finite-difference verification suites.
//! - [`io`]: text, JSON and CSV file formats.

pub mod error;
pub mod etf;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod toy;

pub use error::{Error, Result};
