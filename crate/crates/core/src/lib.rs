//! Pseudo-label mining for point-prompted instance segmentation.
//!
//! Given per-instance proposal bags (candidate masks and boxes keyed to
//! annotated points), this crate selects and refines pseudo boxes and soft
//! pseudo masks through a staged pipeline:
//!
//! 1. [`selection`] — bag scoring with parallel classification/instance
//!    heads plus a point-distance penalty, yielding an initial box per
//!    instance.
//! 2. [`refinement`] — positive/negative bag augmentation, a refinement
//!    head trained against the augmented bags, and a box-mining step that
//!    merges top-scored candidates into an expanded box.
//! 3. [`completeness`] — self-distilled completeness heads that re-score
//!    proposals by predicted spatial coverage.
//! 4. [`affinity`] — minimum-spanning-tree and local Gaussian filtering
//!    that turns matched masks into refined soft pseudo masks.
//!
//! [`synth`] generates deterministic benchmark corpora with planted
//! failure modes, [`metrics`] reports the granularity diagnostics, and
//! [`pipeline`] wires everything behind the CLI surface.

pub mod affinity;
pub mod completeness;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod mat;
pub mod metrics;
pub mod pipeline;
pub mod refinement;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
