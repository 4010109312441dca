//! Anatomy-driven pathology detection.
//!
//! Pathology boxes are predicted by reusing anatomical region boxes as
//! proxies: each region gets pathology probabilities from a shared classifier,
//! regions above a probability threshold propose their own box for the
//! pathology, and overlapping proposals are merged by weighted box fusion.
//!
//! The crate covers everything downstream of the image backbone: the region
//! heads and both training objectives (anatomy-level and multiple-instance),
//! the inference pipeline, detection metrics, a synthetic scene generator and
//! the JSONL/CSV file formats used by the `adpd` command-line tool.

// Range checks are written `!(x >= 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod head;
pub mod inference;
pub mod io;
pub mod losses;
pub mod synth;

pub use error::{Error, Result};
