//! Iterative multi-scale feature aggregation (IMFA) for DETR-style detectors.
//!
//! The crate is self-contained: a reverse-mode autodiff kernel
//! ([`tensor`]), a toy feature-pyramid backbone ([`pyramid`]), transformer
//! building blocks ([`transformer`]), the staged detector with sparse
//! keypoint-guided multi-scale sampling ([`imfa`]), the set-matching
//! objective ([`matching`]), a synthetic scene generator ([`data`]), and the
//! training/evaluation harness behind the `imfa` command line tool.

pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod imfa;
pub mod matching;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod visualize;

pub use error::{Error, Result};
