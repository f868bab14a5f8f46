//! Joint graph learning and matching.
//!
//! Stacked self-attention layers learn a weighted graph over each keypoint
//! set while cross-attention layers, normalized with Sinkhorn iterations,
//! produce a soft assignment between the two sets. Training uses a weighted
//! binary cross-entropy on the soft assignment; inference discretizes it
//! with the Hungarian method. The self-attention matrices can be averaged
//! into category-level graph patterns.

pub mod assignment;
pub mod attention;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod pattern;
pub mod synthdata;
pub mod training;

pub use error::{GlamError, Result};
