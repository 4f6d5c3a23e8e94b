//! Locality-aware multi-context segmentation for ultra-high-resolution rasters.
//!
//! The pipeline tiles a large image into overlapping square patches, segments
//! each patch with attention over several rescaled contexts, merges the local
//! probability maps into a full-resolution mask and optionally refines every
//! patch against the merged (crude) mask.
//!
//! Everything runs on a small dense tensor type with reverse-mode autodiff
//! ([`tensor`]), so training and verification need no external ML runtime.

pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor, Var};
