//! Rotation-invariant convolutions on point clouds.
//!
//! The crate covers geometry helpers, sampling and neighborhood search, the
//! rotation-invariant local descriptors, a small reverse-mode autodiff
//! substrate, the convolution operator, classification and segmentation
//! networks, synthetic data, and training/evaluation.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod geom;
pub mod model;
mod par;
pub mod rif;
pub mod riconv;
pub mod sampling;
pub mod seed;

pub use error::{Error, Result};
