//! Full-reference perceptual image quality built around a
//! contrast-sensitivity attention map.
//!
//! The crate computes a spatial attention map from the band of spatial
//! frequencies the human eye is most sensitive to ([`csf`]), extracts deep
//! features with a small convolutional inference engine ([`features`]),
//! and evaluates perceptual and contextual losses with and without that
//! attention ([`losses`]). [`metrics`], [`distort`] and [`oqa`] provide the
//! distortion-axis metrics, synthetic distortion corpora and the
//! objective-vs-subjective correlation harness used to validate the losses.

pub mod csf;
pub mod distort;
pub mod error;
pub mod features;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod oqa;
pub mod rng;
pub mod tensor;
pub mod tnsr;

pub use error::{Error, Result};
pub use image::{load_image, save_image, ColorSpace, PlanarImage};
pub use tensor::{resize_bilinear, Tensor};
