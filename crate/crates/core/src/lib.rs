//! Physics-driven data augmentation and consistency training for accelerated
//! multi-coil MRI reconstruction.
//!
//! The crate covers the SENSE forward model, noise and motion perturbations of
//! k-space, spatial augmentations that act on images and coil maps together,
//! invariant and equivariant consistency losses with difficulty curricula, a
//! small U-Net with hand-written backpropagation, image-quality metrics and a
//! seeded out-of-distribution evaluation harness, all running on synthetic
//! phantoms.

pub mod augment;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod io;
pub mod model;
pub mod mri;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{fft2c, ifft2c, ComplexTensor, C64};
