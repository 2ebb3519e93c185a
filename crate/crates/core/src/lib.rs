//! Masked-reconstruction toolkit core.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! image tensors and mask compositing, differentiable losses with analytic
//! gradients, full-reference quality metrics, a small convolutional VAE with
//! hand-written backpropagation, Adam, a procedural face generator and the
//! finite-difference verification suite. File formats, datasets and the
//! command line live in the `maskvae` companion crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod synthface;
pub mod vae;

pub use error::{Error, Result};
pub use image::{binarize_mask, composite, FaceMask, ImageTensor};
pub use scalar::Scalar;
