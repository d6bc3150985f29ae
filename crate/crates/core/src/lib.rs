//! Landmark detection for physical tools trained on synthetic images.
//!
//! The crate covers the whole pipeline: a cut-and-paste [`compositor`] that
//! produces labelled training images, Gaussian [`heatmap`] targets, a
//! frozen-backbone heatmap network with intermediate supervision
//! ([`model`]), the [`training`] loop, heatmap [`inference`] and PCK based
//! [`evaluation`]. The [`cli`] module wires everything into the `kpforge`
//! binary.

pub mod cli;
pub mod compositor;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod heatmap;
pub mod imaging;
pub mod inference;
pub mod model;
pub mod training;

pub use error::{Error, Result};
