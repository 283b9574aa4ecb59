//! Sketch-to-normal-map generation with curvature-sampled point hints.
//!
//! The crate covers the whole pipeline: synthetic paired data ([`dataset`]),
//! curvature-band hint sampling ([`geometry`]), the U-Net generator and
//! U-Net critic ([`model`]), Wasserstein training with L1 and hint-mask
//! losses ([`training`]) and angular/L1/L2 evaluation ([`evaluation`]).

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod kv;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
