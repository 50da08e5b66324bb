//! Reconstruction-based image anomaly detection with positive/negative
//! noise masks.
//!
//! A skip-connected encoder–decoder is trained to remove injected uniform
//! noise from normal images. The injected noise is shaped by two residual
//! masks that are periodically regenerated from the current model: a
//! positive mask taken from anomalous samples concentrates noise where
//! defects occur, a negative gate taken from normal samples suppresses noise
//! where normal images always deviate. At inference the anomaly map is the
//! absolute difference between an input and its reconstruction.
//!
//! This crate is `no_std` + `alloc`. Everything here is a pure function of
//! its inputs and seeds; file formats, timing and the command line live in
//! the `pnunet` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baseline;
pub mod detector;
pub mod error;
pub mod imaging;
mod layers;
mod math;
pub mod noise;
pub mod optim;
pub mod params;
pub mod reconstructor;
pub mod ssim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Image, Tensor};
