//! File formats, dataset folders, the training driver, inference and
//! benchmarking on top of [`pnunet_core`], plus the `pnunet` command line.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod gendata;
pub mod io;
pub mod report;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use pnunet_core as core;
