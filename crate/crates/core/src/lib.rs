//! Uncertainty-aware U-Net emulation of gridded bias fields.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod losses;
pub mod model;
pub mod train;
pub mod uq;

pub use error::{Error, Result};
pub use grid::{Grid, Mask, Unit};
