//! Simulation and autofocus compensation of rigid head motion in circular
//! cone-beam CT.

pub mod autofocus;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod io;
pub mod iqm;
pub mod motion;
pub mod phantom;
pub mod recon;
pub mod regressor;
pub mod spline;
pub mod stats;

pub use error::{Error, Result};
