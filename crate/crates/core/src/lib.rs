//! 4D Gaussian splatting with temporal rectification of scales and rotations
//! and per-frame adaptive density control.

pub mod checkpoint;
pub mod deform;
pub mod density;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod render;
pub mod rectifier;
pub mod scene;
pub mod train;
pub mod ssm;

pub use error::{Error, Result};
