//! Keypoint detection with a selective state-space backbone, a hybrid
//! attention encoder and a soft-argmax coordinate head, together with a
//! procedural acupoint dataset and an evaluation harness.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradient_suite;
pub mod head;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod params;
pub mod train;

pub use error::{Error, Result};
pub use numerics::Tensor;
