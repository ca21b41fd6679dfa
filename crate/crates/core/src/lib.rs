//! Dynamic neural fields with semantic and attention channels, and
//! saliency-aware scene decomposition.

pub mod camera;
pub mod cluster;
pub mod encoding;
pub mod error;
pub mod field;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod postprocess;
pub mod pyramid;
pub mod render;
pub mod scene_io;
pub mod synth;
pub mod tensor_io;
pub mod train;

pub use error::{Error, Result};
