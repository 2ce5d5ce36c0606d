//! Lightweight monocular 3D human pose estimation.
//!
//! The crate bundles the MoVNect network family with a small tensor engine,
//! the teacher-student mimicry losses and a toy-scale trainer, heatmap and
//! location-map decoding with bounding-box tracking, and the skeletal
//! post-processing chain (1€ filtering, global position recovery, inverse
//! kinematics with joint limits).

pub mod bench;
pub mod decode;
pub mod distill;
pub mod error;
pub mod network;
pub mod pipeline;
pub mod postprocess;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
