//! Pillar-based lidar 3D object detection.

pub mod augment;
pub mod container;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod kitti;
pub mod loss;
pub mod net;
pub mod pillars;
pub mod pipeline;
pub mod postproc;
pub mod rng;
pub mod targets;
pub mod types;

pub use error::{Error, Result};
