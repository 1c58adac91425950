//! Inference engine: encoder, backbone, head and their parameters.

pub mod model;
pub mod ops;
pub mod params;

pub use model::{HeadMaps, Network};
pub use params::{init_params, load_params, save_params, Architecture, BlockSpec, ParamSet, UpSpec};
