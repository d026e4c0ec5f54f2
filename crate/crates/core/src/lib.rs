//! Event-plus-frame video interpolation with adaptive residual-flow refinement.
//!
//! The pipeline estimates per-pixel motion splines from boundary frames plus an
//! event voxel grid, warps the boundary frames to an arbitrary intermediate
//! time, gates image sub-regions into dynamic/static classes to decide where a
//! residual-flow pass is worth its cost, refines dynamic regions, and fuses
//! everything with a windowed-attention synthesis network.

pub mod config;
pub mod error;
pub mod events;
pub mod flow_net;
pub mod fusion;
pub mod gating;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod params;
pub mod residual;
pub mod splines_warp;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
