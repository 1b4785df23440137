//! Structure-guided diffusion for 2D keypoint heatmaps.
//!
//! The crate trains a small conditioned decoder to denoise keypoint heatmaps
//! rendered from diffused coordinates, guided by image features masked around
//! keypoint and skeleton neighborhoods, then runs the reverse process at
//! inference to recover keypoints from pure noise.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod net;
pub mod sample;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
