//! Multi-view keypoint-driven face video compression.
//!
//! A target frame is reconstructed from a small set of source views: per-frame
//! keypoints drive a dense backward flow per view, warped/masked view features
//! are fused by a pooling or cross-view self-attention aggregator, and a
//! generator produces the output image. Only the keypoints are transmitted per
//! frame (10 points as binary16 pairs, 320 bits); source views are sent once
//! and their cost is amortized over the session.

// Index loops over strided multi-array math stay as plain ranges.
#![allow(clippy::needless_range_loop)]

pub mod aggregation;
pub mod bitstream;
pub mod config;
pub mod error;
pub mod h264;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod ops;
pub mod pipeline;
pub mod rd;
pub mod selection;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
