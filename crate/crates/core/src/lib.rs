//! Multitask bird's-eye-view perception.
//!
//! One shared camera-to-BEV feature extractor (backbone, depth estimator,
//! lift-splat view projector, temporal fusor, BEV encoder) feeds four task
//! heads: 3D detection, map segmentation, lane detection and occupancy.
//! Training follows a three-stage progressive schedule with GradNorm loss
//! balancing in the final stage. A procedural multiview world generator
//! provides exact ground truth for every task.
//!
//! Runnable walkthroughs live under `examples/`; the `quadbev` binary wraps
//! the same functionality as subcommands.

pub mod autograd;
pub mod bevgeom;
pub mod cli;
pub mod codec;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod kv;
pub mod losses;
pub mod nets;
pub mod ops;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
