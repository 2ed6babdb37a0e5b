//! Core algorithms for a coupled RGBD SLAM system in which Generalized-ICP
//! tracking and Gaussian-splatting mapping share a single Gaussian map.
//!
//! The crate is `no_std`-compatible (with `alloc`); everything here is pure
//! computation over in-memory data. Dataset loading, image codecs, file
//! formats, threading and the CLI live in the companion `splatslam` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod camera;
pub mod frame;
pub mod frontend;
pub mod gicp;
pub mod img;
pub mod kdtree;
pub mod map;
pub mod mapping;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod ssim;
pub mod synth;
pub mod tracking;
pub mod se3;

pub use camera::Intrinsics;
pub use frame::Frame;
pub use se3::Pose;
