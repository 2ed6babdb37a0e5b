//! A single RGBD observation.

use crate::camera::Intrinsics;
use crate::img::{ColorImage, DepthImage};

/// One RGBD frame: color, depth in meters, intrinsics and an index/timestamp.
#[derive(Debug, Clone)]
pub struct Frame {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub intrinsics: Intrinsics,
    pub index: usize,
    pub timestamp: f64,
}

impl Frame {
    /// Returns a copy resampled to `width` x `height`, with intrinsics scaled
    /// to match.
    pub fn resized(&self, width: usize, height: usize) -> Frame {
        let sx = width as f64 / self.color.width as f64;
        let sy = height as f64 / self.color.height as f64;
        Frame {
            color: self.color.resized(width, height),
            depth: self.depth.resized(width, height),
            intrinsics: self.intrinsics.scaled(sx, sy),
            index: self.index,
            timestamp: self.timestamp,
        }
    }
}
