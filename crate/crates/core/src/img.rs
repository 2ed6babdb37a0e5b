//! Minimal in-memory image buffers (f64, row-major).

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

/// RGB image with channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Depth image in meters; `0.0` or non-finite marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for v in 0..height {
            for u in 0..width {
                img.set(u, v, rgb);
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Bilinear resize; used to bring keyframe images down to the rendering
    /// resolution. Sampling is aligned so that pixel centers map linearly.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = ColorImage::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for v in 0..height {
            for u in 0..width {
                let x = (u as f64 + 0.5) * sx - 0.5;
                let y = (v as f64 + 0.5) * sy - 0.5;
                out.set(u, v, self.sample_bilinear(x, y));
            }
        }
        out
    }

    fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let x = x.max(0.0).min(self.width as f64 - 1.0);
        let y = y.max(0.0).min(self.height as f64 - 1.0);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            rgb[c] = top * (1.0 - fy) + bot * fy;
        }
        rgb
    }
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, d: f64) -> Self {
        Self {
            width,
            height,
            data: vec![d; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, d: f64) {
        self.data[v * self.width + u] = d;
    }

    /// Nearest-neighbor resize. Depth must not be interpolated across
    /// occlusion boundaries, so no bilinear here.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = DepthImage::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for v in 0..height {
            for u in 0..width {
                let x = (((u as f64 + 0.5) * sx) as usize).min(self.width - 1);
                let y = (((v as f64 + 0.5) * sy) as usize).min(self.height - 1);
                out.set(u, v, self.get(x, y));
            }
        }
        out
    }
}
