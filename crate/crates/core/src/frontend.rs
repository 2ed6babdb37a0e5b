//! Depth-frame preprocessing: reprojection to a 3D point cloud, optional
//! voxel downsampling, and per-point k-NN covariance estimation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

use crate::frame::Frame;
use crate::kdtree::KdTree;

/// Eigenvalue floor applied to every estimated covariance, in m².
pub const EIGENVALUE_FLOOR: f64 = 1e-6;

/// Points in the camera frame with parallel RGB colors in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Symmetric PSD 3×3 covariances parallel to a [`PointCloud`].
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    pub covariances: Vec<Matrix3<f64>>,
    /// Set when the cloud had fewer points than the requested neighbor count.
    pub low_support: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrontendError {
    /// Color and depth dimensions disagree.
    DimensionMismatch,
    /// No pixel produced a valid point (all depth invalid or out of range).
    DegenerateFrame,
    /// The cloud was empty where a non-empty one is required.
    EmptyCloud,
}

impl core::fmt::Display for FrontendError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FrontendError::DimensionMismatch => write!(f, "color and depth dimensions disagree"),
            FrontendError::DegenerateFrame => write!(f, "no valid depth in frame"),
            FrontendError::EmptyCloud => write!(f, "empty point cloud"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for FrontendError {}

/// Frontend parameters; defaults follow desk-scale RGBD sensing.
#[derive(Debug, Clone, Copy)]
pub struct FrontendConfig {
    /// Keep every `stride`-th pixel in both directions.
    pub stride: usize,
    /// Optional voxel filter edge length in meters, applied after reprojection.
    pub voxel_size: Option<f64>,
    /// Valid depth window in meters.
    pub z_min: f64,
    pub z_max: f64,
    /// Neighbor count for covariance estimation.
    pub knn: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            stride: 4,
            voxel_size: None,
            z_min: 0.1,
            z_max: 10.0,
            knn: 20,
        }
    }
}

/// Back-projects every `stride`-th pixel with valid depth into the camera frame.
pub fn reproject_depth(
    frame: &Frame,
    stride: usize,
    z_min: f64,
    z_max: f64,
) -> Result<PointCloud, FrontendError> {
    assert!(stride >= 1, "stride must be at least 1");
    if frame.color.width != frame.depth.width || frame.color.height != frame.depth.height {
        return Err(FrontendError::DimensionMismatch);
    }
    let mut cloud = PointCloud::default();
    let k = &frame.intrinsics;
    let mut v = 0;
    while v < frame.depth.height {
        let mut u = 0;
        while u < frame.depth.width {
            let d = frame.depth.get(u, v);
            if d.is_finite() && d >= z_min && d <= z_max {
                cloud.points.push(k.backproject(u as f64, v as f64, d));
                cloud.colors.push(Vector3::from(frame.color.get(u, v)));
            }
            u += stride;
        }
        v += stride;
    }
    if cloud.is_empty() {
        return Err(FrontendError::DegenerateFrame);
    }
    Ok(cloud)
}

/// Replaces all points within each occupied voxel by their centroid.
///
/// Idempotent for a fixed voxel size: centroids stay inside their voxel.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> PointCloud {
    assert!(voxel_size > 0.0, "voxel size must be positive");
    // BTreeMap keeps the output order independent of hash state.
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, Vector3<f64>, f64)> = BTreeMap::new();
    for (p, c) in cloud.points.iter().zip(cloud.colors.iter()) {
        let key = (
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        );
        let entry = cells
            .entry(key)
            .or_insert((Vector3::zeros(), Vector3::zeros(), 0.0));
        entry.0 += p;
        entry.1 += c;
        entry.2 += 1.0;
    }
    let mut out = PointCloud::default();
    for (_, (psum, csum, n)) in cells {
        out.points.push(psum / n);
        out.colors.push(csum / n);
    }
    out
}

/// Sample covariance (normalized by the neighbor count, self included) of the
/// k nearest neighbors of each point, with eigenvalues floored.
pub fn knn_covariances(
    cloud: &PointCloud,
    tree: &KdTree,
    k: usize,
) -> Result<CovarianceSet, FrontendError> {
    if cloud.is_empty() {
        return Err(FrontendError::EmptyCloud);
    }
    let low_support = cloud.len() < k;
    let mut covariances = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let neighbors = tree.knn(p, k);
        let n = neighbors.len() as f64;
        let mut mean = Vector3::zeros();
        for &(idx, _) in &neighbors {
            mean += cloud.points[idx];
        }
        mean /= n;
        let mut cov = Matrix3::zeros();
        for &(idx, _) in &neighbors {
            let d = cloud.points[idx] - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        covariances.push(floor_eigenvalues(&cov, EIGENVALUE_FLOOR));
    }
    Ok(CovarianceSet {
        covariances,
        low_support,
    })
}

/// Clamps eigenvalues of a symmetric matrix from below and reconstructs.
pub fn floor_eigenvalues(cov: &Matrix3<f64>, floor: f64) -> Matrix3<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut out = Matrix3::zeros();
    for i in 0..3 {
        let lambda = eig.eigenvalues[i].max(floor);
        let v = eig.eigenvectors.column(i);
        out += lambda * v * v.transpose();
    }
    (out + out.transpose()) * 0.5
}

/// Full frontend pass: reproject, optionally voxel-filter, index, estimate covariances.
pub fn build_cloud(
    frame: &Frame,
    config: &FrontendConfig,
) -> Result<(PointCloud, CovarianceSet, KdTree), FrontendError> {
    let mut cloud = reproject_depth(frame, config.stride, config.z_min, config.z_max)?;
    if let Some(voxel) = config.voxel_size {
        cloud = voxel_downsample(&cloud, voxel);
    }
    let tree = KdTree::build(&cloud.points);
    let covs = knn_covariances(&cloud, &tree, config.knn)?;
    Ok((cloud, covs, tree))
}
