//! The single shared Gaussian map: tracking reads it as registration targets,
//! mapping optimizes its parameters, and keyframes insert new primitives.

use alloc::vec::Vec;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

use crate::frontend::PointCloud;
use crate::gicp::CovDecomposition;
use crate::kdtree::KdTree;
use crate::se3::Pose;

/// Smallest representable Gaussian standard deviation, meters.
pub const MIN_SCALE: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapError {
    /// Scale alignment requires a strictly positive depth.
    NonPositiveDepth,
    /// Parallel parameter arrays of different lengths.
    LengthMismatch,
}

impl core::fmt::Display for MapError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MapError::NonPositiveDepth => write!(f, "depth must be positive for scale alignment"),
            MapError::LengthMismatch => write!(f, "parameter arrays have mismatched lengths"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MapError {}

/// Map behavior knobs; defaults are room-scale.
#[derive(Debug, Clone, Copy)]
pub struct MapConfig {
    /// Opacity assigned to newly inserted primitives (stored as a logit).
    pub init_opacity: f64,
    /// Candidates closer than this to an existing primitive are not inserted.
    pub overlap_dist: f64,
    /// Depth exponent of scale alignment.
    pub scale_exponent: f64,
    /// Rough diameter of the mapped volume, meters.
    pub scene_extent: f64,
    pub prune_opacity: f64,
    /// Removal threshold on max(scale)/min(scale). Regularized insertion
    /// produces flat discs whose ratio tracks patch size over the minor-axis
    /// floor; coarse clouds need this far above the default.
    pub prune_aniso: f64,
    /// Absolute scale cutoff; `None` means 10% of the scene extent.
    pub prune_abs_scale: Option<f64>,
    /// Mapping iterations between prune passes, after the warmup.
    pub prune_interval: usize,
    pub prune_warmup: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            init_opacity: 0.7,
            // Matches the tracking correspondence gate.
            overlap_dist: 0.5,
            scale_exponent: 1.5,
            scene_extent: 5.0,
            prune_opacity: 0.05,
            prune_aniso: 60.0,
            prune_abs_scale: None,
            prune_interval: 50,
            prune_warmup: 100,
        }
    }
}

impl MapConfig {
    pub fn prune_abs_scale(&self) -> f64 {
        self.prune_abs_scale.unwrap_or(0.1 * self.scene_extent)
    }
}

/// Which primitives a snapshot exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotScope {
    /// Only primitives inserted by tracking keyframes (registration targets).
    TrackingTargets,
    /// Every primitive; used for overlap filtering and rendering checks.
    FullMap,
}

/// Immutable view of map Gaussians with a spatial index over the means.
#[derive(Debug, Clone)]
pub struct MapSnapshot {
    pub means: Vec<Vector3<f64>>,
    /// Covariances materialized from the stored rotation+scale parameters.
    pub covariances: Vec<Matrix3<f64>>,
    /// Axis/scale decompositions (scales descending), for cheap regularization.
    pub decomps: Vec<CovDecomposition>,
    pub index: KdTree,
    pub version: u64,
    /// Set when taken from an empty map (bootstrap frame).
    pub bootstrap: bool,
}

/// Structure-of-arrays store of 3D Gaussians.
///
/// Scales live in log-space and opacities in logit-space so optimization is
/// unconstrained; covariances reconstruct as `R * diag(exp(ls))^2 * R^T`.
#[derive(Debug, Clone, Default)]
pub struct GaussianMap {
    means: Vec<Vector3<f64>>,
    rotations: Vec<UnitQuaternion<f64>>,
    log_scales: Vec<Vector3<f64>>,
    colors: Vec<Vector3<f64>>,
    opacity_logits: Vec<f64>,
    /// Primitives inserted by tracking keyframes serve as registration targets.
    is_target: Vec<bool>,
    version: u64,
}

/// Mutable access to all parameter arrays for one optimization step.
pub struct ParamsMut<'a> {
    pub means: &'a mut [Vector3<f64>],
    pub rotations: &'a mut [UnitQuaternion<f64>],
    pub log_scales: &'a mut [Vector3<f64>],
    pub colors: &'a mut [Vector3<f64>],
    pub opacity_logits: &'a mut [f64],
}

/// Result of a prune pass; `kept` maps new indices to pre-prune indices so
/// optimizer state can be compacted in lockstep.
#[derive(Debug, Clone)]
pub struct PruneResult {
    pub removed: usize,
    pub kept: Vec<u32>,
}

/// Divides the scales of an ellipse-regularized decomposition by `z^p`.
pub fn scale_align(
    decomp: &CovDecomposition,
    z: f64,
    p: f64,
) -> Result<CovDecomposition, MapError> {
    if z <= 0.0 {
        return Err(MapError::NonPositiveDepth);
    }
    Ok(CovDecomposition {
        axes: decomp.axes,
        scales: decomp.scales * z.powf(-p),
    })
}

/// True entries mark source means farther than `dist_threshold` from every
/// snapshot mean (safe to insert). An empty snapshot admits everything.
pub fn overlap_filter(
    world_means: &[Vector3<f64>],
    snapshot: &MapSnapshot,
    dist_threshold: f64,
) -> Vec<bool> {
    mask_against_index(world_means, &snapshot.index, dist_threshold)
}

fn mask_against_index(
    world_means: &[Vector3<f64>],
    index: &KdTree,
    dist_threshold: f64,
) -> Vec<bool> {
    world_means
        .iter()
        .map(|p| match index.nearest(p) {
            Some((_, dist)) => dist > dist_threshold,
            None => true,
        })
        .collect()
}

fn reconstruct_cov(rotation: &UnitQuaternion<f64>, log_scales: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation.to_rotation_matrix().into_inner();
    let d = Matrix3::from_diagonal(&log_scales.map(|l| {
        let s = l.exp();
        s * s
    }));
    r * d * r.transpose()
}

fn sorted_decomp(rotation: &UnitQuaternion<f64>, log_scales: &Vector3<f64>) -> CovDecomposition {
    let r = rotation.to_rotation_matrix().into_inner();
    let s = log_scales.map(|l| l.exp());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).expect("finite scales"));
    let mut axes = Matrix3::zeros();
    let mut scales = Vector3::zeros();
    for (col, &src) in order.iter().enumerate() {
        axes.set_column(col, &r.column(src));
        scales[col] = s[src];
    }
    if axes.determinant() < 0.0 {
        let flipped = -axes.column(2).clone_owned();
        axes.set_column(2, &flipped);
    }
    CovDecomposition { axes, scales }
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn means(&self) -> &[Vector3<f64>] {
        &self.means
    }

    pub fn rotations(&self) -> &[UnitQuaternion<f64>] {
        &self.rotations
    }

    pub fn log_scales(&self) -> &[Vector3<f64>] {
        &self.log_scales
    }

    pub fn colors(&self) -> &[Vector3<f64>] {
        &self.colors
    }

    pub fn opacity_logits(&self) -> &[f64] {
        &self.opacity_logits
    }

    pub fn is_target(&self) -> &[bool] {
        &self.is_target
    }

    pub fn target_count(&self) -> usize {
        self.is_target.iter().filter(|&&t| t).count()
    }

    /// Rebuilds a map from its parameter arrays (checkpoint loading).
    #[allow(clippy::too_many_arguments)]
    pub fn from_arrays(
        means: Vec<Vector3<f64>>,
        rotations: Vec<UnitQuaternion<f64>>,
        log_scales: Vec<Vector3<f64>>,
        colors: Vec<Vector3<f64>>,
        opacity_logits: Vec<f64>,
        is_target: Vec<bool>,
        version: u64,
    ) -> Result<Self, MapError> {
        let n = means.len();
        if [
            rotations.len(),
            log_scales.len(),
            colors.len(),
            opacity_logits.len(),
            is_target.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(MapError::LengthMismatch);
        }
        Ok(GaussianMap {
            means,
            rotations,
            log_scales,
            colors,
            opacity_logits,
            is_target,
            version,
        })
    }

    /// Mutable parameter views for an optimizer step; bumps the version.
    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        self.version += 1;
        ParamsMut {
            means: &mut self.means,
            rotations: &mut self.rotations,
            log_scales: &mut self.log_scales,
            colors: &mut self.colors,
            opacity_logits: &mut self.opacity_logits,
        }
    }

    /// Inserts the non-overlapping points of a keyframe cloud as primitives.
    ///
    /// `decomps` must already be ellipse-regularized and scale-aligned, in the
    /// camera frame parallel to `cloud`. `target` marks tracking keyframes,
    /// whose primitives become registration targets; their overlapped points
    /// promote the covering primitive to target status instead of duplicating
    /// it, so the target set always covers the keyframe's view. Returns the
    /// insert count (promotions excluded).
    pub fn insert_keyframe(
        &mut self,
        cloud: &PointCloud,
        decomps: &[CovDecomposition],
        pose: &Pose,
        target: bool,
        cfg: &MapConfig,
    ) -> usize {
        debug_assert_eq!(cloud.len(), decomps.len());
        let world_means: Vec<Vector3<f64>> =
            cloud.points.iter().map(|p| pose.transform(p)).collect();
        // Overlap is judged against the full map, regardless of keyframe kind.
        let full_index = KdTree::build(&self.means);

        let rot = pose.rotation_matrix();
        let mut inserted = 0;
        for (i, world) in world_means.iter().enumerate() {
            if let Some((near, dist)) = full_index.nearest(world) {
                if dist <= cfg.overlap_dist {
                    if target {
                        self.is_target[near] = true;
                    }
                    continue;
                }
            }
            let axes_world = rot * decomps[i].axes;
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
                axes_world,
            ));
            self.means.push(*world);
            self.rotations.push(q);
            self.log_scales.push(
                decomps[i]
                    .scales
                    .map(|s| s.clamp(MIN_SCALE, cfg.scene_extent).ln()),
            );
            self.colors.push(cloud.colors[i]);
            self.opacity_logits.push(logit(cfg.init_opacity));
            self.is_target.push(target);
            inserted += 1;
        }
        self.version += 1;
        inserted
    }

    /// Removes primitives that are nearly transparent, extremely anisotropic,
    /// or larger than the absolute scale cutoff. Never adds primitives.
    pub fn prune(&mut self, cfg: &MapConfig) -> PruneResult {
        let abs_cutoff = cfg.prune_abs_scale();
        let mut kept = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let opacity = sigmoid(self.opacity_logits[i]);
            let s = self.log_scales[i].map(|l| l.exp());
            let (max_s, min_s) = (s.max(), s.min().max(MIN_SCALE));
            let doomed =
                opacity < cfg.prune_opacity || max_s / min_s > cfg.prune_aniso || max_s > abs_cutoff;
            if !doomed {
                kept.push(i as u32);
            }
        }
        let removed = self.len() - kept.len();
        if removed > 0 {
            for (new_i, &old_i) in kept.iter().enumerate() {
                let old = old_i as usize;
                self.means[new_i] = self.means[old];
                self.rotations[new_i] = self.rotations[old];
                self.log_scales[new_i] = self.log_scales[old];
                self.colors[new_i] = self.colors[old];
                self.opacity_logits[new_i] = self.opacity_logits[old];
                self.is_target[new_i] = self.is_target[old];
            }
            let n = kept.len();
            self.means.truncate(n);
            self.rotations.truncate(n);
            self.log_scales.truncate(n);
            self.colors.truncate(n);
            self.opacity_logits.truncate(n);
            self.is_target.truncate(n);
            self.version += 1;
        }
        PruneResult { removed, kept }
    }

    /// Immutable view with covariances rebuilt from the stored parameters.
    pub fn snapshot(&self, scope: SnapshotScope) -> MapSnapshot {
        let mut means = Vec::new();
        let mut covariances = Vec::new();
        let mut decomps = Vec::new();
        for i in 0..self.len() {
            if scope == SnapshotScope::TrackingTargets && !self.is_target[i] {
                continue;
            }
            means.push(self.means[i]);
            covariances.push(reconstruct_cov(&self.rotations[i], &self.log_scales[i]));
            decomps.push(sorted_decomp(&self.rotations[i], &self.log_scales[i]));
        }
        let index = KdTree::build(&means);
        MapSnapshot {
            bootstrap: means.is_empty(),
            means,
            covariances,
            decomps,
            index,
            version: self.version,
        }
    }
}
