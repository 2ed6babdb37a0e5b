//! Frame-to-map tracking: constant-velocity pose prediction, registration of
//! the frame's Gaussians against the map's target Gaussians, and the keyframe
//! decision rule.

use alloc::vec::Vec;
use nalgebra::Matrix3;
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

use crate::frontend::PointCloud;
use crate::gicp::{align, regularize_decomposition, AlignInput, GicpConfig, GicpError};
use crate::img::{ColorImage, DepthImage};
use crate::map::MapSnapshot;
use crate::se3::Pose;

/// Tracking thresholds and keyframe cadence.
#[derive(Debug, Clone)]
pub struct TrackingConfig {
    pub gicp: GicpConfig,
    /// Correspondence ratio below which a tracking keyframe is forced.
    pub kf_ratio_threshold: f64,
    /// A tracking keyframe is forced after this many frames without one.
    pub forced_interval: usize,
    /// Cadence of mapping-only keyframes (0 disables them).
    pub mapping_only_interval: usize,
    /// Promote would-be mapping-only keyframes to full tracking keyframes.
    pub promote_mapping_only: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            gicp: GicpConfig::default(),
            kf_ratio_threshold: 0.9,
            forced_interval: 30,
            mapping_only_interval: 10,
            promote_mapping_only: false,
        }
    }
}

/// Outcome of tracking one frame.
#[derive(Debug, Clone)]
pub struct TrackResult {
    /// Camera-to-world pose; equals the prior when tracking was lost.
    pub pose: Pose,
    /// Fraction of source points with a map correspondence at the final pose.
    pub corr_ratio: f64,
    /// Final objective value per correspondence; infinite when lost.
    pub mean_cost: f64,
    pub lost: bool,
    pub converged: bool,
}

/// What to do with a tracked frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyframeDecision {
    None,
    /// Expands both the registration targets and the rendering map.
    TrackingKeyframe,
    /// Supervises optimization and densifies rendering only.
    MappingOnly,
}

/// A keyframe retained for map optimization.
#[derive(Debug, Clone)]
pub struct KeyframeRecord {
    pub frame_index: usize,
    pub pose: Pose,
    pub color: ColorImage,
    pub depth: DepthImage,
}

/// Constant-velocity prediction: the last pose composed with the last
/// inter-frame motion. With fewer than two poses the last pose is returned.
pub fn constant_velocity_prior(prev: &Pose, prev2: Option<&Pose>) -> Pose {
    match prev2 {
        Some(p2) => prev.compose(&p2.inverse().compose(prev)),
        None => *prev,
    }
}

/// Registers the frame's Gaussians (camera frame, covariances already
/// regularized) against the snapshot's target Gaussians.
pub fn track_frame(
    cloud: &PointCloud,
    source_covs: &[Matrix3<f64>],
    snapshot: &MapSnapshot,
    prior: &Pose,
    cfg: &TrackingConfig,
) -> Result<TrackResult, GicpError> {
    debug_assert!(!snapshot.bootstrap, "bootstrap frames bypass tracking");
    // Targets re-regularized on the fly from stored decompositions, matching
    // the source treatment.
    let target_covs: Vec<Matrix3<f64>> = snapshot
        .decomps
        .iter()
        .map(|d| regularize_decomposition(d, cfg.gicp.mode, cfg.gicp.plane_eps).0.reconstruct())
        .collect();
    let input = AlignInput {
        source_points: &cloud.points,
        source_covs,
        target_points: &snapshot.means,
        target_covs: &target_covs,
        target_index: &snapshot.index,
    };
    match align(&input, prior, &cfg.gicp) {
        Ok(outcome) => Ok(TrackResult {
            pose: outcome.pose,
            corr_ratio: outcome.report.inlier_count as f64 / cloud.len() as f64,
            mean_cost: outcome.report.cost / outcome.report.inlier_count.max(1) as f64,
            lost: false,
            converged: outcome.converged,
        }),
        Err(GicpError::TrackingLost { found, .. }) => Ok(TrackResult {
            pose: *prior,
            corr_ratio: found as f64 / cloud.len() as f64,
            mean_cost: f64::INFINITY,
            lost: true,
            converged: false,
        }),
        Err(e) => Err(e),
    }
}

/// Stateless keyframe rule. `frames_since_tracking_kf` counts frames since
/// the last tracking keyframe (inclusive of the current one).
pub fn select_keyframe(
    corr_ratio: f64,
    frames_since_tracking_kf: usize,
    frame_index: usize,
    cfg: &TrackingConfig,
) -> KeyframeDecision {
    if frame_index == 0 {
        return KeyframeDecision::TrackingKeyframe;
    }
    if corr_ratio < cfg.kf_ratio_threshold || frames_since_tracking_kf >= cfg.forced_interval {
        return KeyframeDecision::TrackingKeyframe;
    }
    if cfg.mapping_only_interval > 0 && frame_index % cfg.mapping_only_interval == 0 {
        if cfg.promote_mapping_only {
            return KeyframeDecision::TrackingKeyframe;
        }
        return KeyframeDecision::MappingOnly;
    }
    KeyframeDecision::None
}
