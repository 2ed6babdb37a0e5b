//! Frame-by-frame session driver: frontend, tracking, keyframe insertion,
//! and interleaved map optimization, deterministic under a fixed seed.

use alloc::vec::Vec;

#[allow(unused_imports)] // float methods without std
use num_traits::Float;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Intrinsics;
use crate::frame::Frame;
use crate::frontend::{build_cloud, FrontendConfig, FrontendError, PointCloud};
use crate::gicp::{decompose_covariance, regularize_decomposition, CovDecomposition, GicpError};
use crate::kdtree::KdTree;
use crate::map::{scale_align, GaussianMap, MapConfig, MapError, SnapshotScope};
use crate::mapping::{
    mapping_iteration, LossWeights, MappingError, OptimizerConfig, OptimizerState,
};
use crate::render::{render, RenderConfig, RenderedFrame, SceneView};
use crate::se3::Pose;
use crate::tracking::{
    constant_velocity_prior, select_keyframe, track_frame, KeyframeDecision, KeyframeRecord,
    TrackingConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineError {
    /// Tracking reported lost for more consecutive frames than allowed.
    TrackingLost { frame_index: usize, streak: usize },
    Frontend(FrontendError),
    Gicp(GicpError),
    Map(MapError),
    Mapping(MappingError),
}

impl core::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PipelineError::TrackingLost {
                frame_index,
                streak,
            } => {
                write!(f, "tracking lost for {streak} frames ending at {frame_index}")
            }
            PipelineError::Frontend(e) => write!(f, "frontend: {e}"),
            PipelineError::Gicp(e) => write!(f, "registration: {e}"),
            PipelineError::Map(e) => write!(f, "map: {e}"),
            PipelineError::Mapping(e) => write!(f, "mapping: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PipelineError {}

impl From<FrontendError> for PipelineError {
    fn from(e: FrontendError) -> Self {
        PipelineError::Frontend(e)
    }
}

impl From<GicpError> for PipelineError {
    fn from(e: GicpError) -> Self {
        PipelineError::Gicp(e)
    }
}

impl From<MapError> for PipelineError {
    fn from(e: MapError) -> Self {
        PipelineError::Map(e)
    }
}

impl From<MappingError> for PipelineError {
    fn from(e: MappingError) -> Self {
        PipelineError::Mapping(e)
    }
}

/// Which keyframes the mapping lane trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainingPick {
    /// Uniform over all keyframes seen so far.
    #[default]
    Random,
    /// Always the most recent keyframe.
    MostRecent,
}

/// How map Gaussians are seeded from a keyframe's cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceSeed {
    /// Reuse the registration covariances, scales divided by z^exponent.
    Shared { exponent: f64 },
    /// Keep the registration axes but overwrite all scales with a constant.
    ConstantScale { scale: f64 },
    /// Ignore registration: identity axes, isotropic scale from the mean
    /// distance to the three nearest cloud neighbors.
    Naive,
}

impl Default for CovarianceSeed {
    fn default() -> Self {
        CovarianceSeed::Shared { exponent: 1.5 }
    }
}

/// Everything a session needs; field defaults make a working room-scale run.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub frontend: FrontendConfig,
    pub tracking: TrackingConfig,
    pub map: MapConfig,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub render: RenderConfig,
    pub seed_mode: CovarianceSeed,
    pub training_pick: TrainingPick,
    /// Map optimization iterations run after every processed frame.
    pub iters_per_frame: usize,
    /// Abort after this many consecutive lost frames.
    pub max_lost_frames: usize,
    /// Keyframe images and training renders are resampled to this size;
    /// `None` keeps the input resolution.
    pub keyframe_size: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            frontend: FrontendConfig::default(),
            tracking: TrackingConfig::default(),
            map: MapConfig::default(),
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            render: RenderConfig::default(),
            seed_mode: CovarianceSeed::default(),
            training_pick: TrainingPick::default(),
            iters_per_frame: 10,
            max_lost_frames: 20,
            keyframe_size: None,
            seed: 0,
        }
    }
}

/// Per-frame record of what the session did.
#[derive(Debug, Clone, Copy)]
pub struct FrameTrace {
    pub frame_index: usize,
    pub pose: Pose,
    pub corr_ratio: f64,
    pub lost: bool,
    pub decision: KeyframeDecision,
    /// Primitives added by this frame's insertion.
    pub inserted: usize,
    pub map_len: usize,
}

/// One loss-curve sample.
#[derive(Debug, Clone, Copy)]
pub struct LossSample {
    pub iteration: u64,
    pub loss: f64,
    pub primitives: usize,
}

/// Streaming SLAM session; feed frames in order, read the trajectory back.
#[derive(Debug)]
pub struct SlamSession {
    cfg: PipelineConfig,
    map: GaussianMap,
    opt: OptimizerState,
    keyframes: Vec<KeyframeRecord>,
    poses: Vec<Pose>,
    traces: Vec<FrameTrace>,
    loss_curve: Vec<LossSample>,
    rng: ChaCha8Rng,
    last_tracking_kf: usize,
    lost_streak: usize,
    lost_frames: usize,
    kf_intrinsics: Option<Intrinsics>,
}

impl SlamSession {
    pub fn new(cfg: PipelineConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        SlamSession {
            cfg,
            map: GaussianMap::new(),
            opt: OptimizerState::new(),
            keyframes: Vec::new(),
            poses: Vec::new(),
            traces: Vec::new(),
            loss_curve: Vec::new(),
            rng,
            last_tracking_kf: 0,
            lost_streak: 0,
            lost_frames: 0,
            kf_intrinsics: None,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn traces(&self) -> &[FrameTrace] {
        &self.traces
    }

    pub fn loss_curve(&self) -> &[LossSample] {
        &self.loss_curve
    }

    pub fn map(&self) -> &GaussianMap {
        &self.map
    }

    pub fn keyframes(&self) -> &[KeyframeRecord] {
        &self.keyframes
    }

    pub fn lost_frames(&self) -> usize {
        self.lost_frames
    }

    /// Renders the current map from `pose` at the keyframe resolution.
    pub fn render_view(&self, pose: &Pose, k: &Intrinsics, width: usize, height: usize) -> RenderedFrame {
        let view = SceneView::from_map(&self.map);
        render(&view, pose, k, width, height, &self.cfg.render)
    }

    /// Processes the next frame: track, decide keyframe, insert, optimize.
    pub fn process_frame(&mut self, frame: &Frame) -> Result<FrameTrace, PipelineError> {
        let index = self.poses.len();
        let (cloud, covs, tree) = build_cloud(frame, &self.cfg.frontend)?;
        let mut decomps = Vec::with_capacity(covs.covariances.len());
        let mut reg_covs = Vec::with_capacity(covs.covariances.len());
        for c in &covs.covariances {
            let d = decompose_covariance(c)?;
            let r = regularize_decomposition(&d, self.cfg.tracking.gicp.mode, self.cfg.tracking.gicp.plane_eps).0;
            reg_covs.push(r.reconstruct());
            decomps.push(r);
        }

        let (pose, corr_ratio, lost) = if index == 0 {
            (Pose::identity(), 1.0, false)
        } else {
            // After a lost frame the velocity estimate is meaningless; hold
            // position instead of extrapolating a bad jump.
            let prev_lost = self.traces.last().is_some_and(|t| t.lost);
            let prior = constant_velocity_prior(
                &self.poses[index - 1],
                if index >= 2 && !prev_lost { Some(&self.poses[index - 2]) } else { None },
            );
            let snapshot = self.map.snapshot(SnapshotScope::TrackingTargets);
            let mut result = track_frame(&cloud, &reg_covs, &snapshot, &prior, &self.cfg.tracking)?;
            // Velocity extrapolation feeds its own error back through the next
            // prior and can ratchet; a second solve from the held pose breaks
            // that loop whenever it lands at a strictly lower objective.
            let held = &self.poses[index - 1];
            if prior != *held {
                let hold = track_frame(&cloud, &reg_covs, &snapshot, held, &self.cfg.tracking)?;
                if hold.mean_cost < result.mean_cost {
                    result = hold;
                }
            }
            (result.pose, result.corr_ratio, result.lost)
        };

        if lost {
            self.lost_streak += 1;
            self.lost_frames += 1;
            if self.lost_streak > self.cfg.max_lost_frames {
                return Err(PipelineError::TrackingLost {
                    frame_index: index,
                    streak: self.lost_streak,
                });
            }
        } else {
            self.lost_streak = 0;
        }

        let frames_since = index - self.last_tracking_kf;
        let decision = if index == 0 {
            KeyframeDecision::TrackingKeyframe
        } else {
            select_keyframe(corr_ratio, frames_since, index, &self.cfg.tracking)
        };

        let mut inserted = 0;
        if decision != KeyframeDecision::None && !lost {
            let mut seeded = self.seed_decomps(&decomps, &cloud, &tree);
            // Stored scales shrink with camera depth so near points get fine
            // primitives; the exponent rides the seed mode since the other
            // seeds prescribe absolute scales.
            let exponent = self.effective_map_cfg().scale_exponent;
            if exponent != 0.0 {
                for (s, point) in seeded.iter_mut().zip(&cloud.points) {
                    *s = scale_align(s, point.z, exponent)?;
                }
            }
            let target = decision == KeyframeDecision::TrackingKeyframe;
            inserted = self
                .map
                .insert_keyframe(&cloud, &seeded, &pose, target, &self.effective_map_cfg());
            if target {
                self.last_tracking_kf = index;
            }
            let stored = match self.cfg.keyframe_size {
                Some((w, h)) => frame.resized(w, h),
                None => frame.clone(),
            };
            self.kf_intrinsics = Some(stored.intrinsics);
            self.keyframes.push(KeyframeRecord {
                frame_index: index,
                pose,
                color: stored.color,
                depth: stored.depth,
            });
        }

        self.poses.push(pose);

        if !self.keyframes.is_empty() {
            let k = self.kf_intrinsics.expect("set with first keyframe");
            let map_cfg = self.effective_map_cfg();
            let pool = match self.cfg.training_pick {
                TrainingPick::Random => &self.keyframes[..],
                TrainingPick::MostRecent => &self.keyframes[self.keyframes.len() - 1..],
            };
            for _ in 0..self.cfg.iters_per_frame {
                let rep = mapping_iteration(
                    &mut self.map,
                    &pool,
                    &k,
                    &mut self.opt,
                    &self.cfg.optimizer,
                    &self.cfg.weights,
                    &map_cfg,
                    &self.cfg.render,
                    &mut self.rng,
                )?;
                self.loss_curve.push(LossSample {
                    iteration: rep.iteration,
                    loss: rep.loss,
                    primitives: rep.primitives,
                });
            }
        }

        let trace = FrameTrace {
            frame_index: index,
            pose,
            corr_ratio,
            lost,
            decision,
            inserted,
            map_len: self.map.len(),
        };
        self.traces.push(trace);
        Ok(trace)
    }

    /// Runs `process_frame` over a whole in-memory sequence.
    pub fn run_frames<'a, I: IntoIterator<Item = &'a Frame>>(
        &mut self,
        frames: I,
    ) -> Result<(), PipelineError> {
        for frame in frames {
            self.process_frame(frame)?;
        }
        Ok(())
    }

    /// The map config with the seed mode's scale exponent in effect.
    fn effective_map_cfg(&self) -> MapConfig {
        let mut cfg = self.cfg.map;
        cfg.scale_exponent = match self.cfg.seed_mode {
            CovarianceSeed::Shared { exponent } => exponent,
            // Constant and naive seeds fix their own absolute size.
            CovarianceSeed::ConstantScale { .. } | CovarianceSeed::Naive => 0.0,
        };
        cfg
    }

    fn seed_decomps(
        &self,
        decomps: &[CovDecomposition],
        cloud: &PointCloud,
        tree: &KdTree,
    ) -> Vec<CovDecomposition> {
        seed_decomps(self.cfg.seed_mode, decomps, cloud, tree)
    }
}

/// Applies a covariance seeding mode to a keyframe's regularized
/// decompositions (see `CovarianceSeed`).
pub fn seed_decomps(
    mode: CovarianceSeed,
    decomps: &[CovDecomposition],
    cloud: &PointCloud,
    tree: &KdTree,
) -> Vec<CovDecomposition> {
    match mode {
        CovarianceSeed::Shared { .. } => decomps.to_vec(),
        CovarianceSeed::ConstantScale { scale } => decomps
            .iter()
            .map(|d| CovDecomposition {
                axes: d.axes,
                scales: Vector3::repeat(scale),
            })
            .collect(),
        CovarianceSeed::Naive => cloud
            .points
            .iter()
            .map(|p| {
                // Mean distance to the 3 nearest other points (the first hit
                // is the point itself at distance 0).
                let hits = tree.knn(p, 4);
                let sum: f64 = hits.iter().skip(1).map(|&(_, d)| d).sum();
                let n = hits.len().saturating_sub(1).max(1);
                CovDecomposition {
                    axes: Matrix3::identity(),
                    scales: Vector3::repeat((sum / n as f64).max(1e-6)),
                }
            })
            .collect(),
    }
}
