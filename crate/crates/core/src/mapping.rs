//! Map optimization: photometric/depth loss against keyframes, sparse
//! adaptive-moment parameter updates, and scheduled pruning.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // float methods without std
use num_traits::Float;

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::Rng;

use crate::camera::Intrinsics;
use crate::img::{ColorImage, DepthImage};
use crate::map::{GaussianMap, MapConfig};
use crate::render::{render, render_backward, RenderConfig, RenderedFrame, SceneView};
use crate::ssim::ssim_with_grad;
use crate::tracking::KeyframeRecord;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MappingError {
    /// Rendered and reference images have different dimensions.
    DimensionMismatch,
    /// No keyframe available to train on.
    NoKeyframes,
}

impl core::fmt::Display for MappingError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MappingError::DimensionMismatch => write!(f, "image dimensions do not match"),
            MappingError::NoKeyframes => write!(f, "keyframe store is empty"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MappingError {}

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Mean absolute color error.
    pub rgb_l1: f64,
    /// Structural dissimilarity (1 - ssim) / 2.
    pub dssim: f64,
    /// Mean absolute depth error over valid ground-truth pixels.
    pub depth_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rgb_l1: 0.8,
            dssim: 0.2,
            depth_l1: 0.5,
        }
    }
}

/// Loss value with its gradients on the rendered images.
#[derive(Debug, Clone)]
pub struct MapLoss {
    pub value: f64,
    /// d value / d rendered rgb, row-major interleaved.
    pub grad_rgb: Vec<f64>,
    /// d value / d rendered depth, row-major.
    pub grad_depth: Vec<f64>,
    /// Set when no pixel had valid reference depth; the depth term was 0.
    pub empty_depth_mask: bool,
}

/// Weighted sum of color L1, structural dissimilarity, and masked depth L1,
/// differentiated w.r.t. the rendered images.
pub fn map_loss(
    rendered: &RenderedFrame,
    gt_color: &ColorImage,
    gt_depth: &DepthImage,
    depth_mask: &[bool],
    w: &LossWeights,
) -> Result<MapLoss, MappingError> {
    let (width, height) = (rendered.rgb.width, rendered.rgb.height);
    if gt_color.width != width
        || gt_color.height != height
        || gt_depth.width != width
        || gt_depth.height != height
        || depth_mask.len() != width * height
    {
        return Err(MappingError::DimensionMismatch);
    }
    let n_rgb = (width * height * 3) as f64;
    let mut value = 0.0;
    let mut grad_rgb = vec![0.0; width * height * 3];

    if w.rgb_l1 != 0.0 {
        let mut l1 = 0.0;
        for (i, g) in grad_rgb.iter_mut().enumerate() {
            let d = rendered.rgb.data[i] - gt_color.data[i];
            l1 += d.abs();
            // signum(0.0) is 1.0; the subgradient at equality must be 0.
            if d != 0.0 {
                *g += w.rgb_l1 * d.signum() / n_rgb;
            }
        }
        value += w.rgb_l1 * l1 / n_rgb;
    }

    if w.dssim != 0.0 {
        let (s, g) = ssim_with_grad(&rendered.rgb, gt_color);
        value += w.dssim * (1.0 - s) / 2.0;
        for (gr, gs) in grad_rgb.iter_mut().zip(&g) {
            *gr -= w.dssim * 0.5 * gs;
        }
    }

    let mut grad_depth = vec![0.0; width * height];
    let valid = depth_mask.iter().filter(|&&m| m).count();
    let empty_depth_mask = valid == 0;
    if w.depth_l1 != 0.0 && !empty_depth_mask {
        let mut l1 = 0.0;
        for (i, g) in grad_depth.iter_mut().enumerate() {
            if !depth_mask[i] {
                continue;
            }
            let d = rendered.depth.data[i] - gt_depth.data[i];
            l1 += d.abs();
            if d != 0.0 {
                *g = w.depth_l1 * d.signum() / valid as f64;
            }
        }
        value += w.depth_l1 * l1 / valid as f64;
    }

    Ok(MapLoss {
        value,
        grad_rgb,
        grad_depth,
        empty_depth_mask,
    })
}

/// Adaptive-moment hyperparameters; the means rate is further multiplied by
/// the scene extent.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub lr_means: f64,
    pub lr_rotations: f64,
    pub lr_log_scales: f64,
    pub lr_colors: f64,
    pub lr_opacity: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_means: 2e-4,
            lr_rotations: 1e-3,
            lr_log_scales: 5e-3,
            lr_colors: 2.5e-3,
            lr_opacity: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First/second moment accumulators for every map parameter.
///
/// Moments decay on every step; a parameter itself moves only when its
/// gradient is nonzero, so untouched primitives stay bitwise identical.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    step: u64,
    m_means: Vec<Vector3<f64>>,
    v_means: Vec<Vector3<f64>>,
    m_rotations: Vec<Vector4<f64>>,
    v_rotations: Vec<Vector4<f64>>,
    m_log_scales: Vec<Vector3<f64>>,
    v_log_scales: Vec<Vector3<f64>>,
    m_colors: Vec<Vector3<f64>>,
    v_colors: Vec<Vector3<f64>>,
    m_opacity: Vec<f64>,
    v_opacity: Vec<f64>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }

    pub fn len(&self) -> usize {
        self.m_opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_opacity.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Grows the accumulators to `n` rows; new primitives start at zero.
    pub fn ensure_len(&mut self, n: usize) {
        if n <= self.len() {
            return;
        }
        self.m_means.resize(n, Vector3::zeros());
        self.v_means.resize(n, Vector3::zeros());
        self.m_rotations.resize(n, Vector4::zeros());
        self.v_rotations.resize(n, Vector4::zeros());
        self.m_log_scales.resize(n, Vector3::zeros());
        self.v_log_scales.resize(n, Vector3::zeros());
        self.m_colors.resize(n, Vector3::zeros());
        self.v_colors.resize(n, Vector3::zeros());
        self.m_opacity.resize(n, 0.0);
        self.v_opacity.resize(n, 0.0);
    }

    /// Keeps only the rows listed in `kept` (pre-compaction indices, in the
    /// order the map retained them after a prune).
    pub fn compact(&mut self, kept: &[u32]) {
        fn gather<T: Copy>(v: &mut Vec<T>, kept: &[u32]) {
            let out: Vec<T> = kept.iter().map(|&i| v[i as usize]).collect();
            *v = out;
        }
        gather(&mut self.m_means, kept);
        gather(&mut self.v_means, kept);
        gather(&mut self.m_rotations, kept);
        gather(&mut self.v_rotations, kept);
        gather(&mut self.m_log_scales, kept);
        gather(&mut self.v_log_scales, kept);
        gather(&mut self.m_colors, kept);
        gather(&mut self.v_colors, kept);
        gather(&mut self.m_opacity, kept);
        gather(&mut self.v_opacity, kept);
    }
}

/// Draws a training keyframe uniformly from everything collected so far.
pub fn pick_training_keyframe<'a, R: Rng>(
    keyframes: &'a [KeyframeRecord],
    rng: &mut R,
) -> Result<&'a KeyframeRecord, MappingError> {
    if keyframes.is_empty() {
        return Err(MappingError::NoKeyframes);
    }
    Ok(&keyframes[rng.random_range(0..keyframes.len())])
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepResult {
    pub loss: f64,
    /// True when a non-finite loss or gradient left map and state untouched.
    pub rejected: bool,
    /// True when the keyframe had no valid depth pixel.
    pub empty_depth_mask: bool,
}

fn adam_scalar(
    x: &mut f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    lr: f64,
    cfg: &OptimizerConfig,
    bc1: f64,
    bc2: f64,
) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    if g != 0.0 {
        *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
    }
}

/// Renders the keyframe view, evaluates the loss, and applies one sparse
/// adaptive-moment update to every parameter group. Rotations are
/// re-normalized only when their gradient touched them.
pub fn optimize_step(
    map: &mut GaussianMap,
    kf: &KeyframeRecord,
    k: &Intrinsics,
    opt: &mut OptimizerState,
    ocfg: &OptimizerConfig,
    weights: &LossWeights,
    map_cfg: &MapConfig,
    rcfg: &RenderConfig,
) -> Result<StepResult, MappingError> {
    let (width, height) = (kf.color.width, kf.color.height);
    let mask: Vec<bool> = kf.depth.data.iter().map(|&d| d.is_finite() && d > 0.0).collect();

    let (loss, grads) = {
        let view = SceneView::from_map(map);
        let rendered = render(&view, &kf.pose, k, width, height, rcfg);
        let loss = map_loss(&rendered, &kf.color, &kf.depth, &mask, weights)?;
        let grads = render_backward(
            &view,
            &kf.pose,
            k,
            width,
            height,
            rcfg,
            &loss.grad_rgb,
            &loss.grad_depth,
        );
        (loss, grads)
    };

    let finite = loss.value.is_finite()
        && grads.means.iter().all(|g| g.iter().all(|x| x.is_finite()))
        && grads.rotations.iter().all(|g| g.iter().all(|x| x.is_finite()))
        && grads.log_scales.iter().all(|g| g.iter().all(|x| x.is_finite()))
        && grads.colors.iter().all(|g| g.iter().all(|x| x.is_finite()))
        && grads.opacity_logits.iter().all(|x| x.is_finite());
    if !finite {
        return Ok(StepResult {
            loss: loss.value,
            rejected: true,
            empty_depth_mask: loss.empty_depth_mask,
        });
    }

    let n = map.len();
    opt.ensure_len(n);
    opt.step += 1;
    let bc1 = 1.0 - ocfg.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - ocfg.beta2.powi(opt.step as i32);
    let lr_means = ocfg.lr_means * map_cfg.scene_extent;

    let params = map.params_mut();
    for i in 0..n {
        for a in 0..3 {
            adam_scalar(
                &mut params.means[i][a],
                grads.means[i][a],
                &mut opt.m_means[i][a],
                &mut opt.v_means[i][a],
                lr_means,
                ocfg,
                bc1,
                bc2,
            );
            adam_scalar(
                &mut params.log_scales[i][a],
                grads.log_scales[i][a],
                &mut opt.m_log_scales[i][a],
                &mut opt.v_log_scales[i][a],
                ocfg.lr_log_scales,
                ocfg,
                bc1,
                bc2,
            );
            adam_scalar(
                &mut params.colors[i][a],
                grads.colors[i][a],
                &mut opt.m_colors[i][a],
                &mut opt.v_colors[i][a],
                ocfg.lr_colors,
                ocfg,
                bc1,
                bc2,
            );
        }
        let touched = grads.rotations[i].iter().any(|&g| g != 0.0);
        let mut q = params.rotations[i].into_inner().coords;
        for a in 0..4 {
            adam_scalar(
                &mut q[a],
                grads.rotations[i][a],
                &mut opt.m_rotations[i][a],
                &mut opt.v_rotations[i][a],
                ocfg.lr_rotations,
                ocfg,
                bc1,
                bc2,
            );
        }
        if touched {
            params.rotations[i] =
                UnitQuaternion::from_quaternion(Quaternion::from_vector(q));
        }
        adam_scalar(
            &mut params.opacity_logits[i],
            grads.opacity_logits[i],
            &mut opt.m_opacity[i],
            &mut opt.v_opacity[i],
            ocfg.lr_opacity,
            ocfg,
            bc1,
            bc2,
        );
    }

    Ok(StepResult {
        loss: loss.value,
        rejected: false,
        empty_depth_mask: loss.empty_depth_mask,
    })
}

/// One record of the training trace.
#[derive(Debug, Clone, Copy)]
pub struct IterationReport {
    /// 1-based global iteration index.
    pub iteration: u64,
    pub loss: f64,
    pub primitives: usize,
    pub pruned: usize,
    pub rejected: bool,
}

/// Runs one pick-train-prune cycle: samples a keyframe, applies one
/// optimization step, and prunes when the schedule says so.
#[allow(clippy::too_many_arguments)]
pub fn mapping_iteration<R: Rng>(
    map: &mut GaussianMap,
    keyframes: &[KeyframeRecord],
    k: &Intrinsics,
    opt: &mut OptimizerState,
    ocfg: &OptimizerConfig,
    weights: &LossWeights,
    map_cfg: &MapConfig,
    rcfg: &RenderConfig,
    rng: &mut R,
) -> Result<IterationReport, MappingError> {
    let kf = pick_training_keyframe(keyframes, rng)?.clone();
    let step = optimize_step(map, &kf, k, opt, ocfg, weights, map_cfg, rcfg)?;
    let iteration = opt.step_count();
    let mut pruned = 0;
    if map_cfg.prune_interval > 0
        && iteration >= map_cfg.prune_warmup as u64
        && iteration % map_cfg.prune_interval as u64 == 0
    {
        let result = map.prune(map_cfg);
        opt.compact(&result.kept);
        pruned = result.removed;
    }
    Ok(IterationReport {
        iteration,
        loss: step.loss,
        primitives: map.len(),
        pruned,
        rejected: step.rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{build_cloud, FrontendConfig};
    use crate::gicp::{decompose_covariance, regularize_decomposition, Regularization};
    use crate::se3::Pose;
    use crate::synth::{SynthConfig, SynthScene};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_rendered(width: usize, height: usize) -> RenderedFrame {
        RenderedFrame {
            rgb: ColorImage::filled(width, height, [0.4, 0.5, 0.6]),
            depth: DepthImage::filled(width, height, 2.0),
            alpha: vec![1.0; width * height],
            transmittance: vec![0.0; width * height],
        }
    }

    #[test]
    fn perfect_render_has_zero_loss() {
        let r = toy_rendered(20, 16);
        let mask = vec![true; 20 * 16];
        let l = map_loss(&r, &r.rgb, &r.depth, &mask, &LossWeights::default()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad_rgb.iter().all(|&g| g == 0.0));
        assert!(l.grad_depth.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_color_offset_is_its_own_l1() {
        let r = toy_rendered(20, 16);
        let gt = ColorImage::filled(20, 16, [0.3, 0.4, 0.5]);
        let w = LossWeights {
            rgb_l1: 1.0,
            dssim: 0.0,
            depth_l1: 0.0,
        };
        let l = map_loss(&r, &gt, &r.depth, &vec![true; 20 * 16], &w).unwrap();
        assert_relative_eq!(l.value, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn masked_depth_offset_is_its_own_l1() {
        let r = toy_rendered(20, 16);
        let gt = DepthImage::filled(20, 16, 2.2);
        let w = LossWeights {
            rgb_l1: 0.0,
            dssim: 0.0,
            depth_l1: 1.0,
        };
        // Half the pixels masked out; the mean runs over the valid half only.
        let mask: Vec<bool> = (0..20 * 16).map(|i| i % 2 == 0).collect();
        let l = map_loss(&r, &r.rgb, &gt, &mask, &w).unwrap();
        assert_relative_eq!(l.value, 0.2, epsilon = 1e-12);
        assert!(!l.empty_depth_mask);
    }

    #[test]
    fn empty_depth_mask_zeroes_the_term_and_flags() {
        let r = toy_rendered(20, 16);
        let gt = DepthImage::filled(20, 16, 9.0);
        let w = LossWeights {
            rgb_l1: 0.0,
            dssim: 0.0,
            depth_l1: 1.0,
        };
        let l = map_loss(&r, &r.rgb, &gt, &vec![false; 20 * 16], &w).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.empty_depth_mask);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let r = toy_rendered(20, 16);
        let gt = ColorImage::filled(10, 16, [0.0; 3]);
        let e = map_loss(&r, &gt, &r.depth, &vec![true; 20 * 16], &LossWeights::default());
        assert_eq!(e.unwrap_err(), MappingError::DimensionMismatch);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (16, 12);
        let mut r = toy_rendered(w, h);
        for x in r.rgb.data.iter_mut() {
            *x = rng.random_range(0.1..0.9);
        }
        for d in r.depth.data.iter_mut() {
            *d = rng.random_range(1.0..3.0);
        }
        let gt_rgb =
            ColorImage::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.1..0.9)).collect());
        let gt_d =
            DepthImage::from_data(w, h, (0..w * h).map(|_| rng.random_range(1.0..3.0)).collect());
        let mask: Vec<bool> = (0..w * h).map(|i| i % 3 != 0).collect();
        let weights = LossWeights::default();
        let l = map_loss(&r, &gt_rgb, &gt_d, &mask, &weights).unwrap();

        let eps = 1e-6;
        for probe in 0..12 {
            let i = rng.random_range(0..w * h * 3);
            let mut plus = r.clone();
            plus.rgb.data[i] += eps;
            let mut minus = r.clone();
            minus.rgb.data[i] -= eps;
            let fp = map_loss(&plus, &gt_rgb, &gt_d, &mask, &weights).unwrap().value;
            let fm = map_loss(&minus, &gt_rgb, &gt_d, &mask, &weights).unwrap().value;
            let fd = (fp - fm) / (2.0 * eps);
            assert_relative_eq!(l.grad_rgb[i], fd, epsilon = 1e-4, max_relative = 1e-4);
            let j = rng.random_range(0..w * h);
            let mut plus = r.clone();
            plus.depth.data[j] += eps;
            let mut minus = r.clone();
            minus.depth.data[j] -= eps;
            let fp = map_loss(&plus, &gt_rgb, &gt_d, &mask, &weights).unwrap().value;
            let fm = map_loss(&minus, &gt_rgb, &gt_d, &mask, &weights).unwrap().value;
            let fd = (fp - fm) / (2.0 * eps);
            assert_relative_eq!(l.grad_depth[j], fd, epsilon = 1e-6, max_relative = 1e-6);
            let _ = probe;
        }
    }

    #[test]
    fn single_keyframe_draw_returns_it() {
        let scene = SynthScene::new(SynthConfig::default());
        let kf = keyframe_at(&scene, 0.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = pick_training_keyframe(core::slice::from_ref(&kf), &mut rng).unwrap();
        assert_eq!(got.frame_index, kf.frame_index);
    }

    #[test]
    fn empty_store_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = pick_training_keyframe(&[], &mut rng);
        assert_eq!(e.unwrap_err(), MappingError::NoKeyframes);
    }

    #[test]
    fn keyframe_draws_are_uniform() {
        let scene = SynthScene::new(SynthConfig::default());
        let kfs: Vec<KeyframeRecord> = (0..4).map(|i| keyframe_at(&scene, 0.0, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[pick_training_keyframe(&kfs, &mut rng).unwrap().frame_index] += 1;
        }
        for &c in &counts {
            let f = c as f64 / 10_000.0;
            assert!((0.2..=0.3).contains(&f), "frequency {f}");
        }
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let scene = SynthScene::new(SynthConfig::default());
        let kfs: Vec<KeyframeRecord> = (0..5).map(|i| keyframe_at(&scene, 0.0, i)).collect();
        let draw = |seed: u64| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| pick_training_keyframe(&kfs, &mut rng).unwrap().frame_index)
                .collect()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    /// Renders the scene at path parameter `t` into a keyframe record.
    fn keyframe_at(scene: &SynthScene, t: f64, index: usize) -> KeyframeRecord {
        keyframe_with_pose(scene, &scene.pose(t), index)
    }

    fn keyframe_with_pose(scene: &SynthScene, pose: &Pose, index: usize) -> KeyframeRecord {
        let frame = scene.observe(pose, 0, None);
        KeyframeRecord {
            frame_index: index,
            pose: *pose,
            color: frame.color,
            depth: frame.depth,
        }
    }

    /// Small scene + map seeded from one observed frame.
    fn seeded_map(scene: &SynthScene, map_cfg: &MapConfig) -> (GaussianMap, KeyframeRecord) {
        seeded_map_at(scene, map_cfg, &scene.pose(0.0))
    }

    fn seeded_map_at(
        scene: &SynthScene,
        map_cfg: &MapConfig,
        pose: &Pose,
    ) -> (GaussianMap, KeyframeRecord) {
        let kf = keyframe_with_pose(scene, pose, 0);
        let frame = scene.observe(&kf.pose, 0, None);
        let fe = FrontendConfig {
            stride: 2,
            ..FrontendConfig::default()
        };
        let (cloud, covs, _) = build_cloud(&frame, &fe).unwrap();
        let decomps: Vec<_> = covs
            .covariances
            .iter()
            .map(|c| {
                let d = decompose_covariance(c).unwrap();
                regularize_decomposition(&d, Regularization::Ellipse, 1e-3).0
            })
            .collect();
        let mut map = GaussianMap::new();
        map.insert_keyframe(&cloud, &decomps, &kf.pose, true, map_cfg);
        (map, kf)
    }

    fn small_scene() -> SynthScene {
        SynthScene::new(SynthConfig {
            width: 64,
            height: 48,
            ..SynthConfig::default()
        })
    }

    #[test]
    fn loss_halves_on_a_single_keyframe_scene() {
        let scene = small_scene();
        let map_cfg = MapConfig {
            overlap_dist: 0.05,
            prune_warmup: 50,
            // Insertion from a coarse cloud seeds flat discs; loosen the
            // shape cutoffs so only truly degenerate primitives go.
            prune_aniso: 1e4,
            prune_abs_scale: Some(1.5),
            ..MapConfig::default()
        };
        let (mut map, kf) = seeded_map(&scene, &map_cfg);
        let before = map.len();
        let mut opt = OptimizerState::new();
        let ocfg = OptimizerConfig::default();
        let weights = LossWeights::default();
        let rcfg = RenderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kfs = [kf];
        let mut first = 0.0;
        let mut last = 0.0;
        for i in 0..200 {
            let r = mapping_iteration(
                &mut map,
                &kfs,
                &scene.intrinsics,
                &mut opt,
                &ocfg,
                &weights,
                &map_cfg,
                &rcfg,
                &mut rng,
            )
            .unwrap();
            assert!(!r.rejected);
            if i == 0 {
                first = r.loss;
            }
            last = r.loss;
        }
        assert!(
            last < 0.5 * first,
            "loss went {first} -> {last}, less than 50% reduction"
        );
        // Training never adds primitives; pruning may remove some.
        assert!(map.len() <= before);
        for q in map.rotations() {
            assert_relative_eq!(q.as_ref().norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_bitwise_unchanged() {
        let scene = small_scene();
        let map_cfg = MapConfig {
            overlap_dist: 0.05,
            prune_interval: 0,
            ..MapConfig::default()
        };
        let (mut map, kf) = seeded_map(&scene, &map_cfg);
        let ocfg = OptimizerConfig::default();
        // The structural term's gradient cancels only analytically at
        // equality; the absolute-error terms are exactly zero there, which is
        // what the sparse-update path keys on.
        let weights = LossWeights {
            dssim: 0.0,
            ..LossWeights::default()
        };
        let rcfg = RenderConfig::default();
        let mut opt = OptimizerState::new();
        // One real step to load the moments.
        optimize_step(
            &mut map,
            &kf,
            &scene.intrinsics,
            &mut opt,
            &ocfg,
            &weights,
            &map_cfg,
            &rcfg,
        )
        .unwrap();
        let m_before = opt.m_opacity.clone();

        // A keyframe equal to the current render has zero gradient everywhere.
        let view = SceneView::from_map(&map);
        let rendered = render(
            &view,
            &kf.pose,
            &scene.intrinsics,
            kf.color.width,
            kf.color.height,
            &rcfg,
        );
        drop(view);
        let perfect = KeyframeRecord {
            frame_index: 1,
            pose: kf.pose,
            color: rendered.rgb,
            depth: rendered.depth,
        };
        let means = map.means().to_vec();
        let rotations = map.rotations().to_vec();
        let log_scales = map.log_scales().to_vec();
        let colors = map.colors().to_vec();
        let opacity = map.opacity_logits().to_vec();
        let r = optimize_step(
            &mut map,
            &perfect,
            &scene.intrinsics,
            &mut opt,
            &ocfg,
            &weights,
            &map_cfg,
            &rcfg,
        )
        .unwrap();
        assert!(!r.rejected);
        assert_eq!(r.loss, 0.0);
        assert_eq!(map.means(), &means[..]);
        assert_eq!(map.rotations(), &rotations[..]);
        assert_eq!(map.log_scales(), &log_scales[..]);
        assert_eq!(map.colors(), &colors[..]);
        assert_eq!(map.opacity_logits(), &opacity[..]);
        // Moments still decayed.
        for (after, before) in opt.m_opacity.iter().zip(&m_before) {
            assert_relative_eq!(*after, ocfg.beta1 * before, epsilon = 1e-15);
        }
    }

    #[test]
    fn non_finite_input_rejects_the_step() {
        let scene = small_scene();
        let map_cfg = MapConfig {
            overlap_dist: 0.05,
            prune_interval: 0,
            ..MapConfig::default()
        };
        let (mut map, mut kf) = seeded_map(&scene, &map_cfg);
        kf.color.data[7] = f64::NAN;
        let mut opt = OptimizerState::new();
        let means = map.means().to_vec();
        let r = optimize_step(
            &mut map,
            &kf,
            &scene.intrinsics,
            &mut opt,
            &OptimizerConfig::default(),
            &LossWeights::default(),
            &map_cfg,
            &RenderConfig::default(),
        )
        .unwrap();
        assert!(r.rejected);
        assert_eq!(opt.step_count(), 0);
        assert_eq!(map.means(), &means[..]);
    }

    #[test]
    fn ensure_len_and_compact_track_shapes() {
        let mut opt = OptimizerState::new();
        opt.ensure_len(5);
        assert_eq!(opt.len(), 5);
        opt.m_opacity[3] = 0.7;
        opt.ensure_len(3); // never shrinks
        assert_eq!(opt.len(), 5);
        opt.compact(&[0, 3, 4]);
        assert_eq!(opt.len(), 3);
        assert_eq!(opt.m_opacity[1], 0.7);
    }

    #[test]
    fn prune_schedule_fires_on_interval_after_warmup() {
        let scene = small_scene();
        let map_cfg = MapConfig {
            overlap_dist: 0.05,
            prune_interval: 5,
            prune_warmup: 10,
            ..MapConfig::default()
        };
        let (mut map, kf) = seeded_map(&scene, &map_cfg);
        let mut opt = OptimizerState::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kfs = [kf];
        for want in 1..=12u64 {
            let rep = mapping_iteration(
                &mut map,
                &kfs,
                &scene.intrinsics,
                &mut opt,
                &OptimizerConfig::default(),
                &LossWeights::default(),
                &map_cfg,
                &RenderConfig::default(),
                &mut rng,
            )
            .unwrap();
            assert_eq!(rep.iteration, want);
            assert_eq!(rep.primitives, map.len());
        }
        assert_eq!(opt.len(), map.len());
    }
}
