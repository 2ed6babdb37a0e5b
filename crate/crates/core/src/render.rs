//! Differentiable CPU splat renderer: perspective EWA projection of 3D
//! Gaussians, global depth-sorted front-to-back alpha compositing of RGB and
//! expected depth, and an analytic backward pass over all map parameters.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3, Vector4};
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

use crate::camera::Intrinsics;
use crate::img::{ColorImage, DepthImage};
use crate::map::{sigmoid, GaussianMap};
use crate::se3::Pose;

/// Numerical guards of the rasterizer. Values are part of the render contract.
#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    /// Splats closer than this are culled, meters.
    pub near: f64,
    /// Splats farther than this are culled, meters.
    pub far: f64,
    /// Diagonal floor added to every projected covariance, pixels^2.
    pub lowpass: f64,
    /// Upper clamp on per-splat alpha.
    pub alpha_clamp: f64,
    /// Compositing stops once transmittance falls below this.
    pub t_stop: f64,
    /// Contributions with alpha below this are skipped.
    pub alpha_skip: f64,
    /// Footprint radius in standard deviations for bounding-box culling.
    pub cull_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            near: 0.01,
            far: 1000.0,
            lowpass: 0.3,
            alpha_clamp: 0.99,
            t_stop: 1e-4,
            alpha_skip: 1.0 / 255.0,
            cull_sigma: 3.0,
        }
    }
}

/// Borrowed world-space Gaussian parameters.
#[derive(Debug, Clone, Copy)]
pub struct SceneView<'a> {
    pub means: &'a [Vector3<f64>],
    pub rotations: &'a [UnitQuaternion<f64>],
    pub log_scales: &'a [Vector3<f64>],
    pub colors: &'a [Vector3<f64>],
    pub opacity_logits: &'a [f64],
}

impl<'a> SceneView<'a> {
    pub fn from_map(map: &'a GaussianMap) -> Self {
        SceneView {
            means: map.means(),
            rotations: map.rotations(),
            log_scales: map.log_scales(),
            colors: map.colors(),
            opacity_logits: map.opacity_logits(),
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// A projected Gaussian ready for compositing.
#[derive(Debug, Clone)]
pub struct Splat2D {
    /// Index of the source primitive.
    pub prim: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub view_z: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
}

/// Composited output buffers, row-major.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub rgb: ColorImage,
    pub depth: DepthImage,
    /// Accumulated opacity per pixel.
    pub alpha: Vec<f64>,
    /// Remaining transmittance per pixel (1 - alpha up to the stop rule).
    pub transmittance: Vec<f64>,
}

/// Gradients of a scalar loss w.r.t. every scene parameter. Quaternion
/// gradients are in storage order `[x, y, z, w]`, already projected onto the
/// unit-norm tangent.
#[derive(Debug, Clone)]
pub struct RenderGradients {
    pub means: Vec<Vector3<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
}

impl RenderGradients {
    fn zeros(n: usize) -> Self {
        RenderGradients {
            means: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            colors: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
        }
    }
}

fn world_cov(rotation: &UnitQuaternion<f64>, log_scales: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation.to_rotation_matrix().into_inner();
    let d = Matrix3::from_diagonal(&log_scales.map(|l| (2.0 * l).exp()));
    r * d * r.transpose()
}

fn projection_jacobian(p: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let z = p.z;
    Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * p.x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * p.y / (z * z),
    )
}

fn max_eigenvalue2(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    mid + (half * half + m[(0, 1)] * m[(0, 1)]).sqrt()
}

fn invert2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det
}

/// Projects one Gaussian into the image; `None` means culled (behind the
/// near plane, beyond the far plane, or footprint fully outside the image).
#[allow(clippy::too_many_arguments)]
pub fn project_gaussian(
    prim: usize,
    mean: &Vector3<f64>,
    rotation: &UnitQuaternion<f64>,
    log_scales: &Vector3<f64>,
    color: &Vector3<f64>,
    opacity_logit: f64,
    world_to_camera: &Pose,
    k: &Intrinsics,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> Option<Splat2D> {
    let p_cam = world_to_camera.transform(mean);
    if p_cam.z <= cfg.near || p_cam.z > cfg.far {
        return None;
    }
    let uv = k.project(&p_cam);
    let w = world_to_camera.rotation_matrix();
    let sigma_cam = w * world_cov(rotation, log_scales) * w.transpose();
    let j = projection_jacobian(&p_cam, k);
    let cov2d = j * sigma_cam * j.transpose() + Matrix2::identity() * cfg.lowpass;
    let radius = cfg.cull_sigma * max_eigenvalue2(&cov2d).sqrt();
    if uv.x + radius < 0.0
        || uv.y + radius < 0.0
        || uv.x - radius > (width - 1) as f64
        || uv.y - radius > (height - 1) as f64
    {
        return None;
    }
    Some(Splat2D {
        prim,
        mean2d: uv,
        cov2d,
        view_z: p_cam.z,
        color: *color,
        opacity: sigmoid(opacity_logit),
    })
}

/// All visible splats sorted front to back (ties broken by primitive index).
fn project_all(
    scene: &SceneView,
    world_to_camera: &Pose,
    k: &Intrinsics,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> Vec<Splat2D> {
    let mut splats = Vec::with_capacity(scene.len());
    for i in 0..scene.len() {
        if let Some(s) = project_gaussian(
            i,
            &scene.means[i],
            &scene.rotations[i],
            &scene.log_scales[i],
            &scene.colors[i],
            scene.opacity_logits[i],
            world_to_camera,
            k,
            width,
            height,
            cfg,
        ) {
            splats.push(s);
        }
    }
    splats.sort_by(|a, b| {
        (a.view_z, a.prim)
            .partial_cmp(&(b.view_z, b.prim))
            .expect("finite depths")
    });
    splats
}

fn pixel_bounds(
    s: &Splat2D,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> (usize, usize, usize, usize) {
    let radius = cfg.cull_sigma * max_eigenvalue2(&s.cov2d).sqrt();
    let u0 = (s.mean2d.x - radius).floor().max(0.0) as usize;
    let v0 = (s.mean2d.y - radius).floor().max(0.0) as usize;
    let u1 = (s.mean2d.x + radius).ceil().min((width - 1) as f64) as usize;
    let v1 = (s.mean2d.y + radius).ceil().min((height - 1) as f64) as usize;
    (u0, v0, u1, v1)
}

/// Renders the scene from `camera_pose` (camera-to-world).
pub fn render(
    scene: &SceneView,
    camera_pose: &Pose,
    k: &Intrinsics,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> RenderedFrame {
    let w2c = camera_pose.inverse();
    let splats = project_all(scene, &w2c, k, width, height, cfg);
    let n = width * height;
    let mut rgb = vec![0.0; n * 3];
    let mut zw = vec![0.0; n];
    let mut wsum = vec![0.0; n];
    let mut trans = vec![1.0; n];

    for s in &splats {
        let info = invert2(&s.cov2d);
        let (u0, v0, u1, v1) = pixel_bounds(s, width, height, cfg);
        for v in v0..=v1 {
            for u in u0..=u1 {
                let p = v * width + u;
                if trans[p] < cfg.t_stop {
                    continue;
                }
                let delta = Vector2::new(u as f64 - s.mean2d.x, v as f64 - s.mean2d.y);
                let q = -0.5 * delta.dot(&(info * delta));
                let alpha = (s.opacity * q.exp()).min(cfg.alpha_clamp);
                if alpha < cfg.alpha_skip {
                    continue;
                }
                let w = alpha * trans[p];
                rgb[p * 3] += w * s.color.x;
                rgb[p * 3 + 1] += w * s.color.y;
                rgb[p * 3 + 2] += w * s.color.z;
                zw[p] += w * s.view_z;
                wsum[p] += w;
                trans[p] *= 1.0 - alpha;
            }
        }
    }

    let mut depth = DepthImage::new(width, height);
    for p in 0..n {
        if wsum[p] > 0.0 {
            depth.data[p] = zw[p] / wsum[p];
        }
    }
    RenderedFrame {
        rgb: ColorImage::from_data(width, height, rgb),
        depth,
        alpha: wsum,
        transmittance: trans,
    }
}

/// Per-pixel forward state needed to replay compositing in reverse.
struct ForwardState {
    wsum: Vec<f64>,
    depth: Vec<f64>,
    t_final: Vec<f64>,
    /// Number of alpha-passing touches actually composited per pixel.
    contributed: Vec<u32>,
    /// Total alpha-passing touches per pixel, including ones after the stop.
    passed: Vec<u32>,
}

fn forward_with_counts(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    cfg: &RenderConfig,
) -> ForwardState {
    let n = width * height;
    let mut zw = vec![0.0; n];
    let mut state = ForwardState {
        wsum: vec![0.0; n],
        depth: vec![0.0; n],
        t_final: vec![1.0; n],
        contributed: vec![0; n],
        passed: vec![0; n],
    };
    for s in splats {
        let info = invert2(&s.cov2d);
        let (u0, v0, u1, v1) = pixel_bounds(s, width, height, cfg);
        for v in v0..=v1 {
            for u in u0..=u1 {
                let p = v * width + u;
                let delta = Vector2::new(u as f64 - s.mean2d.x, v as f64 - s.mean2d.y);
                let q = -0.5 * delta.dot(&(info * delta));
                let alpha = (s.opacity * q.exp()).min(cfg.alpha_clamp);
                if alpha < cfg.alpha_skip {
                    continue;
                }
                state.passed[p] += 1;
                if state.t_final[p] < cfg.t_stop {
                    continue;
                }
                state.contributed[p] += 1;
                let w = alpha * state.t_final[p];
                zw[p] += w * s.view_z;
                state.wsum[p] += w;
                state.t_final[p] *= 1.0 - alpha;
            }
        }
    }
    for p in 0..n {
        if state.wsum[p] > 0.0 {
            state.depth[p] = zw[p] / state.wsum[p];
        }
    }
    state
}

/// Gradients of `sum(g_rgb * rgb) + sum(g_depth * depth)` w.r.t. the scene.
///
/// `g_rgb` is row-major interleaved RGB (width*height*3), `g_depth` row-major
/// (width*height). Culled splats receive zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    scene: &SceneView,
    camera_pose: &Pose,
    k: &Intrinsics,
    width: usize,
    height: usize,
    cfg: &RenderConfig,
    g_rgb: &[f64],
    g_depth: &[f64],
) -> RenderGradients {
    assert_eq!(g_rgb.len(), width * height * 3);
    assert_eq!(g_depth.len(), width * height);
    let w2c = camera_pose.inverse();
    let splats = project_all(scene, &w2c, k, width, height, cfg);
    let state = forward_with_counts(&splats, width, height, cfg);
    let mut grads = RenderGradients::zeros(scene.len());

    let n = width * height;
    let mut t_cur = state.t_final.clone();
    let mut remaining = state.passed.clone();
    // Suffix sums over splats already visited in reverse (i.e. behind j).
    let mut acc_rgb = vec![Vector3::<f64>::zeros(); n];
    let mut acc_z = vec![0.0; n];
    let mut acc_w = vec![0.0; n];

    for s in splats.iter().rev() {
        let info = invert2(&s.cov2d);
        let (u0, v0, u1, v1) = pixel_bounds(s, width, height, cfg);
        let mut d_mean2d = Vector2::<f64>::zeros();
        let mut d_cov2d = Matrix2::<f64>::zeros();
        let mut d_opacity = 0.0;
        let mut d_color = Vector3::<f64>::zeros();
        let mut d_view_z = 0.0;

        for v in v0..=v1 {
            for u in u0..=u1 {
                let p = v * width + u;
                let delta = Vector2::new(u as f64 - s.mean2d.x, v as f64 - s.mean2d.y);
                let q = -0.5 * delta.dot(&(info * delta));
                let g_exp = q.exp();
                let alpha_raw = s.opacity * g_exp;
                let alpha = alpha_raw.min(cfg.alpha_clamp);
                if alpha < cfg.alpha_skip {
                    continue;
                }
                let order = remaining[p];
                remaining[p] -= 1;
                if order > state.contributed[p] {
                    continue; // Skipped by the transmittance stop in forward.
                }
                let one_minus = 1.0 - alpha;
                let t_j = t_cur[p] / one_minus;
                let w_j = alpha * t_j;

                let gp = Vector3::new(g_rgb[p * 3], g_rgb[p * 3 + 1], g_rgb[p * 3 + 2]);
                let wsum = state.wsum[p];
                let (u_j, s_after) = if wsum > 0.0 {
                    let gd = g_depth[p] / wsum;
                    (
                        s.color.dot(&gp) + gd * (s.view_z - state.depth[p]),
                        gp.dot(&acc_rgb[p]) + gd * (acc_z[p] - state.depth[p] * acc_w[p]),
                    )
                } else {
                    (s.color.dot(&gp), gp.dot(&acc_rgb[p]))
                };
                let d_alpha = t_j * u_j - s_after / one_minus;

                d_color += w_j * gp;
                if wsum > 0.0 {
                    d_view_z += w_j * g_depth[p] / wsum;
                }
                // Alpha chain is flat where the clamp is active.
                if alpha_raw < cfg.alpha_clamp {
                    d_opacity += d_alpha * g_exp;
                    let d_q = d_alpha * s.opacity * g_exp;
                    let r = info * delta;
                    d_mean2d += d_q * r;
                    d_cov2d += (d_q * 0.5) * (r * r.transpose());
                }

                t_cur[p] = t_j;
                acc_rgb[p] += w_j * s.color;
                acc_z[p] += w_j * s.view_z;
                acc_w[p] += w_j;
            }
        }

        backpropagate_projection(
            scene, s, &w2c, k, cfg, &d_mean2d, &d_cov2d, d_opacity, &d_color, d_view_z, &mut grads,
        );
    }
    grads
}

/// Chains 2D gradients of one splat back to its 3D parameters.
#[allow(clippy::too_many_arguments)]
fn backpropagate_projection(
    scene: &SceneView,
    s: &Splat2D,
    w2c: &Pose,
    k: &Intrinsics,
    _cfg: &RenderConfig,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
    d_opacity: f64,
    d_color: &Vector3<f64>,
    d_view_z: f64,
    grads: &mut RenderGradients,
) {
    let i = s.prim;
    let mean = scene.means[i];
    let rot_q = scene.rotations[i];
    let ls = scene.log_scales[i];

    let w = w2c.rotation_matrix();
    let p_cam = w2c.transform(&mean);
    let z = p_cam.z;
    let j = projection_jacobian(&p_cam, k);
    let r = rot_q.to_rotation_matrix().into_inner();
    let d2 = ls.map(|l| (2.0 * l).exp()); // squared scales
    let sigma_w = r * Matrix3::from_diagonal(&d2) * r.transpose();
    let sigma_cam = w * sigma_w * w.transpose();

    // cov2d = J sigma_cam J^T + lowpass I.
    let d_sigma_cam = j.transpose() * d_cov2d * j;
    let d_j = (d_cov2d + d_cov2d.transpose()) * j * sigma_cam;
    let d_sigma_w = w.transpose() * d_sigma_cam * w;

    // sigma_w = R diag(d2) R^T.
    let d_r = (d_sigma_w + d_sigma_w.transpose()) * r * Matrix3::from_diagonal(&d2);
    let rt_gw_r = r.transpose() * d_sigma_w * r;
    for axis in 0..3 {
        grads.log_scales[i][axis] += 2.0 * d2[axis] * rt_gw_r[(axis, axis)];
    }

    // Camera-point gradient: through the pixel projection, through the
    // projection Jacobian entries, and directly through view_z.
    let mut d_p_cam = j.transpose() * d_mean2d;
    let z2 = z * z;
    let z3 = z2 * z;
    d_p_cam.x += d_j[(0, 2)] * (-k.fx / z2);
    d_p_cam.y += d_j[(1, 2)] * (-k.fy / z2);
    d_p_cam.z += d_j[(0, 0)] * (-k.fx / z2)
        + d_j[(1, 1)] * (-k.fy / z2)
        + d_j[(0, 2)] * (2.0 * k.fx * p_cam.x / z3)
        + d_j[(1, 2)] * (2.0 * k.fy * p_cam.y / z3);
    d_p_cam.z += d_view_z;
    grads.means[i] += w.transpose() * d_p_cam;

    // Quaternion gradient in storage order [x, y, z, w], projected onto the
    // tangent of the unit sphere (parameters are renormalized after updates).
    let (qw, qx, qy, qz) = (rot_q.w, rot_q.i, rot_q.j, rot_q.k);
    let dr_dx = Matrix3::new(0.0, qy, qz, qy, -2.0 * qx, -qw, qz, qw, -2.0 * qx) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * qy, qx, qw, qx, 0.0, qz, -qw, qz, -2.0 * qy) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * qz, -qw, qx, qw, -2.0 * qz, qy, qx, qy, 0.0) * 2.0;
    let dr_dw = Matrix3::new(0.0, -qz, qy, qz, 0.0, -qx, -qy, qx, 0.0) * 2.0;
    let g_hat = Vector4::new(
        d_r.dot(&dr_dx),
        d_r.dot(&dr_dy),
        d_r.dot(&dr_dz),
        d_r.dot(&dr_dw),
    );
    let c = Vector4::new(qx, qy, qz, qw);
    grads.rotations[i] += (Matrix4::identity() - c * c.transpose()) * g_hat;

    grads.colors[i] += d_color;
    let o = s.opacity;
    grads.opacity_logits[i] += d_opacity * o * (1.0 - o);
}
