//! Synthetic RGBD sequences with exact ground truth: a textured box room
//! observed from an orbiting camera, with analytic ray-box depth and an
//! optional depth-dependent noise model.

use alloc::vec::Vec;
use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
#[allow(unused_imports)] // float methods without std
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Intrinsics;
use crate::frame::Frame;
use crate::img::{ColorImage, DepthImage};
use crate::se3::Pose;

/// Depth-dependent Gaussian noise: sigma(z) = base + quad * z^2.
#[derive(Debug, Clone, Copy)]
pub struct DepthNoise {
    pub base: f64,
    pub quad: f64,
}

/// Parameters of the synthetic room and camera path.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Half-extents of the axis-aligned room, meters.
    pub room_half: Vector3<f64>,
    /// Radius of the circular orbit in the xz plane, meters.
    pub orbit_radius: f64,
    /// Amplitude of vertical bobbing along the orbit, meters.
    pub bob_amplitude: f64,
    /// Number of orbit revolutions over the whole sequence.
    pub revolutions: f64,
    /// Seconds between consecutive frames.
    pub frame_dt: f64,
    pub depth_noise: Option<DepthNoise>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 160,
            height: 120,
            room_half: Vector3::new(2.0, 1.5, 2.0),
            orbit_radius: 0.9,
            bob_amplitude: 0.25,
            revolutions: 1.0,
            frame_dt: 1.0 / 30.0,
            depth_noise: None,
        }
    }
}

/// Axis-aligned solid block inside the room.
#[derive(Debug, Clone, Copy)]
struct Block {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Block {
    /// First entry hit of a ray starting outside: (ray parameter, face axis,
    /// face normal sign).
    fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize, f64)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut face = (0usize, 1.0f64);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let ta = (self.min[a] - origin[a]) * inv;
            let tb = (self.max[a] - origin[a]) * inv;
            let (t0, t1) = if ta < tb { (ta, tb) } else { (tb, ta) };
            if t0 > t_near {
                t_near = t0;
                face = (a, -dir[a].signum());
            }
            t_far = t_far.min(t1);
        }
        if t_near <= t_far && t_near > 0.0 {
            Some((t_near, face.0, face.1))
        } else {
            None
        }
    }
}

/// Solid sphere inside the room.
#[derive(Debug, Clone, Copy)]
struct Ball {
    center: Vector3<f64>,
    radius: f64,
}

impl Ball {
    fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let oc = origin - self.center;
        let a = dir.norm_squared();
        let b = oc.dot(dir);
        let c = oc.norm_squared() - self.radius * self.radius;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let t = (-b - disc.sqrt()) / a;
        if t > 0.0 {
            Some(t)
        } else {
            None
        }
    }
}

/// Generator for frames of one synthetic sequence.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub cfg: SynthConfig,
    pub intrinsics: Intrinsics,
    blocks: Vec<Block>,
    balls: Vec<Ball>,
}

/// Camera-to-world pose looking from `eye` toward `target`; the image x axis
/// is kept orthogonal to `up_hint`.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up_hint: &Vector3<f64>) -> Pose {
    let forward = Unit::new_normalize(target - eye);
    let mut hint = *up_hint;
    if forward.cross(&hint).norm() < 1e-9 {
        hint = Vector3::new(1.0, 0.0, 0.0);
    }
    let right = Unit::new_normalize(hint.cross(&forward));
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right.into_inner(), down, forward.into_inner()]);
    Pose::new(
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r)),
        *eye,
    )
}

/// Fixed furniture staggered around the orbit so every outward view contains
/// several surface orientations: a bare box room leaves in-plane motion
/// unconstrained for plane-to-plane registration. Tables and soffits expose
/// horizontal faces inside the camera's vertical frustum (tops at y <= -0.45,
/// undersides at y >= 0.45 stay visible through the full height bob), while
/// mid-height balls add curved surfaces whose normals pin all translations.
fn furniture() -> (Vec<Block>, Vec<Ball>) {
    let mut blocks = Vec::new();
    let mut balls = Vec::new();
    // Slot distance keeps every surface at least ~0.35 m from the orbit:
    // closer approaches let one object fill the view and leave rotation about
    // its center unpriced.
    let radial = 1.62;
    // Slots sit 15 degrees off the axes so axial rays from the room center
    // keep hitting bare walls.
    for k in 0..8usize {
        let az = k as f64 * core::f64::consts::FRAC_PI_4 + 15f64.to_radians();
        let (cx, cz) = (radial * az.cos(), radial * az.sin());
        match k {
            0 | 4 => {
                let half = if k == 0 { 0.32 } else { 0.34 };
                blocks.push(Block {
                    min: Vector3::new(cx - half, -1.5, cz - half),
                    max: Vector3::new(cx + half, -0.45, cz + half),
                });
            }
            2 | 6 => {
                let half = if k == 2 { 0.30 } else { 0.34 };
                blocks.push(Block {
                    min: Vector3::new(cx - half, 0.45, cz - half),
                    max: Vector3::new(cx + half, 1.5, cz + half),
                });
            }
            1 | 5 => {
                let r = if k == 1 { 0.44 } else { 0.40 };
                balls.push(Ball {
                    center: Vector3::new(cx, -0.27, cz),
                    radius: r,
                });
            }
            _ => {
                let r = if k == 3 { 0.46 } else { 0.38 };
                balls.push(Ball {
                    center: Vector3::new(cx, 0.27, cz),
                    radius: r,
                });
            }
        }
    }
    // Wall pilasters: full-height columns at irregular spacings. A bare wall
    // constrains only its normal, so along-wall sliding re-associates to the
    // next sample and costs nothing; the pilaster fronts break every wall
    // into two offset planes whose mismatch prices that slide. Positions keep
    // clear of the axes (|c| >= 0.25) so axial rays still hit bare wall.
    let protrusion = 0.12;
    let hw = 0.15;
    let walls: [(usize, f64, [f64; 4]); 4] = [
        (0, 1.0, [-1.52, -0.42, 0.63, 1.38]),
        (0, -1.0, [-1.28, -0.25, 0.85, 1.57]),
        (2, 1.0, [-1.47, -0.58, 0.52, 1.33]),
        (2, -1.0, [-1.60, -0.70, 0.38, 1.22]),
    ];
    for (axis, sign, spots) in walls {
        for c in spots {
            let (mut min, mut max) = (Vector3::new(-2.0, -1.5, -2.0), Vector3::new(2.0, 1.5, 2.0));
            if sign < 0.0 {
                max[axis] = -2.0 + protrusion;
            } else {
                min[axis] = 2.0 - protrusion;
            }
            let lateral = if axis == 0 { 2 } else { 0 };
            min[lateral] = c - hw;
            max[lateral] = c + hw;
            blocks.push(Block { min, max });
        }
    }
    (blocks, balls)
}

impl SynthScene {
    pub fn new(cfg: SynthConfig) -> Self {
        let fx = 0.5 * cfg.width as f64;
        let intrinsics = Intrinsics::new(fx, fx, 0.5 * cfg.width as f64, 0.5 * cfg.height as f64);
        let (blocks, balls) = furniture();
        SynthScene {
            cfg,
            intrinsics,
            blocks,
            balls,
        }
    }

    /// Ground-truth camera-to-world pose at path parameter `t` in [0, 1].
    ///
    /// The parameter is eased (smoothstep) so the camera accelerates from
    /// rest: inter-frame motion stays well inside the tracking prior's
    /// convergence basin even before a velocity estimate exists.
    pub fn pose(&self, t: f64) -> Pose {
        let eased = t * t * (3.0 - 2.0 * t);
        let angle = core::f64::consts::TAU * self.cfg.revolutions * eased;
        let eye = Vector3::new(
            self.cfg.orbit_radius * angle.cos(),
            self.cfg.bob_amplitude * (2.0 * angle).sin(),
            self.cfg.orbit_radius * angle.sin(),
        );
        // Look outward past the room center so every frame faces a wall.
        let target = Vector3::new(
            2.0 * self.cfg.orbit_radius * angle.cos(),
            0.0,
            2.0 * self.cfg.orbit_radius * angle.sin(),
        );
        look_at(&eye, &target, &Vector3::new(0.0, 1.0, 0.0))
    }

    /// First hit of the interior ray `origin + s * dir` on the room walls:
    /// (ray parameter, wall axis, wall sign).
    fn cast_room(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, usize, f64) {
        let mut best = f64::INFINITY;
        let mut wall = (0, 1.0);
        for axis in 0..3 {
            if dir[axis] == 0.0 {
                continue;
            }
            let sign = if dir[axis] > 0.0 { 1.0 } else { -1.0 };
            let s = (sign * self.cfg.room_half[axis] - origin[axis]) / dir[axis];
            if s > 0.0 && s < best {
                best = s;
                wall = (axis, sign);
            }
        }
        (best, wall.0, wall.1)
    }

    /// Nearest surface along the ray: (ray parameter, surface key, hit point,
    /// texture coordinates). Walls key 0..6, block faces and balls follow.
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, usize, Vector3<f64>, (f64, f64)) {
        let (mut t, axis, sign) = self.cast_room(origin, dir);
        let mut key = axis * 2 + (sign > 0.0) as usize;
        let mut face = Some((axis, sign));
        for (bi, b) in self.blocks.iter().enumerate() {
            if let Some((tb, a, s)) = b.ray_hit(origin, dir) {
                if tb < t {
                    t = tb;
                    key = 6 + bi * 6 + a * 2 + (s > 0.0) as usize;
                    face = Some((a, s));
                }
            }
        }
        for (si, s) in self.balls.iter().enumerate() {
            if let Some(ts) = s.ray_hit(origin, dir) {
                if ts < t {
                    t = ts;
                    key = 6 + self.blocks.len() * 6 + si;
                    face = None;
                }
            }
        }
        let point = origin + t * dir;
        let uv = match face {
            Some((a, _)) => match a {
                0 => (point.y, point.z),
                1 => (point.x, point.z),
                _ => (point.x, point.y),
            },
            None => {
                // Sphere: azimuth of the surface normal and height.
                let c = self.balls[key - 6 - self.blocks.len() * 6].center;
                let n = point - c;
                (n.z.atan2(n.x), 3.0 * point.y)
            }
        };
        (t, key, point, uv)
    }

    /// Smooth procedural texture; channels stay inside (0, 1) and vary slowly
    /// enough for splats to fit them.
    fn surface_color(&self, key: usize, uv: (f64, f64)) -> [f64; 3] {
        const PALETTE: [[f64; 3]; 14] = [
            [0.8, 0.4, 0.3],
            [0.3, 0.7, 0.4],
            [0.7, 0.7, 0.3],
            [0.4, 0.4, 0.8],
            [0.8, 0.5, 0.7],
            [0.4, 0.7, 0.7],
            [0.75, 0.55, 0.25],
            [0.3, 0.5, 0.8],
            [0.65, 0.3, 0.6],
            [0.35, 0.75, 0.35],
            [0.8, 0.65, 0.5],
            [0.5, 0.35, 0.75],
            [0.7, 0.45, 0.45],
            [0.45, 0.65, 0.6],
        ];
        let base = if key < 6 {
            PALETTE[key]
        } else {
            PALETTE[6 + (key - 6) % 8]
        };
        let (u, v) = uv;
        let mut rgb = [0.0; 3];
        for (c, slot) in rgb.iter_mut().enumerate() {
            let phase = 1.3 * c as f64;
            let wave = 0.30 * (4.0 * u + phase).sin() * (3.1 * v).cos()
                + 0.18 * (2.2 * v - phase).sin();
            *slot = (base[c] * (0.75 + wave)).clamp(0.02, 0.98);
        }
        rgb
    }

    /// Renders the ground-truth RGBD observation from an arbitrary pose.
    pub fn observe(&self, pose: &Pose, index: usize, rng: Option<&mut ChaCha8Rng>) -> Frame {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let mut color = ColorImage::new(w, h);
        let mut depth = DepthImage::new(w, h);
        let rot = pose.rotation_matrix();
        for v in 0..h {
            for u in 0..w {
                let dir_cam = Vector3::new(
                    (u as f64 - self.intrinsics.cx) / self.intrinsics.fx,
                    (v as f64 - self.intrinsics.cy) / self.intrinsics.fy,
                    1.0,
                );
                let dir = rot * dir_cam;
                let (s, key, _hit, uv) = self.cast(&pose.translation, &dir);
                // Ray parameter equals camera-frame z because dir_cam.z = 1.
                depth.set(u, v, s);
                color.set(u, v, self.surface_color(key, uv));
            }
        }
        if let (Some(noise), Some(rng)) = (self.cfg.depth_noise, rng) {
            for d in depth.data.iter_mut() {
                let sigma = noise.base + noise.quad * *d * *d;
                *d += sigma * gaussian_sample(rng);
            }
        }
        Frame {
            color,
            depth,
            intrinsics: self.intrinsics,
            index,
            timestamp: index as f64 * self.cfg.frame_dt,
        }
    }

    /// Frame `index` of a `total`-frame sweep along the orbit, with its
    /// ground-truth pose.
    pub fn frame(&self, index: usize, total: usize, rng: Option<&mut ChaCha8Rng>) -> (Frame, Pose) {
        let t = index as f64 / total as f64;
        let pose = self.pose(t);
        (self.observe(&pose, index, rng), pose)
    }
}

/// Standard normal sample via Box-Muller.
fn gaussian_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos()
}

/// Deterministic full sequence: frames plus ground-truth poses.
pub fn orbit_sequence(scene: &SynthScene, frames: usize, noise_seed: u64) -> (Vec<Frame>, Vec<Pose>) {
    let mut rng = scene
        .cfg
        .depth_noise
        .map(|_| <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(noise_seed));
    let mut out_frames = Vec::with_capacity(frames);
    let mut out_poses = Vec::with_capacity(frames);
    for i in 0..frames {
        let (f, p) = scene.frame(i, frames, rng.as_mut());
        out_frames.push(f);
        out_poses.push(p);
    }
    (out_frames, out_poses)
}

/// Random points on the interior surface of a box with the given half
/// extents; used for registration stress tests.
pub fn sample_box_surface(
    half: &Vector3<f64>,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vector3<f64>> {
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        let axis = rng.random_range(0..3usize);
        let sign = if rng.random_range(0..2u8) == 0 { -1.0 } else { 1.0 };
        let mut p = Vector3::new(
            rng.random_range(-half.x..half.x),
            rng.random_range(-half.y..half.y),
            rng.random_range(-half.z..half.z),
        );
        p[axis] = sign * half[axis];
        pts.push(p);
    }
    pts
}
