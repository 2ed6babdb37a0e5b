//! Trajectory and image-quality metrics.

use alloc::vec::Vec;
use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

use crate::img::ColorImage;
use crate::se3::Pose;

/// Best rigid transform (rotation, translation) mapping `source` points onto
/// `target` points in the least-squares sense (no scale).
pub fn rigid_align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    assert_eq!(source.len(), target.len());
    assert!(!source.is_empty());
    let n = source.len() as f64;
    let sc: Vector3<f64> = source.iter().sum::<Vector3<f64>>() / n;
    let tc: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target.iter()) {
        h += (s - sc) * (t - tc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd");
    let vt = svd.v_t.expect("svd");
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        // Reflection fix: flip the axis of least singular value.
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = vt.transpose() * d * u.transpose();
    }
    let t = tc - r * sc;
    (r, t)
}

/// Absolute trajectory error RMSE in meters after rigid alignment of the
/// estimated positions onto the reference positions.
pub fn ate_rmse(estimated: &[Pose], reference: &[Pose]) -> f64 {
    assert_eq!(estimated.len(), reference.len());
    assert!(!estimated.is_empty());
    let est: Vec<Vector3<f64>> = estimated.iter().map(|p| p.translation).collect();
    let gt: Vec<Vector3<f64>> = reference.iter().map(|p| p.translation).collect();
    let (r, t) = rigid_align(&est, &gt);
    let mut sum = 0.0;
    for (e, g) in est.iter().zip(gt.iter()) {
        sum += (r * e + t - g).norm_squared();
    }
    (sum / est.len() as f64).sqrt()
}

/// Absolute trajectory error RMSE in centimeters.
pub fn ate_rmse_cm(estimated: &[Pose], reference: &[Pose]) -> f64 {
    100.0 * ate_rmse(estimated, reference)
}

/// Peak signal-to-noise ratio in dB for unit-range images; identical images
/// yield positive infinity.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> f64 {
    assert_eq!(a.width, b.width);
    assert_eq!(a.height, b.height);
    let mut mse = 0.0;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        mse += (x - y) * (x - y);
    }
    mse /= a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_trajectory(n: usize, seed: u64) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Pose::new(
                    UnitQuaternion::from_euler_angles(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                    Vector3::new(
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ),
                )
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let traj = random_trajectory(20, 1);
        assert_relative_eq!(ate_rmse(&traj, &traj), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rigidly_moved_trajectory_aligns_to_zero() {
        let traj = random_trajectory(25, 2);
        let offset = Pose::new(
            UnitQuaternion::from_euler_angles(0.3, -0.5, 0.9),
            Vector3::new(1.0, -4.0, 2.5),
        );
        let moved: Vec<Pose> = traj.iter().map(|p| offset.compose(p)).collect();
        assert!(ate_rmse(&moved, &traj) < 1e-9);
    }

    #[test]
    fn known_residual_pattern() {
        // Positions on the x axis; estimate shifted +d on alternating sides of
        // y so alignment cannot remove it entirely. With +d, -d alternating
        // around the centroid the best rigid fit keeps residual d on y.
        let gt: Vec<Pose> = (0..4)
            .map(|i| Pose::new(UnitQuaternion::identity(), Vector3::new(i as f64, 0.0, 0.0)))
            .collect();
        let d = 0.02;
        let est: Vec<Pose> = (0..4)
            .map(|i| {
                let y = if i % 2 == 0 { d } else { -d };
                Pose::new(UnitQuaternion::identity(), Vector3::new(i as f64, y, 0.0))
            })
            .collect();
        let err = ate_rmse(&est, &gt);
        assert!(err > 0.0 && err <= d + 1e-9, "err {err}");
        assert_relative_eq!(ate_rmse_cm(&est, &gt), 100.0 * err, epsilon = 1e-12);
    }

    #[test]
    fn alignment_recovers_exact_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..30)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let r_true = UnitQuaternion::from_euler_angles(0.4, -0.2, 1.1)
            .to_rotation_matrix()
            .into_inner();
        let t_true = Vector3::new(0.5, -1.5, 3.0);
        let moved: Vec<Vector3<f64>> = pts.iter().map(|p| r_true * p + t_true).collect();
        let (r, t) = rigid_align(&pts, &moved);
        assert_relative_eq!(r, r_true, epsilon = 1e-9);
        assert_relative_eq!(t, t_true, epsilon = 1e-9);
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let img = ColorImage::filled(8, 8, [0.5, 0.2, 0.9]);
        assert!(psnr(&img, &img).is_infinite());
    }

    #[test]
    fn psnr_uniform_offset_matches_closed_form() {
        let a = ColorImage::filled(8, 8, [0.5, 0.5, 0.5]);
        let b = ColorImage::filled(8, 8, [0.6, 0.6, 0.6]);
        // MSE = 0.01 -> PSNR = 20 dB.
        assert_relative_eq!(psnr(&a, &b), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = ColorImage::filled(16, 16, [0.5, 0.5, 0.5]);
        let mut small = a.clone();
        let mut large = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..small.data.len() {
            let n: f64 = rng.random_range(-1.0..1.0);
            small.data[i] += 0.01 * n;
            large.data[i] += 0.1 * n;
        }
        assert!(psnr(&a, &small) > psnr(&a, &large));
    }
}
