//! Rigid transforms on SE(3) with a twist parameterization for optimization.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

/// A rigid transform: rotation (unit quaternion) plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a (possibly slightly non-orthonormal) rotation matrix.
    pub fn from_matrix(rot: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_matrix(rot);
        Self {
            rotation: UnitQuaternion::from_rotation_matrix(&r),
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.inverse();
        Self {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// Composition `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Exponential map of a twist `[omega, v]` (rotation first).
    pub fn exp(twist: &Vector6<f64>) -> Self {
        let omega = Vector3::new(twist[0], twist[1], twist[2]);
        let v = Vector3::new(twist[3], twist[4], twist[5]);
        let rotation = UnitQuaternion::from_scaled_axis(omega);
        let translation = left_jacobian(&omega) * v;
        Self {
            rotation,
            translation,
        }
    }

    /// Logarithm map, inverse of [`Pose::exp`].
    pub fn log(&self) -> Vector6<f64> {
        let omega = self.rotation.scaled_axis();
        let v = left_jacobian_inv(&omega) * self.translation;
        Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }

    /// Rotation angle in radians between the two poses.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

impl core::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// SO(3) left Jacobian; maps the translational twist component to a translation.
fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let s = skew(omega);
    if theta2 < 1e-14 {
        return Matrix3::identity() + 0.5 * s + (s * s) / 6.0;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() + a * s + b * (s * s)
}

fn left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let s = skew(omega);
    if theta2 < 1e-14 {
        return Matrix3::identity() - 0.5 * s + (s * s) / 12.0;
    }
    let theta = theta2.sqrt();
    let half = 0.5 * theta;
    let cot = half.cos() / half.sin();
    let b = (1.0 - half * cot) / theta2;
    Matrix3::identity() - 0.5 * s + b * (s * s)
}
