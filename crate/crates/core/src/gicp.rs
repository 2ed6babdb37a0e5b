//! Generalized-ICP registration: covariance decomposition and regularization,
//! and Gauss-Newton alignment of a source Gaussian cloud to target Gaussians.

use alloc::vec::Vec;
use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

use crate::kdtree::KdTree;
use crate::se3::{skew, Pose};

/// Standard-deviation floor corresponding to the covariance eigenvalue floor.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Covariance regularization mode applied before registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Regularization {
    /// Covariances used as estimated.
    None,
    /// Scales forced to `[1, 1, eps]`: every Gaussian becomes a normalized disc.
    Plane,
    /// Scales divided by their median: shape kept, size normalized.
    #[default]
    Ellipse,
}

/// Rotation + standard-deviation scales of a covariance, `C = R diag(S)^2 R^T`.
///
/// Scales are in descending order `[s2, s1, s0]`; axes form a right-handed frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovDecomposition {
    pub axes: Matrix3<f64>,
    pub scales: Vector3<f64>,
}

impl CovDecomposition {
    /// Rebuilds the covariance matrix `R diag(S)^2 R^T`.
    pub fn reconstruct(&self) -> Matrix3<f64> {
        let d = Matrix3::from_diagonal(&self.scales.map(|s| s * s));
        self.axes * d * self.axes.transpose()
    }
}

/// Matched pairs and residuals from the final alignment iteration.
#[derive(Debug, Clone, Default)]
pub struct CorrespondenceReport {
    /// `(source index, target index)` pairs within the distance gate.
    pub pairs: Vec<(usize, usize)>,
    /// Residuals `d_i = y_i - T x_i`, parallel to `pairs`.
    pub residuals: Vec<Vector3<f64>>,
    /// Sum of squared Mahalanobis terms over the pairs.
    pub cost: f64,
    pub inlier_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GicpError {
    /// Input matrix was not symmetric within tolerance.
    NotSymmetric,
    /// Too few correspondences within the distance gate; carries the last
    /// valid pose estimate.
    TrackingLost { found: usize, last_pose: Pose },
    /// The fused covariance of the named pair could not be inverted.
    SingularPair(usize),
    /// Source or target cloud was empty.
    EmptyInput,
}

impl core::fmt::Display for GicpError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GicpError::NotSymmetric => write!(f, "covariance not symmetric"),
            GicpError::TrackingLost { found, .. } => {
                write!(f, "tracking lost: only {found} correspondences")
            }
            GicpError::SingularPair(i) => write!(f, "singular fused covariance at pair {i}"),
            GicpError::EmptyInput => write!(f, "empty source or target cloud"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GicpError {}

/// Registration parameters; defaults are room-scale.
#[derive(Debug, Clone, Copy)]
pub struct GicpConfig {
    pub mode: Regularization,
    /// Correspondences farther than this (meters) are discarded.
    pub max_corr_dist: f64,
    /// Below this many pairs the solver reports tracking lost.
    pub min_pairs: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the twist update norm.
    pub conv_tol: f64,
    /// Smallest scale used by plane regularization.
    pub plane_eps: f64,
}

impl Default for GicpConfig {
    fn default() -> Self {
        GicpConfig {
            mode: Regularization::Ellipse,
            max_corr_dist: 0.5,
            min_pairs: 50,
            max_iterations: 30,
            conv_tol: 1e-6,
            plane_eps: 1e-3,
        }
    }
}

/// Views of the two clouds being registered. Covariances must already be
/// regularized consistently on both sides.
#[derive(Debug, Clone, Copy)]
pub struct AlignInput<'a> {
    pub source_points: &'a [Vector3<f64>],
    pub source_covs: &'a [Matrix3<f64>],
    pub target_points: &'a [Vector3<f64>],
    pub target_covs: &'a [Matrix3<f64>],
    pub target_index: &'a KdTree,
}

/// Result of [`align`]: optimized pose, final-iteration report, convergence flag.
#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub pose: Pose,
    pub report: CorrespondenceReport,
    /// False when the iteration cap was hit before the update norm converged.
    pub converged: bool,
}

/// Splits a covariance into rotation axes and descending standard deviations.
pub fn decompose_covariance(c: &Matrix3<f64>) -> Result<CovDecomposition, GicpError> {
    let asym = (c - c.transpose()).abs().max();
    if asym > 1e-9 * (1.0 + c.abs().max()) {
        return Err(GicpError::NotSymmetric);
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let mut axes = Matrix3::zeros();
    let mut scales = Vector3::zeros();
    for (col, &src) in order.iter().enumerate() {
        axes.set_column(col, &eig.eigenvectors.column(src));
        scales[col] = eig.eigenvalues[src].max(0.0).sqrt();
    }
    // Keep the frame right-handed so it can be stored as a quaternion.
    if axes.determinant() < 0.0 {
        let flipped = -axes.column(2).clone_owned();
        axes.set_column(2, &flipped);
    }
    Ok(CovDecomposition { axes, scales })
}

/// Applies a regularization mode to a decomposition. The boolean is set when
/// the input was fully degenerate (median scale at the floor) and plane mode
/// was substituted.
pub fn regularize_decomposition(
    d: &CovDecomposition,
    mode: Regularization,
    plane_eps: f64,
) -> (CovDecomposition, bool) {
    match mode {
        Regularization::None => (*d, false),
        Regularization::Plane => (
            CovDecomposition {
                axes: d.axes,
                scales: Vector3::new(1.0, 1.0, plane_eps),
            },
            false,
        ),
        Regularization::Ellipse => {
            // Scales are descending, so the median is the middle entry.
            let median = d.scales[1];
            if median <= SCALE_FLOOR * (1.0 + 1e-9) {
                let (plane, _) = regularize_decomposition(d, Regularization::Plane, plane_eps);
                return (plane, true);
            }
            (
                CovDecomposition {
                    axes: d.axes,
                    scales: d.scales / median,
                },
                false,
            )
        }
    }
}

/// Decomposes, regularizes and reconstructs a covariance matrix.
pub fn regularize_covariance(
    c: &Matrix3<f64>,
    mode: Regularization,
    plane_eps: f64,
) -> Result<(Matrix3<f64>, bool), GicpError> {
    let d = decompose_covariance(c)?;
    let (reg, degenerate) = regularize_decomposition(&d, mode, plane_eps);
    Ok((reg.reconstruct(), degenerate))
}

/// Sum of Mahalanobis terms `d_i^T M_i d_i` over residual/information pairs.
pub fn mle_cost(
    residuals: &[Vector3<f64>],
    informations: &[Matrix3<f64>],
) -> Result<f64, GicpError> {
    debug_assert_eq!(residuals.len(), informations.len());
    let mut cost = 0.0;
    for (i, (d, m)) in residuals.iter().zip(informations.iter()).enumerate() {
        let term = d.dot(&(m * d));
        if !term.is_finite() || term < -1e-12 {
            return Err(GicpError::SingularPair(i));
        }
        cost += term.max(0.0);
    }
    Ok(cost)
}

struct Matches {
    pairs: Vec<(usize, usize)>,
    /// Fused information matrices `(C_t + R C_s R^T)^{-1}`, parallel to pairs.
    infos: Vec<Matrix3<f64>>,
}

fn search_correspondences(
    input: &AlignInput,
    pose: &Pose,
    cfg: &GicpConfig,
) -> Result<Matches, GicpError> {
    let rot = pose.rotation_matrix();
    let mut pairs = Vec::new();
    let mut infos = Vec::new();
    for (i, x) in input.source_points.iter().enumerate() {
        let p = pose.transform(x);
        let Some((j, dist)) = input.target_index.nearest(&p) else {
            continue;
        };
        if dist > cfg.max_corr_dist {
            continue;
        }
        let fused = input.target_covs[j] + rot * input.source_covs[i] * rot.transpose();
        let info = fused
            .try_inverse()
            .ok_or(GicpError::SingularPair(pairs.len()))?;
        pairs.push((i, j));
        infos.push(info);
    }
    if pairs.len() < cfg.min_pairs {
        return Err(GicpError::TrackingLost {
            found: pairs.len(),
            last_pose: *pose,
        });
    }
    Ok(Matches { pairs, infos })
}

fn cost_at(input: &AlignInput, matches: &Matches, pose: &Pose) -> f64 {
    let mut cost = 0.0;
    for (&(i, j), m) in matches.pairs.iter().zip(matches.infos.iter()) {
        let d = input.target_points[j] - pose.transform(&input.source_points[i]);
        cost += d.dot(&(m * d));
    }
    cost
}

/// Estimates the pose minimizing the Mahalanobis objective
/// `sum d_i^T (C_t + T C_s T^T)^{-1} d_i` by Gauss-Newton with step halving.
///
/// Correspondences are re-searched each outer iteration; the fused information
/// matrices stay fixed within an iteration's line search.
pub fn align(
    input: &AlignInput,
    init: &Pose,
    cfg: &GicpConfig,
) -> Result<AlignOutcome, GicpError> {
    if input.source_points.is_empty() || input.target_points.is_empty() {
        return Err(GicpError::EmptyInput);
    }
    debug_assert_eq!(input.source_points.len(), input.source_covs.len());
    debug_assert_eq!(input.target_points.len(), input.target_covs.len());

    let mut pose = *init;
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let matches = search_correspondences(input, &pose, cfg)?;
        let current_cost = cost_at(input, &matches, &pose);

        // Normal equations for the left-composed twist [w, v]:
        // d(xi) ~= d0 + [ [p]_x | -I ] xi with p = T x_i.
        let mut h = Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        for (&(i, j), m) in matches.pairs.iter().zip(matches.infos.iter()) {
            let p = pose.transform(&input.source_points[i]);
            let d = input.target_points[j] - p;
            let mut jac = Matrix3x6::<f64>::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&p));
            jac.fixed_view_mut::<3, 3>(0, 3)
                .copy_from(&(-Matrix3::identity()));
            let jtm = jac.transpose() * m;
            h += jtm * jac;
            b += jtm * d;
        }
        let Some(chol) = h.cholesky() else {
            break; // Degenerate normal equations: accept the current pose.
        };
        let step = -chol.solve(&b);

        // Step-halving line search with fixed matches and information matrices.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..16 {
            let candidate = Pose::exp(&(step * alpha)).compose(&pose);
            if cost_at(input, &matches, &candidate) <= current_cost {
                accepted = Some((candidate, alpha));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, alpha)) = accepted else {
            converged = true; // No descent direction left at this resolution.
            break;
        };
        pose = next;
        if (step * alpha).norm() < cfg.conv_tol {
            converged = true;
            break;
        }
    }

    // Report reflects the final pose.
    let matches = search_correspondences(input, &pose, cfg)?;
    let mut residuals = Vec::with_capacity(matches.pairs.len());
    for &(i, j) in &matches.pairs {
        residuals.push(input.target_points[j] - pose.transform(&input.source_points[i]));
    }
    let cost = mle_cost(&residuals, &matches.infos)?;
    let inlier_count = matches.pairs.len();
    Ok(AlignOutcome {
        pose,
        report: CorrespondenceReport {
            pairs: matches.pairs,
            residuals,
            cost,
            inlier_count,
        },
        converged,
    })
}
