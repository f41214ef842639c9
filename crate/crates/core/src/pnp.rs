//! Pose recovery from 2D–3D keypoint correspondences.
//!
//! A linear bootstrap (EPnP for general point sets, a plane homography for
//! coplanar ones) seeds a confidence-weighted Gauss-Newton refinement of the
//! reprojection error. [`ransac_pnp`] wraps both in a seeded RANSAC loop.

use crate::geom::{orthonormalize, retract_left, skew, Mat3, RigidTransform, Twist, Vec3};
use crate::keypoints::{CameraIntrinsics, Vec2, MIN_DEPTH};
use nalgebra::{
    DMatrix, DVector, Matrix3, Matrix4, Matrix6, SMatrix, SVector, SymmetricEigen, Vector6,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("need at least {needed} usable correspondences, got {got}")]
    NotEnoughCorrespondences { needed: usize, got: usize },
    #[error("3D points are colinear; pose is not observable")]
    Colinear,
    #[error("linear bootstrap failed: {0}")]
    Degenerate(&'static str),
    #[error("no pose places all points in front of the camera")]
    Cheirality,
    #[error("RANSAC found only {best} inliers, {required} required")]
    NoConsensus { best: usize, required: usize },
    #[error("invalid RANSAC parameters: {0}")]
    InvalidParams(&'static str),
}

impl PnpError {
    /// True for errors that mean the correspondence set cannot determine a pose.
    pub fn is_unsolvable(&self) -> bool {
        !matches!(
            self,
            PnpError::NoConsensus { .. } | PnpError::InvalidParams(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point_obj: Vec3,
    pub point_img: Vec2,
    pub confidence: f64,
}

impl Correspondence {
    pub fn new(point_obj: Vec3, point_img: Vec2, confidence: f64) -> Self {
        Self {
            point_obj,
            point_img,
            confidence,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.point_obj.iter().all(|v| v.is_finite())
            && self.point_img.iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&self.confidence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            inlier_threshold_px: 8.0,
            min_inliers: 6,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), PnpError> {
        if self.max_iterations == 0 {
            return Err(PnpError::InvalidParams("max_iterations must be >= 1"));
        }
        if self.inlier_threshold_px.is_nan() || self.inlier_threshold_px <= 0.0 {
            return Err(PnpError::InvalidParams("inlier_threshold_px must be > 0"));
        }
        if self.min_inliers < 4 {
            return Err(PnpError::InvalidParams("min_inliers must be >= 4"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the twist step norm.
    pub tolerance: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-10,
        }
    }
}

/// Result of an iterative pose fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidTransform,
    /// Weighted sum of squared reprojection residuals at `pose`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub pose: RigidTransform,
    pub inliers: Vec<usize>,
    pub converged: bool,
}

/// Confidence-weighted residual vector `w·(π(T·X) − u)`, two rows per point.
///
/// Points behind the camera yield non-finite rows.
pub fn reprojection_residuals(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
) -> DVector<f64> {
    let mut r = DVector::zeros(2 * corrs.len());
    for (i, c) in corrs.iter().enumerate() {
        let p = pose.transform_point(&c.point_obj);
        let (ru, rv) = match intr.project_camera_point(&p) {
            Some(uv) => (uv.x - c.point_img.x, uv.y - c.point_img.y),
            None => (f64::INFINITY, f64::INFINITY),
        };
        r[2 * i] = c.confidence * ru;
        r[2 * i + 1] = c.confidence * rv;
    }
    r
}

/// Jacobian of [`reprojection_residuals`] with respect to a left twist
/// increment `exp(δ) ∘ pose`, columns ordered `[angular; linear]`.
pub fn reprojection_jacobian(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * corrs.len(), 6);
    for (i, c) in corrs.iter().enumerate() {
        let p = pose.transform_point(&c.point_obj);
        let rows = point_jacobian(intr, &p);
        for k in 0..6 {
            j[(2 * i, k)] = c.confidence * rows[(0, k)];
            j[(2 * i + 1, k)] = c.confidence * rows[(1, k)];
        }
    }
    j
}

/// d(pixel)/d(left twist) for a camera-frame point.
fn point_jacobian(intr: &CameraIntrinsics, p: &Vec3) -> SMatrix<f64, 2, 6> {
    let inv_z = 1.0 / p.z;
    let d_proj = SMatrix::<f64, 2, 3>::new(
        intr.fx * inv_z,
        0.0,
        -intr.fx * p.x * inv_z * inv_z,
        0.0,
        intr.fy * inv_z,
        -intr.fy * p.y * inv_z * inv_z,
    );
    // d(exp(δ)·p)/dδ = [ -[p]x | I ]
    let mut d_point = SMatrix::<f64, 3, 6>::zeros();
    d_point.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(p)));
    d_point
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Mat3::identity());
    d_proj * d_point
}

/// Weighted squared reprojection error; infinite if a weighted point falls
/// behind the camera.
pub fn reprojection_cost(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
) -> f64 {
    let mut cost = 0.0;
    for c in corrs {
        if c.confidence == 0.0 {
            continue;
        }
        let p = pose.transform_point(&c.point_obj);
        match intr.project_camera_point(&p) {
            Some(uv) => cost += c.confidence * c.confidence * (uv - c.point_img).norm_squared(),
            None => return f64::INFINITY,
        }
    }
    cost
}

fn normal_equations(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in corrs {
        if c.confidence == 0.0 {
            continue;
        }
        let p = pose.transform_point(&c.point_obj);
        let Some(uv) = intr.project_camera_point(&p) else {
            continue;
        };
        let w2 = c.confidence * c.confidence;
        let jp = point_jacobian(intr, &p);
        let r = uv - c.point_img;
        h += jp.transpose() * jp * w2;
        g += jp.transpose() * r * w2;
    }
    (h, g)
}

/// Damped Gauss-Newton on the weighted reprojection error.
///
/// Steps are only accepted when they lower the cost, so the returned cost
/// never exceeds the cost at `init`. A pose whose cost is not finite at
/// `init` is returned unchanged with `converged = false`.
pub fn refine_pose(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    init: &RigidTransform,
    opts: &GaussNewtonOptions,
) -> PoseEstimate {
    let mut pose = *init;
    let mut cost = reprojection_cost(corrs, intr, &pose);
    if !cost.is_finite() {
        return PoseEstimate {
            pose,
            cost,
            iterations: 0,
            converged: false,
        };
    }
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let (h, g) = normal_equations(corrs, intr, &pose);
        let diag_scale = (0..6).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-12);
        let mut lambda = 0.0;
        let mut accepted = None;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * diag_scale;
            }
            if let Some(chol) = damped.cholesky() {
                let step = -chol.solve(&g);
                let delta = Twist::from_vector(&step);
                if delta.is_finite() {
                    let candidate = retract_left(&pose, &delta);
                    let c = reprojection_cost(corrs, intr, &candidate);
                    if c < cost {
                        accepted = Some((candidate, c, step.norm()));
                        break;
                    }
                    if step.norm() < opts.tolerance {
                        break;
                    }
                }
            }
            lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
        }
        match accepted {
            Some((candidate, c, step_norm)) => {
                pose = candidate;
                cost = c;
                if step_norm < opts.tolerance {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent direction left: local minimum
                converged = true;
                break;
            }
        }
    }
    // repeated retractions drift off SO(3); re-project unless that costs residual
    if crate::geom::rotation_deviation(&pose.rotation) > 1e-13 {
        let mut snapped = pose;
        snapped.rotation = orthonormalize(&pose.rotation);
        let c = reprojection_cost(corrs, intr, &snapped);
        if c <= cost {
            pose = snapped;
            cost = c;
        }
    }
    PoseEstimate {
        pose,
        cost,
        iterations,
        converged,
    }
}

/// Recovers a pose from at least four correspondences.
///
/// With `init` the refinement starts there (falling back to the linear
/// bootstrap if `init` puts a weighted point behind the camera); otherwise
/// the linear bootstrap seeds it. Zero-confidence correspondences are
/// ignored throughout.
pub fn solve_pnp(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    init: Option<&RigidTransform>,
) -> Result<PoseEstimate, PnpError> {
    solve_pnp_with(corrs, intr, init, &GaussNewtonOptions::default())
}

pub fn solve_pnp_with(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    init: Option<&RigidTransform>,
    opts: &GaussNewtonOptions,
) -> Result<PoseEstimate, PnpError> {
    let usable: Vec<Correspondence> = corrs
        .iter()
        .filter(|c| c.confidence > 0.0)
        .copied()
        .collect();
    if usable.len() < 4 {
        return Err(PnpError::NotEnoughCorrespondences {
            needed: 4,
            got: usable.len(),
        });
    }
    check_not_colinear(&usable)?;
    let est = match init {
        Some(p) if reprojection_cost(&usable, intr, p).is_finite() => {
            refine_pose(&usable, intr, p, opts)
        }
        // each linear hypothesis is refined; small sets can have a poor first guess
        _ => linear_candidates(&usable, intr)?
            .iter()
            .map(|start| refine_pose(&usable, intr, start, opts))
            .min_by(|a, b| a.cost.total_cmp(&b.cost))
            .expect("at least one candidate"),
    };
    if !est.cost.is_finite() {
        return Err(PnpError::Cheirality);
    }
    Ok(est)
}

/// Seeded RANSAC over minimal 4-point subsets followed by a weighted refit
/// on the best consensus set.
pub fn ransac_pnp(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<RansacOutcome, PnpError> {
    params.validate()?;
    let candidates: Vec<usize> = (0..corrs.len())
        .filter(|&i| corrs[i].confidence > 0.0)
        .collect();
    if candidates.len() < params.min_inliers {
        return Err(PnpError::NotEnoughCorrespondences {
            needed: params.min_inliers,
            got: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(RigidTransform, Vec<usize>, f64)> = None;
    let mut sample = Vec::with_capacity(4);
    for _ in 0..params.max_iterations {
        sample.clear();
        for i in rand::seq::index::sample(&mut rng, candidates.len(), 4).iter() {
            sample.push(corrs[candidates[i]]);
        }
        let Some(hypothesis) = minimal_hypothesis(&sample, intr) else {
            continue;
        };
        let (inliers, spread) = count_inliers(
            corrs,
            &candidates,
            intr,
            &hypothesis,
            params.inlier_threshold_px,
        );
        let better = match &best {
            None => true,
            Some((_, b, s)) => inliers.len() > b.len() || (inliers.len() == b.len() && spread < *s),
        };
        if better {
            best = Some((hypothesis, inliers, spread));
        }
    }
    let Some((hyp_pose, inliers, _)) = best else {
        return Err(PnpError::NoConsensus {
            best: 0,
            required: params.min_inliers,
        });
    };
    if inliers.len() < params.min_inliers {
        return Err(PnpError::NoConsensus {
            best: inliers.len(),
            required: params.min_inliers,
        });
    }
    let subset: Vec<Correspondence> = inliers.iter().map(|&i| corrs[i]).collect();
    let refit = solve_pnp(&subset, intr, Some(&hyp_pose))?;
    let (final_inliers, _) = count_inliers(
        corrs,
        &candidates,
        intr,
        &refit.pose,
        params.inlier_threshold_px,
    );
    let (pose, inliers, converged) = if final_inliers.len() > inliers.len() {
        let subset: Vec<Correspondence> = final_inliers.iter().map(|&i| corrs[i]).collect();
        let again = solve_pnp(&subset, intr, Some(&refit.pose))?;
        let (fin, _) = count_inliers(
            corrs,
            &candidates,
            intr,
            &again.pose,
            params.inlier_threshold_px,
        );
        (again.pose, fin, again.converged)
    } else {
        (refit.pose, final_inliers, refit.converged)
    };
    if inliers.len() < params.min_inliers {
        return Err(PnpError::NoConsensus {
            best: inliers.len(),
            required: params.min_inliers,
        });
    }
    Ok(RansacOutcome {
        pose,
        inliers,
        converged,
    })
}

/// P3P on the first three points of a 4-point sample, disambiguated by the
/// fourth. No refinement: the consensus refit takes care of that.
fn minimal_hypothesis(
    sample: &[Correspondence],
    intr: &CameraIntrinsics,
) -> Option<RigidTransform> {
    let world: Vec<Vec3> = sample.iter().map(|c| c.point_obj).collect();
    let image: Vec<Vec2> = sample
        .iter()
        .map(|c| {
            Vec2::new(
                (c.point_img.x - intr.cx) / intr.fx,
                (c.point_img.y - intr.cy) / intr.fy,
            )
        })
        .collect();
    p3p(&world, &image)
        .into_iter()
        .map(|p| (normalized_reprojection_error(&world, &image, &p), p))
        .filter(|(e, _)| e.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| p)
}

fn count_inliers(
    corrs: &[Correspondence],
    candidates: &[usize],
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
    threshold: f64,
) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut spread = 0.0;
    for &i in candidates {
        let c = &corrs[i];
        let p = pose.transform_point(&c.point_obj);
        if let Some(uv) = intr.project_camera_point(&p) {
            let e = (uv - c.point_img).norm();
            if e < threshold {
                inliers.push(i);
                spread += e;
            }
        }
    }
    (inliers, spread)
}

fn centroid(points: impl Iterator<Item = Vec3>) -> Vec3 {
    let (sum, n) = points.fold((Vec3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
    sum / n.max(1) as f64
}

/// Principal axes of a point set, eigenvalues sorted descending.
fn principal_axes(points: &[Vec3], center: &Vec3) -> (Vec3, Mat3) {
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - center;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vec3::new(
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    );
    let axes = Mat3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    (values, axes)
}

const COLINEAR_RATIO: f64 = 1e-12;
const PLANAR_RATIO: f64 = 1e-8;

fn check_not_colinear(corrs: &[Correspondence]) -> Result<(), PnpError> {
    let pts: Vec<Vec3> = corrs.iter().map(|c| c.point_obj).collect();
    let c = centroid(pts.iter().copied());
    let (values, _) = principal_axes(&pts, &c);
    if values[0] <= 0.0 || values[1] <= COLINEAR_RATIO * values[0] {
        return Err(PnpError::Colinear);
    }
    Ok(())
}

/// Closed-form linear pose estimate (no refinement).
///
/// Uses EPnP for general point sets and a homography decomposition when the
/// object points are coplanar.
pub fn linear_pose(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
) -> Result<RigidTransform, PnpError> {
    linear_candidates(corrs, intr).map(|c| c[0])
}

/// All bootstrap hypotheses, best linear fit first.
fn linear_candidates(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
) -> Result<Vec<RigidTransform>, PnpError> {
    if corrs.len() < 4 {
        return Err(PnpError::NotEnoughCorrespondences {
            needed: 4,
            got: corrs.len(),
        });
    }
    let world: Vec<Vec3> = corrs.iter().map(|c| c.point_obj).collect();
    let image: Vec<Vec2> = corrs
        .iter()
        .map(|c| {
            Vec2::new(
                (c.point_img.x - intr.cx) / intr.fx,
                (c.point_img.y - intr.cy) / intr.fy,
            )
        })
        .collect();
    let c0 = centroid(world.iter().copied());
    let (values, axes) = principal_axes(&world, &c0);
    if values[0] <= 0.0 || values[1] <= COLINEAR_RATIO * values[0] {
        return Err(PnpError::Colinear);
    }
    if values[2] <= PLANAR_RATIO * values[0] {
        planar_pose(&world, &image, &c0, &axes).map(|p| vec![p])
    } else {
        let mut poses = epnp(&world, &image, &c0, &values, &axes)?;
        if world.len() < P3P_MAX_POINTS {
            // the beta linearisation is weak on tiny sets; add exact P3P hypotheses
            poses.extend(p3p(&world, &image));
            poses.sort_by(|a, b| {
                normalized_reprojection_error(&world, &image, a)
                    .total_cmp(&normalized_reprojection_error(&world, &image, b))
            });
        }
        Ok(poses)
    }
}

const P3P_MAX_POINTS: usize = 6;

/// Grunert's three-point solution on the first three correspondences.
/// Returns up to four poses; callers rank them on the full set.
fn p3p(world: &[Vec3], image: &[Vec2]) -> Vec<RigidTransform> {
    let rays: [Vec3; 3] =
        std::array::from_fn(|i| Vec3::new(image[i].x, image[i].y, 1.0).normalize());
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    if b2 <= 0.0 || a2 <= 0.0 || c2 <= 0.0 {
        return Vec::new();
    }
    let ca = rays[1].dot(&rays[2]);
    let cb = rays[0].dot(&rays[2]);
    let cg = rays[0].dot(&rays[1]);
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let coeffs = [
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg,
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
            - 4.0 * apc * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg),
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
    ];
    let mut poses = Vec::new();
    for v in real_quartic_roots(&coeffs) {
        let den = 2.0 * (cg - v * ca);
        let d1 = 1.0 + v * v - 2.0 * v * cb;
        if den.abs() < 1e-12 || d1 <= 0.0 {
            continue;
        }
        let u = ((amc - 1.0) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let s1 = (b2 / d1).sqrt();
        let depths = [s1, u * s1, v * s1];
        if depths.iter().any(|d| d.is_nan() || *d <= 0.0) {
            continue;
        }
        let cam: Vec<Vec3> = (0..3).map(|i| rays[i] * depths[i]).collect();
        poses.push(absolute_orientation(&world[..3], &cam));
    }
    poses
}

/// Real roots of `c0 + c1 x + c2 x^2 + c3 x^3 + c4 x^4`, polished by Newton steps.
fn real_quartic_roots(c: &[f64; 5]) -> Vec<f64> {
    if c[4].abs() < 1e-14 {
        return Vec::new();
    }
    let mut companion = Matrix4::zeros();
    for i in 0..3 {
        companion[(i + 1, i)] = 1.0;
    }
    for i in 0..4 {
        companion[(i, 3)] = -c[i] / c[4];
    }
    let eval = |x: f64| (((c[4] * x + c[3]) * x + c[2]) * x + c[1]) * x + c[0];
    let deriv = |x: f64| ((4.0 * c[4] * x + 3.0 * c[3]) * x + 2.0 * c[2]) * x + c[1];
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..4 {
                let d = deriv(x);
                if d == 0.0 {
                    break;
                }
                x -= eval(x) / d;
            }
            x
        })
        .collect()
}

fn normalized_reprojection_error(world: &[Vec3], image: &[Vec2], pose: &RigidTransform) -> f64 {
    world
        .iter()
        .zip(image)
        .map(|(x, uv)| {
            let p = pose.transform_point(x);
            if p.z <= MIN_DEPTH {
                f64::INFINITY
            } else {
                (Vec2::new(p.x / p.z, p.y / p.z) - uv).norm_squared()
            }
        })
        .sum()
}

/// Least-squares rigid alignment `dst ≈ R·src + t` (Kabsch).
pub fn absolute_orientation(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    let cs = centroid(src.iter().copied());
    let cd = centroid(dst.iter().copied());
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let r = orthonormalize(&h);
    RigidTransform::new(r, cd - r * cs)
}

fn epnp(
    world: &[Vec3],
    image: &[Vec2],
    c0: &Vec3,
    values: &Vec3,
    axes: &Mat3,
) -> Result<Vec<RigidTransform>, PnpError> {
    let n = world.len();
    // control points: centroid plus principal directions scaled by spread
    let mut ctrl = [*c0; 4];
    for k in 0..3 {
        ctrl[k + 1] = c0 + axes.column(k) * (values[k] / n as f64).sqrt();
    }
    let basis = Matrix3::from_columns(&[ctrl[1] - ctrl[0], ctrl[2] - ctrl[0], ctrl[3] - ctrl[0]]);
    let basis_inv = basis
        .try_inverse()
        .ok_or(PnpError::Degenerate("singular control-point basis"))?;
    let alphas: Vec<[f64; 4]> = world
        .iter()
        .map(|p| {
            let a = basis_inv * (p - ctrl[0]);
            [1.0 - a.x - a.y - a.z, a.x, a.y, a.z]
        })
        .collect();

    let mut mtm = SMatrix::<f64, 12, 12>::zeros();
    for (a, uv) in alphas.iter().zip(image) {
        let mut r1 = SVector::<f64, 12>::zeros();
        let mut r2 = SVector::<f64, 12>::zeros();
        for j in 0..4 {
            r1[3 * j] = a[j];
            r1[3 * j + 2] = -a[j] * uv.x;
            r2[3 * j + 1] = a[j];
            r2[3 * j + 2] = -a[j] * uv.y;
        }
        mtm += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let kernel: [SVector<f64, 12>; 4] =
        std::array::from_fn(|i| eig.eigenvectors.column(order[i]).into_owned());

    const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    let mut l = SMatrix::<f64, 6, 10>::zeros();
    let mut rho = SVector::<f64, 6>::zeros();
    for (row, &(a, b)) in PAIRS.iter().enumerate() {
        let dv: [Vec3; 4] = std::array::from_fn(|i| {
            let v = &kernel[i];
            Vec3::new(
                v[3 * a] - v[3 * b],
                v[3 * a + 1] - v[3 * b + 1],
                v[3 * a + 2] - v[3 * b + 2],
            )
        });
        // product order: b11 b12 b22 b13 b23 b33 b14 b24 b34 b44
        l[(row, 0)] = dv[0].dot(&dv[0]);
        l[(row, 1)] = 2.0 * dv[0].dot(&dv[1]);
        l[(row, 2)] = dv[1].dot(&dv[1]);
        l[(row, 3)] = 2.0 * dv[0].dot(&dv[2]);
        l[(row, 4)] = 2.0 * dv[1].dot(&dv[2]);
        l[(row, 5)] = dv[2].dot(&dv[2]);
        l[(row, 6)] = 2.0 * dv[0].dot(&dv[3]);
        l[(row, 7)] = 2.0 * dv[1].dot(&dv[3]);
        l[(row, 8)] = 2.0 * dv[2].dot(&dv[3]);
        l[(row, 9)] = dv[3].dot(&dv[3]);
        rho[row] = (ctrl[a] - ctrl[b]).norm_squared();
    }

    let candidates = [
        betas_approx_1(&l, &rho),
        betas_approx_2(&l, &rho),
        betas_approx_3(&l, &rho),
    ];
    let mut poses: Vec<(RigidTransform, f64)> = candidates
        .into_iter()
        .flatten()
        .filter_map(|betas| {
            let betas = refine_betas(&l, &rho, betas);
            let pose = pose_from_betas(&kernel, &betas, &alphas, world)?;
            let err = normalized_reprojection_error(world, image, &pose);
            err.is_finite().then_some((pose, err))
        })
        .collect();
    if poses.is_empty() {
        return Err(PnpError::Degenerate(
            "no EPnP candidate in front of the camera",
        ));
    }
    poses.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(poses.into_iter().map(|(p, _)| p).collect())
}

fn lstsq(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    a.svd(true, true).solve(&b, 1e-12).ok()
}

fn select_columns(l: &SMatrix<f64, 6, 10>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(6, cols.len(), |r, c| l[(r, cols[c])])
}

fn betas_approx_1(l: &SMatrix<f64, 6, 10>, rho: &SVector<f64, 6>) -> Option<[f64; 4]> {
    let b = lstsq(
        select_columns(l, &[0, 1, 3, 6]),
        DVector::from_column_slice(rho.as_slice()),
    )?;
    let sign = if b[0] < 0.0 { -1.0 } else { 1.0 };
    let b0 = (sign * b[0]).sqrt();
    if b0 == 0.0 {
        return None;
    }
    Some([b0, sign * b[1] / b0, sign * b[2] / b0, sign * b[3] / b0])
}

fn betas_approx_2(l: &SMatrix<f64, 6, 10>, rho: &SVector<f64, 6>) -> Option<[f64; 4]> {
    let b = lstsq(
        select_columns(l, &[0, 1, 2]),
        DVector::from_column_slice(rho.as_slice()),
    )?;
    let (mut b0, b1) = if b[0] < 0.0 {
        (
            (-b[0]).sqrt(),
            if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 },
        )
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    Some([b0, b1, 0.0, 0.0])
}

fn betas_approx_3(l: &SMatrix<f64, 6, 10>, rho: &SVector<f64, 6>) -> Option<[f64; 4]> {
    let b = lstsq(
        select_columns(l, &[0, 1, 2, 3, 4]),
        DVector::from_column_slice(rho.as_slice()),
    )?;
    let (mut b0, b1) = if b[0] < 0.0 {
        (
            (-b[0]).sqrt(),
            if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 },
        )
    } else {
        (b[0].sqrt(), if b[2] > 0.0 { b[2].sqrt() } else { 0.0 })
    };
    if b[1] < 0.0 {
        b0 = -b0;
    }
    if b0 == 0.0 {
        return None;
    }
    Some([b0, b1, b[3] / b0, 0.0])
}

const BETA_ITERATIONS: usize = 20;

fn beta_products(b: &[f64; 4]) -> SVector<f64, 10> {
    SVector::<f64, 10>::from_column_slice(&[
        b[0] * b[0],
        b[0] * b[1],
        b[1] * b[1],
        b[0] * b[2],
        b[1] * b[2],
        b[2] * b[2],
        b[0] * b[3],
        b[1] * b[3],
        b[2] * b[3],
        b[3] * b[3],
    ])
}

/// Gauss-Newton on the control-point distance constraints.
fn refine_betas(l: &SMatrix<f64, 6, 10>, rho: &SVector<f64, 6>, mut b: [f64; 4]) -> [f64; 4] {
    for _ in 0..BETA_ITERATIONS {
        let mut a = DMatrix::<f64>::zeros(6, 4);
        for r in 0..6 {
            let lr = |k: usize| l[(r, k)];
            a[(r, 0)] = 2.0 * lr(0) * b[0] + lr(1) * b[1] + lr(3) * b[2] + lr(6) * b[3];
            a[(r, 1)] = lr(1) * b[0] + 2.0 * lr(2) * b[1] + lr(4) * b[2] + lr(7) * b[3];
            a[(r, 2)] = lr(3) * b[0] + lr(4) * b[1] + 2.0 * lr(5) * b[2] + lr(8) * b[3];
            a[(r, 3)] = lr(6) * b[0] + lr(7) * b[1] + lr(8) * b[2] + 2.0 * lr(9) * b[3];
        }
        let err = rho - l * beta_products(&b);
        let Some(dx) = lstsq(a, DVector::from_column_slice(err.as_slice())) else {
            break;
        };
        if dx.iter().any(|v| !v.is_finite()) {
            break;
        }
        for k in 0..4 {
            b[k] += dx[k];
        }
    }
    b
}

fn pose_from_betas(
    kernel: &[SVector<f64, 12>; 4],
    betas: &[f64; 4],
    alphas: &[[f64; 4]],
    world: &[Vec3],
) -> Option<RigidTransform> {
    let mut flat = SVector::<f64, 12>::zeros();
    for (v, b) in kernel.iter().zip(betas) {
        flat += v * *b;
    }
    let ctrl: [Vec3; 4] =
        std::array::from_fn(|j| Vec3::new(flat[3 * j], flat[3 * j + 1], flat[3 * j + 2]));
    let mut cam: Vec<Vec3> = alphas
        .iter()
        .map(|a| ctrl[0] * a[0] + ctrl[1] * a[1] + ctrl[2] * a[2] + ctrl[3] * a[3])
        .collect();
    let mean_depth: f64 = cam.iter().map(|p| p.z).sum::<f64>() / cam.len() as f64;
    if !mean_depth.is_finite() || mean_depth == 0.0 {
        return None;
    }
    if mean_depth < 0.0 {
        for p in &mut cam {
            *p = -*p;
        }
    }
    let pose = absolute_orientation(world, &cam);
    pose.is_valid().then_some(pose)
}

fn planar_pose(
    world: &[Vec3],
    image: &[Vec2],
    c0: &Vec3,
    axes: &Mat3,
) -> Result<RigidTransform, PnpError> {
    let e1: Vec3 = axes.column(0).into_owned();
    let e2: Vec3 = axes.column(1).into_owned();
    let e3 = e1.cross(&e2);
    let frame = Mat3::from_columns(&[e1, e2, e3]);
    let plane: Vec<Vec2> = world
        .iter()
        .map(|p| {
            let d = p - c0;
            Vec2::new(d.dot(&e1), d.dot(&e2))
        })
        .collect();

    let (tp, plane_n) = hartley(&plane);
    let (ti, image_n) = hartley(image);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, x) in plane_n.iter().zip(&image_n) {
        let r1 = SVector::<f64, 9>::from_column_slice(&[
            a.x,
            a.y,
            1.0,
            0.0,
            0.0,
            0.0,
            -x.x * a.x,
            -x.x * a.y,
            -x.x,
        ]);
        let r2 = SVector::<f64, 9>::from_column_slice(&[
            0.0,
            0.0,
            0.0,
            a.x,
            a.y,
            1.0,
            -x.y * a.x,
            -x.y * a.y,
            -x.y,
        ]);
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = SymmetricEigen::new(ata);
    let min = (0..9)
        .min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
        .unwrap_or(0);
    let h = eig.eigenvectors.column(min);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti
        .try_inverse()
        .ok_or(PnpError::Degenerate("image normalization"))?;
    let hm = ti_inv * hn * tp;

    let h1: Vec3 = hm.column(0).into_owned();
    let h2: Vec3 = hm.column(1).into_owned();
    let h3: Vec3 = hm.column(2).into_owned();
    let norm = (h1.norm() + h2.norm()) / 2.0;
    if norm == 0.0 || !norm.is_finite() {
        return Err(PnpError::Degenerate("degenerate homography"));
    }
    let mut s = 1.0 / norm;
    if h3.z * s < 0.0 {
        s = -s;
    }
    let r1 = h1 * s;
    let r2 = h2 * s;
    let t = h3 * s;
    let r_plane = orthonormalize(&Mat3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let rotation = r_plane * frame.transpose();
    let pose = RigidTransform::new(rotation, t - rotation * c0);
    if !normalized_reprojection_error(world, image, &pose).is_finite() {
        return Err(PnpError::Cheirality);
    }
    Ok(pose)
}

/// Isotropic normalization: centroid to the origin, mean distance √2.
fn hartley(points: &[Vec2]) -> (Matrix3<f64>, Vec<Vec2>) {
    let n = points.len() as f64;
    let c = points.iter().fold(Vec2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0);
    let out = points.iter().map(|p| (p - c) * s).collect();
    (t, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{exp_twist, rotation_error_rad};
    use crate::keypoints::project;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    fn random_object(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.05..0.05)))
            .collect()
    }

    // 17 farthest-point keypoints on the surface of a box with the given half extents.
    fn box_keypoints(h: Vec3) -> Vec<Vec3> {
        let steps: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
        let mut surf = Vec::new();
        for &a in &steps {
            for &b in &steps {
                for &c in &steps {
                    if a.abs() == 1.0 || b.abs() == 1.0 || c.abs() == 1.0 {
                        surf.push(Vec3::new(a * h.x, b * h.y, c * h.z));
                    }
                }
            }
        }
        crate::keypoints::farthest_point_sample(&surf, 17)
            .unwrap()
            .into_iter()
            .map(|i| surf[i])
            .collect()
    }

    fn random_pose(rng: &mut impl Rng, depth: f64) -> RigidTransform {
        let axis = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let mut p = RigidTransform::from_axis_angle(&axis, rng.random_range(0.0..3.0));
        p.translation = Vec3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.08..0.08),
            depth + rng.random_range(-0.05..0.05),
        );
        p
    }

    fn synth(pose: &RigidTransform, pts: &[Vec3]) -> Vec<Correspondence> {
        project(&intr(), pose, pts)
            .into_iter()
            .zip(pts)
            .map(|(pr, x)| Correspondence::new(*x, pr.pixel, 1.0))
            .collect()
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let pts = random_object(&mut rng, 17);
            let gt = random_pose(&mut rng, 0.5);
            let est = solve_pnp(&synth(&gt, &pts), &intr(), None).unwrap();
            assert!((est.pose.translation - gt.translation).norm() < 1e-6);
            assert!(rotation_error_rad(&est.pose.rotation, &gt.rotation) < 1e-6);
        }
    }

    #[test]
    fn minimal_four_point_sets_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..300 {
            let pts = random_object(&mut rng, 4);
            let gt = random_pose(&mut rng, 0.5);
            let est = solve_pnp(&synth(&gt, &pts), &intr(), None).unwrap();
            assert!((est.pose.translation - gt.translation).norm() < 1e-6);
            assert!(rotation_error_rad(&est.pose.rotation, &gt.rotation) < 1e-6);
        }
    }

    #[test]
    fn coplanar_points_are_solved() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let pts: Vec<Vec3> = (0..8)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                        0.0,
                    )
                })
                .collect();
            let mut gt = random_pose(&mut rng, 0.5);
            // keep the plane facing the camera
            gt.rotation = RigidTransform::from_axis_angle(&Vec3::new(1.0, 0.3, 0.0), 0.5).rotation;
            let est = solve_pnp(&synth(&gt, &pts), &intr(), None).unwrap();
            assert!((est.pose.translation - gt.translation).norm() < 1e-6);
            assert!(rotation_error_rad(&est.pose.rotation, &gt.rotation) < 1e-6);
        }
    }

    #[test]
    fn three_points_unsolvable() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts = random_object(&mut rng, 3);
        let gt = random_pose(&mut rng, 0.5);
        let err = solve_pnp(&synth(&gt, &pts), &intr(), None).unwrap_err();
        assert!(matches!(
            err,
            PnpError::NotEnoughCorrespondences { got: 3, .. }
        ));
        assert!(err.is_unsolvable());
    }

    #[test]
    fn colinear_points_unsolvable() {
        let pts: Vec<Vec3> = (0..6)
            .map(|i| Vec3::new(0.01 * i as f64, 0.0, 0.0))
            .collect();
        let gt = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 0.5));
        assert_eq!(
            solve_pnp(&synth(&gt, &pts), &intr(), None).unwrap_err(),
            PnpError::Colinear
        );
    }

    #[test]
    fn zero_confidence_points_do_not_influence_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pts = random_object(&mut rng, 12);
        let gt = random_pose(&mut rng, 0.5);
        let mut corrs = synth(&gt, &pts);
        for c in corrs.iter_mut().take(3) {
            c.point_img += Vec2::new(200.0, -150.0);
            c.confidence = 0.0;
        }
        let est = solve_pnp(&corrs, &intr(), None).unwrap();
        assert!((est.pose.translation - gt.translation).norm() < 1e-9);
    }

    #[test]
    fn noisy_recovery_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let pts = box_keypoints(Vec3::new(0.15, 0.1, 0.075));
        let mut ok = 0;
        for _ in 0..200 {
            let gt = random_pose(&mut rng, 0.5);
            let mut corrs = synth(&gt, &pts);
            for c in &mut corrs {
                c.point_img += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let est = solve_pnp(&corrs, &intr(), None).unwrap();
            let dt = (est.pose.translation - gt.translation).norm();
            let dr = rotation_error_rad(&est.pose.rotation, &gt.rotation).to_degrees();
            if dt < 0.005 && dr < 0.5 {
                ok += 1;
            }
        }
        assert!(ok >= 190, "{ok}/200 within 5 mm / 0.5 deg");
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let h = 1e-6;
        for _ in 0..100 {
            let pts = random_object(&mut rng, 8);
            let pose = random_pose(&mut rng, 0.5);
            let mut corrs = synth(&pose, &pts);
            for c in &mut corrs {
                c.point_img += Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                c.confidence = rng.random_range(0.2..1.0);
            }
            let analytic = reprojection_jacobian(&corrs, &intr(), &pose);
            let mut numeric = DMatrix::zeros(analytic.nrows(), 6);
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = retract_left(&pose, &Twist::from_vector(&d));
                let minus = retract_left(&pose, &Twist::from_vector(&-d));
                let diff = (reprojection_residuals(&corrs, &intr(), &plus)
                    - reprojection_residuals(&corrs, &intr(), &minus))
                    / (2.0 * h);
                numeric.set_column(k, &diff);
            }
            let rel = (&analytic - &numeric).norm() / analytic.norm();
            assert!(rel < 1e-4, "relative error {rel}");
        }
    }

    #[test]
    fn refinement_never_increases_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 2.0).unwrap();
        for _ in 0..100 {
            let pts = random_object(&mut rng, 17);
            let gt = random_pose(&mut rng, 0.5);
            let mut corrs = synth(&gt, &pts);
            for c in &mut corrs {
                c.point_img += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                c.confidence = rng.random_range(0.2..1.0);
            }
            let perturb = Twist::new(
                Vec3::from_fn(|_, _| rng.random_range(-0.2..0.2)),
                Vec3::from_fn(|_, _| rng.random_range(-0.03..0.03)),
            );
            let init = exp_twist(&perturb).compose(&gt);
            let before = reprojection_cost(&corrs, &intr(), &init);
            let est = solve_pnp(&corrs, &intr(), Some(&init)).unwrap();
            assert!(est.cost <= before, "{} > {}", est.cost, before);
        }
    }

    #[test]
    fn ransac_noiseless_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let pts = random_object(&mut rng, 17);
        let gt = random_pose(&mut rng, 0.5);
        let out = ransac_pnp(&synth(&gt, &pts), &intr(), &RansacParams::default()).unwrap();
        assert_eq!(out.inliers, (0..17).collect::<Vec<_>>());
        assert!((out.pose.translation - gt.translation).norm() < 1e-6);
    }

    #[test]
    fn ransac_pure_noise_has_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let pts = random_object(&mut rng, 17);
        let corrs: Vec<Correspondence> = pts
            .iter()
            .map(|x| {
                Correspondence::new(
                    *x,
                    Vec2::new(rng.random_range(0.0..1280.0), rng.random_range(0.0..720.0)),
                    1.0,
                )
            })
            .collect();
        assert!(matches!(
            ransac_pnp(&corrs, &intr(), &RansacParams::default()),
            Err(PnpError::NoConsensus { .. })
        ));
    }

    #[test]
    fn ransac_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let pts = random_object(&mut rng, 17);
        let gt = random_pose(&mut rng, 0.5);
        let mut corrs = synth(&gt, &pts);
        for c in corrs.iter_mut().take(5) {
            c.point_img = Vec2::new(rng.random_range(0.0..1280.0), rng.random_range(0.0..720.0));
        }
        let params = RansacParams {
            seed: 99,
            ..RansacParams::default()
        };
        let a = ransac_pnp(&corrs, &intr(), &params).unwrap();
        let b = ransac_pnp(&corrs, &intr(), &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ransac_params_validated() {
        let bad = RansacParams {
            min_inliers: 3,
            ..RansacParams::default()
        };
        assert!(matches!(bad.validate(), Err(PnpError::InvalidParams(_))));
    }
}
