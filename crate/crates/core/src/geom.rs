//! Rigid-body algebra on SE(3) and the pose-error measures built on it.
//!
//! Poses map object coordinates into camera coordinates:
//! `x_cam = R · x_obj + t`. Rotations are kept as 3×3 matrices; unit
//! quaternions (`[w, x, y, z]`) only appear at serialization boundaries.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used when validating orthonormality of incoming rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Rotation angles closer than this to π have no unique logarithm.
const LOG_BRANCH_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("rotation angle {angle} rad is too close to pi for a unique logarithm")]
    DegenerateLog { angle: f64 },
    #[error("matrix is not a proper rotation (max deviation {deviation:e})")]
    NotARotation { deviation: f64 },
    #[error("quaternion norm {norm} deviates from 1 by more than {tolerance:e}")]
    QuaternionNotUnit { norm: f64, tolerance: f64 },
}

/// A rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform without checking the rotation.
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a transform after checking `RᵀR = I` and `det R = +1`.
    pub fn try_new(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        let deviation = rotation_deviation(&rotation);
        if deviation > ROTATION_TOLERANCE {
            return Err(GeomError::NotARotation { deviation });
        }
        Ok(Self::new(rotation, translation))
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Mat3::identity(), translation)
    }

    pub fn from_rotation(rotation: Mat3) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::from_rotation(rotation_about(axis, angle))
    }

    /// Builds a transform from a translation and a `[w, x, y, z]` quaternion.
    ///
    /// The quaternion must have unit norm within `tolerance`; it is
    /// re-normalized before conversion.
    pub fn from_quaternion(t: [f64; 3], q: [f64; 4], tolerance: f64) -> Result<Self, GeomError> {
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > tolerance {
            return Err(GeomError::QuaternionNotUnit { norm, tolerance });
        }
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Self::new(
            *unit.to_rotation_matrix().matrix(),
            Vec3::new(t[0], t[1], t[2]),
        ))
    }

    /// Rotation as a `[w, x, y, z]` unit quaternion with `w ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = q.quaternion();
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        [sign * q.w, sign * q.i, sign * q.j, sign * q.k]
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        compose(self, other)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }

    pub fn is_valid(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && rotation_deviation(&self.rotation) <= ROTATION_TOLERANCE
    }
}

/// JSON form of a pose: translation in meters and a `[w, x, y, z]` quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

impl PoseRecord {
    pub fn to_transform(&self, tolerance: f64) -> Result<RigidTransform, GeomError> {
        RigidTransform::from_quaternion(self.t, self.q, tolerance)
    }
}

impl From<&RigidTransform> for PoseRecord {
    fn from(p: &RigidTransform) -> Self {
        Self {
            t: p.translation_array(),
            q: p.quaternion(),
        }
    }
}

/// Maximum entry-wise deviation of `RᵀR` from identity, combined with the
/// deviation of the determinant from +1.
pub fn rotation_deviation(r: &Mat3) -> f64 {
    if r.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

/// `a ∘ b`: the transform that applies `b` first and then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

/// Euclidean distance between two translations, in meters.
pub fn translation_error(pred: &Vec3, gt: &Vec3) -> f64 {
    (pred - gt).norm()
}

/// Geodesic angle between two rotations, in degrees, within `[0, 180]`.
pub fn rotation_error_deg(pred: &Mat3, gt: &Mat3) -> f64 {
    rotation_error_rad(pred, gt).to_degrees()
}

pub fn rotation_error_rad(pred: &Mat3, gt: &Mat3) -> f64 {
    let cos = (((pred * gt.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().abs()
}

/// Local 6-DoF increment: angular part in radians, linear part in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub angular: Vec3,
    pub linear: Vec3,
}

impl Twist {
    pub fn new(angular: Vec3, linear: Vec3) -> Self {
        Self { angular, linear }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Stacks as `[angular; linear]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.angular.x,
            self.angular.y,
            self.angular.z,
            self.linear.x,
            self.linear.y,
            self.linear.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            angular: Vec3::new(v[0], v[1], v[2]),
            linear: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.angular
            .iter()
            .chain(self.linear.iter())
            .all(|v| v.is_finite())
    }
}

pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues rotation of `angle` radians about `axis`.
pub fn rotation_about(axis: &Vec3, angle: f64) -> Mat3 {
    let n = axis.norm();
    if n == 0.0 {
        return Mat3::identity();
    }
    so3_exp(&(axis * (angle / n)))
}

pub fn so3_exp(w: &Vec3) -> Mat3 {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let k = skew(w);
    let (a, b) = if theta < 1e-4 {
        (
            1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0,
            0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Principal-branch logarithm of a rotation.
pub fn so3_log(r: &Mat3) -> Result<Vec3, GeomError> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta > std::f64::consts::PI - LOG_BRANCH_MARGIN {
        return Err(GeomError::DegenerateLog { angle: theta });
    }
    let v = vee(&(r - r.transpose()));
    let scale = if theta < 1e-4 {
        // θ / (2 sin θ) ≈ 1/2 + θ²/12
        0.5 + theta * theta / 12.0
    } else {
        theta / (2.0 * theta.sin())
    };
    Ok(v * scale)
}

/// Left Jacobian of SO(3), mapping the linear part of a twist to a translation.
fn so3_left_jacobian(w: &Vec3) -> Mat3 {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let k = skew(w);
    let (b, c) = if theta < 1e-4 {
        (
            0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
            1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    Mat3::identity() + k * b + k * k * c
}

fn so3_left_jacobian_inv(w: &Vec3) -> Mat3 {
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    let k = skew(w);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    } else {
        let half = theta / 2.0;
        (1.0 - half * half.cos() / half.sin()) / theta_sq
    };
    Mat3::identity() - k * 0.5 + k * k * c
}

pub fn exp_twist(x: &Twist) -> RigidTransform {
    RigidTransform {
        rotation: so3_exp(&x.angular),
        translation: so3_left_jacobian(&x.angular) * x.linear,
    }
}

pub fn log_transform(t: &RigidTransform) -> Result<Twist, GeomError> {
    let angular = so3_log(&t.rotation)?;
    let linear = so3_left_jacobian_inv(&angular) * t.translation;
    Ok(Twist { angular, linear })
}

/// Applies a left increment: `exp(delta) ∘ pose`.
pub fn retract_left(pose: &RigidTransform, delta: &Twist) -> RigidTransform {
    compose(&exp_twist(delta), pose)
}

/// Re-orthonormalizes a nearly orthonormal matrix via SVD.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Mat3::identity(),
    };
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rz(deg: f64) -> RigidTransform {
        RigidTransform::from_axis_angle(&Vec3::z(), deg.to_radians())
    }

    fn random_pose(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(0.0..3.0);
        let mut t = RigidTransform::from_axis_angle(&axis, angle);
        t.translation = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        t
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_pose(&mut rng);
        assert_eq!(compose(&t, &RigidTransform::identity()), t);
        let id = compose(&t, &invert(&t));
        assert!(id.max_abs_diff(&RigidTransform::identity()) < 1e-12);
    }

    #[test]
    fn quarter_turns_compose_to_half_turn() {
        let half = compose(&rz(90.0), &rz(90.0));
        assert!(half.max_abs_diff(&rz(180.0)) < 1e-15);
    }

    #[test]
    fn invert_examples() {
        assert_eq!(
            invert(&RigidTransform::identity()).max_abs_diff(&RigidTransform::identity()),
            0.0
        );
        let t = RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(invert(&t).translation, Vec3::new(-1.0, -2.0, -3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pose(&mut rng);
        assert!(invert(&invert(&p)).max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn translation_error_examples() {
        assert_eq!(translation_error(&Vec3::zeros(), &Vec3::zeros()), 0.0);
        assert_eq!(
            translation_error(&Vec3::new(0.03, 0.0, 0.0), &Vec3::zeros()),
            0.03
        );
        assert_eq!(
            translation_error(&Vec3::new(1.0, 2.0, 2.0), &Vec3::zeros()),
            3.0
        );
    }

    #[test]
    fn rotation_error_examples() {
        let r = rz(37.0).rotation;
        assert_eq!(rotation_error_deg(&r, &r), 0.0);
        assert!((rotation_error_deg(&rz(90.0).rotation, &Mat3::identity()) - 90.0).abs() < 1e-12);
        let rx = RigidTransform::from_axis_angle(&Vec3::x(), PI).rotation;
        assert!((rotation_error_deg(&rx, &Mat3::identity()) - 180.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_error_clamps_drifted_trace() {
        // trace slightly above 3 must not produce NaN
        let r = Mat3::identity() * (1.0 + 1e-15);
        assert_eq!(rotation_error_deg(&r, &Mat3::identity()), 0.0);
    }

    #[test]
    fn exp_examples() {
        assert_eq!(exp_twist(&Twist::zero()), RigidTransform::identity());
        let t = exp_twist(&Twist::new(Vec3::new(0.0, 0.0, FRAC_PI_2), Vec3::zeros()));
        assert!(t.max_abs_diff(&rz(90.0)) < 1e-15);
    }

    #[test]
    fn exp_log_round_trip_small_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = Twist::new(
                Vec3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
                Vec3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
            );
            let t = exp_twist(&x);
            let back = exp_twist(&log_transform(&t).unwrap());
            worst = worst.max(back.max_abs_diff(&t));
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn log_rejects_half_turn() {
        let t = RigidTransform::from_axis_angle(&Vec3::x(), PI);
        assert!(matches!(
            log_transform(&t),
            Err(GeomError::DegenerateLog { .. })
        ));
    }

    #[test]
    fn quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_pose(&mut rng);
        let q = p.quaternion();
        assert!(q[0] >= 0.0);
        let back = RigidTransform::from_quaternion(p.translation_array(), q, 1e-6).unwrap();
        assert!(back.max_abs_diff(&p) < 1e-12);
        assert!(RigidTransform::from_quaternion([0.0; 3], [1.1, 0.0, 0.0, 0.0], 1e-6).is_err());
    }

    #[test]
    fn try_new_rejects_reflection() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::try_new(m, Vec3::zeros()).is_err());
    }
}
