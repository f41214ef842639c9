//! Simulated keypoint detector.
//!
//! Produces the same output a learned keypoint detector would (per-object 2D
//! keypoints with confidences, or a miss) from ground-truth poses, degraded by
//! a [`NoiseProfile`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::RigidTransform;
use crate::keypoints::{project, CameraIntrinsics, ObjectModel, Vec2};
use crate::pnp::Correspondence;

/// Confidence assigned to replaced (outlier) keypoints.
pub const OUTLIER_CONFIDENCE: f64 = 0.1;
/// Floor of the residual-based confidence of a regular keypoint.
pub const MIN_INLIER_CONFIDENCE: f64 = 0.2;
/// Pixel residual at which the confidence ramp reaches its floor region.
pub const CONFIDENCE_RAMP_PX: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("unknown condition `{0}` (expected normal, dynamic, blur or hand)")]
    UnknownCondition(String),
    #[error("invalid noise profile: {0}")]
    InvalidProfile(&'static str),
}

/// Test conditions of the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Normal,
    Dynamic,
    Blur,
    Hand,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Normal,
        Condition::Dynamic,
        Condition::Blur,
        Condition::Hand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::Dynamic => "dynamic",
            Condition::Blur => "blur",
            Condition::Hand => "hand",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Condition {
    type Err = DetectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DetectorError::UnknownCondition(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub pixel_sigma: f64,
    pub dropout_prob: f64,
    pub keypoint_outlier_prob: f64,
    pub seed: u64,
}

impl NoiseProfile {
    /// A noiseless, never-dropping profile.
    pub fn zero(seed: u64) -> Self {
        Self {
            pixel_sigma: 0.0,
            dropout_prob: 0.0,
            keypoint_outlier_prob: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(self.pixel_sigma >= 0.0 && self.pixel_sigma.is_finite()) {
            return Err(DetectorError::InvalidProfile(
                "pixel_sigma must be finite and >= 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(DetectorError::InvalidProfile(
                "dropout_prob must be in [0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.keypoint_outlier_prob) {
            return Err(DetectorError::InvalidProfile(
                "keypoint_outlier_prob must be in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Noise profile of a named condition (seed 0).
pub fn condition_profile(name: &str) -> Result<NoiseProfile, DetectorError> {
    Ok(profile_for(name.parse()?))
}

pub fn profile_for(condition: Condition) -> NoiseProfile {
    let (pixel_sigma, dropout_prob, keypoint_outlier_prob) = match condition {
        Condition::Normal => (1.0, 0.02, 0.02),
        Condition::Dynamic => (2.0, 0.10, 0.05),
        Condition::Blur => (4.0, 0.05, 0.05),
        Condition::Hand => (1.5, 0.35, 0.10),
    };
    NoiseProfile {
        pixel_sigma,
        dropout_prob,
        keypoint_outlier_prob,
        seed: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedKeypoint {
    pub pixel: Vec2,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub object_id: String,
    pub frame_index: usize,
    pub detected: bool,
    /// One entry per model keypoint when detected, empty otherwise.
    pub keypoints: Vec<DetectedKeypoint>,
}

impl Observation {
    pub fn missed(object_id: &str, frame_index: usize) -> Self {
        Self {
            object_id: object_id.to_string(),
            frame_index,
            detected: false,
            keypoints: Vec::new(),
        }
    }

    /// Keypoints with positive confidence.
    pub fn usable_count(&self) -> usize {
        if !self.detected {
            return 0;
        }
        self.keypoints.iter().filter(|k| k.confidence > 0.0).count()
    }

    /// 2D-3D correspondences against the model's keypoints, optionally
    /// mapping object points through `frame` (e.g. into a module root frame).
    pub fn correspondences(
        &self,
        model: &ObjectModel,
        frame: Option<&RigidTransform>,
    ) -> Vec<Correspondence> {
        if !self.detected {
            return Vec::new();
        }
        model
            .keypoints()
            .iter()
            .zip(&self.keypoints)
            .filter(|(_, k)| k.confidence > 0.0)
            .map(|(x, k)| {
                let p = frame.map_or(*x, |f| f.transform_point(x));
                Correspondence::new(p, k.pixel, k.confidence)
            })
            .collect()
    }
}

/// Stable 64-bit FNV-1a, used so that RNG streams do not depend on the
/// standard library's unspecified hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// RNG dedicated to one (seed, frame, object) triple.
pub fn observation_rng(seed: u64, frame_index: usize, object_id: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(frame_index as u64).to_le_bytes());
    key[16..24].copy_from_slice(&fnv1a(object_id.as_bytes()).to_le_bytes());
    key[24..].copy_from_slice(b"gbot-obs");
    ChaCha8Rng::from_seed(key)
}

/// Simulates one detection of `model` at `gt_pose`.
///
/// Deterministic in `(profile.seed, frame_index, model.id)`. Every keypoint
/// consumes the same number of random draws whatever branch it takes.
pub fn simulate_observation(
    model: &ObjectModel,
    gt_pose: &RigidTransform,
    intr: &CameraIntrinsics,
    profile: &NoiseProfile,
    frame_index: usize,
) -> Observation {
    let mut rng = observation_rng(profile.seed, frame_index, &model.id);
    let dropped = rng.random::<f64>() < profile.dropout_prob;
    if dropped {
        return Observation::missed(&model.id, frame_index);
    }
    let projections = project(intr, gt_pose, &model.keypoints());
    let keypoints = projections
        .iter()
        .map(|pr| {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let outlier = rng.random::<f64>() < profile.keypoint_outlier_prob;
            let ou = rng.random::<f64>() * intr.width as f64;
            let ov = rng.random::<f64>() * intr.height as f64;
            if !pr.visible {
                let pixel = if pr.pixel.iter().all(|v| v.is_finite()) {
                    pr.pixel
                } else {
                    Vec2::zeros()
                };
                return DetectedKeypoint {
                    pixel,
                    confidence: 0.0,
                };
            }
            if outlier {
                return DetectedKeypoint {
                    pixel: Vec2::new(ou, ov),
                    confidence: OUTLIER_CONFIDENCE,
                };
            }
            let noise = Vec2::new(nx, ny) * profile.pixel_sigma;
            DetectedKeypoint {
                pixel: pr.pixel + noise,
                confidence: (1.0 - noise.norm() / CONFIDENCE_RAMP_PX)
                    .clamp(MIN_INLIER_CONFIDENCE, 1.0),
            }
        })
        .collect();
    Observation {
        object_id: model.id.clone(),
        frame_index,
        detected: true,
        keypoints,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::pnp::{ransac_pnp, RansacParams};

    fn cube_model() -> ObjectModel {
        let mut v = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    if [i, j, k].iter().any(|&c| c == 0 || c == 4) {
                        v.push(
                            Vec3::new(i as f64, j as f64, k as f64) * 0.025 - Vec3::repeat(0.05),
                        );
                    }
                }
            }
        }
        ObjectModel::new("cube", v, Vec::new(), 17, false).unwrap()
    }

    fn pose() -> RigidTransform {
        let mut p = RigidTransform::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 0.7);
        p.translation = Vec3::new(0.02, -0.01, 0.5);
        p
    }

    #[test]
    fn zero_profile_is_exact_projection() {
        let m = cube_model();
        let intr = CameraIntrinsics::default();
        let obs = simulate_observation(&m, &pose(), &intr, &NoiseProfile::zero(3), 4);
        assert!(obs.detected);
        let exact = project(&intr, &pose(), &m.keypoints());
        for (k, e) in obs.keypoints.iter().zip(&exact) {
            assert_eq!(k.pixel, e.pixel);
            assert_eq!(k.confidence, 1.0);
        }
    }

    #[test]
    fn full_dropout_never_detects() {
        let m = cube_model();
        let profile = NoiseProfile {
            dropout_prob: 1.0,
            ..NoiseProfile::zero(1)
        };
        for f in 0..50 {
            let obs = simulate_observation(&m, &pose(), &CameraIntrinsics::default(), &profile, f);
            assert!(!obs.detected);
            assert!(obs.keypoints.is_empty());
        }
    }

    #[test]
    fn empirical_sigma_matches() {
        let m = cube_model();
        let intr = CameraIntrinsics::default();
        let profile = NoiseProfile {
            pixel_sigma: 2.0,
            ..NoiseProfile::zero(9)
        };
        let exact = project(&intr, &pose(), &m.keypoints());
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        let mut f = 0;
        while n < 10_000 {
            let obs = simulate_observation(&m, &pose(), &intr, &profile, f);
            for (k, e) in obs.keypoints.iter().zip(&exact) {
                let d = k.pixel - e.pixel;
                sx += d.x * d.x;
                sy += d.y * d.y;
                n += 1;
            }
            f += 1;
        }
        let (stdx, stdy) = ((sx / n as f64).sqrt(), (sy / n as f64).sqrt());
        assert!((stdx - 2.0).abs() < 0.1, "{stdx}");
        assert!((stdy - 2.0).abs() < 0.1, "{stdy}");
    }

    #[test]
    fn deterministic_per_triple() {
        let m = cube_model();
        let profile = profile_for(Condition::Blur).with_seed(77);
        let intr = CameraIntrinsics::default();
        let a = simulate_observation(&m, &pose(), &intr, &profile, 12);
        let b = simulate_observation(&m, &pose(), &intr, &profile, 12);
        assert_eq!(a, b);
        let c = simulate_observation(&m, &pose(), &intr, &profile, 13);
        assert_ne!(a, c);
    }

    #[test]
    fn profiles_table() {
        let n = condition_profile("normal").unwrap();
        assert_eq!(
            (n.pixel_sigma, n.dropout_prob, n.keypoint_outlier_prob),
            (1.0, 0.02, 0.02)
        );
        let d = condition_profile("dynamic").unwrap();
        assert_eq!(
            (d.pixel_sigma, d.dropout_prob, d.keypoint_outlier_prob),
            (2.0, 0.10, 0.05)
        );
        let b = condition_profile("blur").unwrap();
        assert_eq!(
            (b.pixel_sigma, b.dropout_prob, b.keypoint_outlier_prob),
            (4.0, 0.05, 0.05)
        );
        let h = condition_profile("hand").unwrap();
        assert_eq!(
            (h.pixel_sigma, h.dropout_prob, h.keypoint_outlier_prob),
            (1.5, 0.35, 0.10)
        );
        assert_eq!(
            condition_profile("fog"),
            Err(DetectorError::UnknownCondition("fog".into()))
        );
        for c in Condition::ALL {
            profile_for(c).validate().unwrap();
        }
    }

    #[test]
    fn invisible_keypoints_have_zero_confidence() {
        let m = cube_model();
        let mut p = pose();
        p.translation.x = 0.55; // right edge of the image at 0.5 m
        let obs = simulate_observation(
            &m,
            &p,
            &CameraIntrinsics::default(),
            &NoiseProfile::zero(0),
            0,
        );
        let exact = project(&CameraIntrinsics::default(), &p, &m.keypoints());
        assert!(exact.iter().any(|e| !e.visible));
        for (k, e) in obs.keypoints.iter().zip(&exact) {
            assert_eq!(k.confidence == 0.0, !e.visible);
        }
    }

    #[test]
    fn zero_noise_ransac_recovers_pose() {
        let m = cube_model();
        let intr = CameraIntrinsics::default();
        let obs = simulate_observation(&m, &pose(), &intr, &NoiseProfile::zero(5), 0);
        let out = ransac_pnp(
            &obs.correspondences(&m, None),
            &intr,
            &RansacParams::default(),
        )
        .unwrap();
        assert!((out.pose.translation - pose().translation).norm() < 1e-6);
        assert!(out.pose.max_abs_diff(&pose()) < 1e-6);
    }
}
