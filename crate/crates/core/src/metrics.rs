//! Pose accuracy metrics: ADD, ADD-S, the thresholded ramp score and mean
//! translation/rotation errors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{rotation_error_deg, translation_error, RigidTransform, Vec3};
use crate::keypoints::ObjectModel;

/// Default ADD(S) score threshold: 10 cm.
pub const DEFAULT_SCORE_THRESHOLD_M: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("cannot aggregate an empty error list")]
    EmptyInput,
    #[error("score threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
}

/// Mean distance between corresponding model points under both poses.
///
/// Returns NaN for an empty vertex list.
pub fn add_error(pred: &RigidTransform, gt: &RigidTransform, vertices: &[Vec3]) -> f64 {
    let sum: f64 = vertices
        .iter()
        .map(|x| (pred.transform_point(x) - gt.transform_point(x)).norm())
        .sum();
    sum / vertices.len() as f64
}

/// Mean closest-point distance from predicted to ground-truth model points.
///
/// Exact nearest neighbour by exhaustive search. Returns NaN for an empty
/// vertex list.
pub fn adds_error(pred: &RigidTransform, gt: &RigidTransform, vertices: &[Vec3]) -> f64 {
    let gt_pts: Vec<Vec3> = vertices.iter().map(|x| gt.transform_point(x)).collect();
    let sum: f64 = vertices
        .iter()
        .map(|x| {
            let p = pred.transform_point(x);
            gt_pts
                .iter()
                .map(|g| (p - g).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    sum / vertices.len() as f64
}

/// ADD-S for symmetric models, ADD otherwise.
pub fn model_error(model: &ObjectModel, pred: &RigidTransform, gt: &RigidTransform) -> f64 {
    if model.symmetric {
        adds_error(pred, gt, &model.vertices)
    } else {
        add_error(pred, gt, &model.vertices)
    }
}

/// Mean of `max(1 − e/threshold, 0)` over all errors.
///
/// Infinite errors (a missing pose) contribute zero.
pub fn score(errors: &[f64], threshold: f64) -> Result<f64, MetricsError> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    if errors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let total: f64 = errors.iter().map(|e| (1.0 - e / threshold).max(0.0)).sum();
    Ok(total / errors.len() as f64)
}

/// Errors of one object in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectErrors {
    /// ADD or ADD-S in meters, `None` when the tracker had no pose.
    pub add_or_adds: Option<f64>,
    pub e_trans: Option<f64>,
    /// Degrees; always `None` for symmetric objects.
    pub e_rot: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameErrors {
    pub frame_index: usize,
    pub objects: BTreeMap<String, ObjectErrors>,
}

/// Per-object errors of `pred` against `gt` for one frame. Objects absent
/// from `pred` get all-`None` errors; objects absent from `gt` are skipped.
pub fn frame_errors(
    frame_index: usize,
    models: &[ObjectModel],
    pred: &BTreeMap<String, RigidTransform>,
    gt: &BTreeMap<String, RigidTransform>,
) -> FrameErrors {
    let mut objects = BTreeMap::new();
    for m in models {
        let Some(g) = gt.get(&m.id) else { continue };
        let errs = match pred.get(&m.id) {
            Some(p) => ObjectErrors {
                add_or_adds: Some(model_error(m, p, g)),
                e_trans: Some(translation_error(&p.translation, &g.translation)),
                e_rot: (!m.symmetric).then(|| rotation_error_deg(&p.rotation, &g.rotation)),
            },
            None => ObjectErrors {
                add_or_adds: None,
                e_trans: None,
                e_rot: None,
            },
        };
        objects.insert(m.id.clone(), errs);
    }
    FrameErrors {
        frame_index,
        objects,
    }
}

/// Mean translation (m) and rotation (deg) errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageErrors {
    pub trans_m: f64,
    /// `None` if every sample came from a symmetric object.
    pub rot_deg: Option<f64>,
}

/// Arithmetic means of `(e_trans, e_rot)` samples. Rotation samples given as
/// `None` (symmetric objects) are left out of the rotation mean only.
pub fn average_errors(samples: &[(f64, Option<f64>)]) -> Result<AverageErrors, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let trans_m = samples.iter().map(|s| s.0).sum::<f64>() / samples.len() as f64;
    let rots: Vec<f64> = samples.iter().filter_map(|s| s.1).collect();
    let rot_deg = (!rots.is_empty()).then(|| rots.iter().sum::<f64>() / rots.len() as f64);
    Ok(AverageErrors { trans_m, rot_deg })
}

/// Aggregate of a run: ADD(S) score over every (frame, object) pair, with
/// missing poses scoring zero, plus mean errors over the pairs that had a pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub adds_score: f64,
    pub e_trans_m: Option<f64>,
    pub e_rot_deg: Option<f64>,
    pub samples: usize,
    pub missing: usize,
}

pub fn summarize(frames: &[FrameErrors], threshold: f64) -> Result<RunSummary, MetricsError> {
    let mut scores = Vec::new();
    let mut pairs = Vec::new();
    let mut missing = 0;
    for f in frames {
        for e in f.objects.values() {
            match (e.add_or_adds, e.e_trans) {
                (Some(a), Some(t)) => {
                    scores.push(a);
                    pairs.push((t, e.e_rot));
                }
                _ => {
                    scores.push(f64::INFINITY);
                    missing += 1;
                }
            }
        }
    }
    let adds_score = score(&scores, threshold)?;
    let avg = average_errors(&pairs).ok();
    Ok(RunSummary {
        adds_score,
        e_trans_m: avg.map(|a| a.trans_m),
        e_rot_deg: avg.and_then(|a| a.rot_deg),
        samples: scores.len(),
        missing,
    })
}
