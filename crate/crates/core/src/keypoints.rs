//! Object models, surface keypoint selection and pinhole projection.

use crate::geom::{RigidTransform, Vec3};
use nalgebra::Vector2;
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// Default number of surface keypoints per object.
pub const DEFAULT_KEYPOINT_COUNT: usize = 17;
/// Supported keypoint-count range.
pub const KEYPOINT_COUNT_RANGE: std::ops::RangeInclusive<usize> = 4..=24;
/// Points with camera depth at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("cannot sample {requested} points from {available} vertices")]
    TooFewVertices { requested: usize, available: usize },
    #[error("keypoint count must be at least 1")]
    ZeroKeypoints,
    #[error("keypoint count {0} outside supported range 4..=24")]
    KeypointCountOutOfRange(usize),
    #[error("object model needs at least 4 vertices, got {0}")]
    NotEnoughVertices(usize),
    #[error("keypoint index {index} out of range for {vertices} vertices")]
    KeypointOutOfRange { index: usize, vertices: usize },
    #[error("duplicate keypoint index {0}")]
    DuplicateKeypoint(usize),
    #[error("OBJ line {line}: {reason}")]
    Obj { line: usize, reason: String },
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),
}

/// A rigid assembly part.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub id: String,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub keypoint_indices: Vec<usize>,
    pub symmetric: bool,
}

impl ObjectModel {
    /// Builds a model and selects `n_keypoints` keypoints by farthest point
    /// sampling.
    pub fn new(
        id: impl Into<String>,
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        n_keypoints: usize,
        symmetric: bool,
    ) -> Result<Self, ModelError> {
        if !KEYPOINT_COUNT_RANGE.contains(&n_keypoints) {
            return Err(ModelError::KeypointCountOutOfRange(n_keypoints));
        }
        if vertices.len() < 4 {
            return Err(ModelError::NotEnoughVertices(vertices.len()));
        }
        let keypoint_indices = farthest_point_sample(&vertices, n_keypoints)?;
        Ok(Self {
            id: id.into(),
            vertices,
            faces,
            keypoint_indices,
            symmetric,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vertices.len() < 4 {
            return Err(ModelError::NotEnoughVertices(self.vertices.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for &k in &self.keypoint_indices {
            if k >= self.vertices.len() {
                return Err(ModelError::KeypointOutOfRange {
                    index: k,
                    vertices: self.vertices.len(),
                });
            }
            if !seen.insert(k) {
                return Err(ModelError::DuplicateKeypoint(k));
            }
        }
        Ok(())
    }

    /// Keypoint positions in the object frame.
    pub fn keypoints(&self) -> Vec<Vec3> {
        self.keypoint_indices
            .iter()
            .map(|&i| self.vertices[i])
            .collect()
    }
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// 1280×720 with a 600 px focal length.
    fn default() -> Self {
        Self {
            fx: 600.0,
            fy: 600.0,
            cx: 640.0,
            cy: 360.0,
            width: 1280,
            height: 720,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, ModelError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(ModelError::Intrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ModelError::Intrinsics("resolution must be positive".into()));
        }
        Ok(())
    }

    /// Projects a camera-frame point; `None` when it is behind the camera.
    pub fn project_camera_point(&self, p: &Vec3) -> Option<Vec2> {
        if p.z > MIN_DEPTH {
            Some(Vec2::new(
                self.fx * p.x / p.z + self.cx,
                self.fy * p.y / p.z + self.cy,
            ))
        } else {
            None
        }
    }

    pub fn in_image(&self, uv: &Vec2) -> bool {
        uv.x >= 0.0 && uv.x < self.width as f64 && uv.y >= 0.0 && uv.y < self.height as f64
    }
}

/// A projected point and whether it lands in the image in front of the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vec2,
    pub visible: bool,
}

/// Projects object-frame points through `pose` and the pinhole model.
///
/// Points behind the camera get a NaN pixel and `visible = false`.
pub fn project(
    intr: &CameraIntrinsics,
    pose: &RigidTransform,
    points_obj: &[Vec3],
) -> Vec<Projection> {
    points_obj
        .iter()
        .map(|x| {
            let p = pose.transform_point(x);
            match intr.project_camera_point(&p) {
                Some(pixel) => Projection {
                    pixel,
                    visible: intr.in_image(&pixel),
                },
                None => Projection {
                    pixel: Vec2::new(f64::NAN, f64::NAN),
                    visible: false,
                },
            }
        })
        .collect()
}

/// Greedy max-min farthest point sampling.
///
/// The seed is the vertex farthest from the vertex centroid (lowest index on
/// ties); every further pick maximizes its distance to the already chosen
/// set, again preferring the lowest index on ties.
pub fn farthest_point_sample(vertices: &[Vec3], n: usize) -> Result<Vec<usize>, ModelError> {
    if n == 0 {
        return Err(ModelError::ZeroKeypoints);
    }
    if n > vertices.len() {
        return Err(ModelError::TooFewVertices {
            requested: n,
            available: vertices.len(),
        });
    }
    let centroid = vertices.iter().fold(Vec3::zeros(), |acc, v| acc + v) / vertices.len() as f64;
    let seed = argmax(vertices.iter().map(|v| (v - centroid).norm_squared()));

    let mut selected = Vec::with_capacity(n);
    selected.push(seed);
    let mut min_dist: Vec<f64> = vertices
        .iter()
        .map(|v| (v - vertices[seed]).norm_squared())
        .collect();
    while selected.len() < n {
        let next = argmax(min_dist.iter().copied());
        selected.push(next);
        for (d, v) in min_dist.iter_mut().zip(vertices) {
            let dn = (v - vertices[next]).norm_squared();
            if dn < *d {
                *d = dn;
            }
        }
    }
    Ok(selected)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Parses the `v x y z` / `f i j k` subset of Wavefront OBJ.
///
/// Face entries may carry `/vt/vn` suffixes, which are dropped. Other line
/// types are ignored.
pub fn parse_obj(text: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>), ModelError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| ModelError::Obj {
                        line: line_no,
                        reason: e.to_string(),
                    })?;
                if coords.len() != 3 {
                    return Err(ModelError::Obj {
                        line: line_no,
                        reason: "vertex needs three coordinates".into(),
                    });
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|s| {
                        s.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<usize>()
                            .map_err(|e| e.to_string())
                    })
                    .collect::<Result<_, _>>()
                    .map_err(|reason| ModelError::Obj {
                        line: line_no,
                        reason,
                    })?;
                if idx.len() != 3 {
                    return Err(ModelError::Obj {
                        line: line_no,
                        reason: format!("expected a triangle, got {} indices", idx.len()),
                    });
                }
                let mut tri = [0usize; 3];
                for (slot, &i) in tri.iter_mut().zip(&idx) {
                    if i == 0 {
                        return Err(ModelError::Obj {
                            line: line_no,
                            reason: "OBJ indices are 1-based".into(),
                        });
                    }
                    *slot = i - 1;
                }
                faces.push(tri);
            }
            _ => {}
        }
    }
    for (k, f) in faces.iter().enumerate() {
        if f.iter().any(|&i| i >= vertices.len()) {
            return Err(ModelError::Obj {
                line: 0,
                reason: format!("face {k} references a missing vertex"),
            });
        }
    }
    Ok((vertices, faces))
}

/// Writes vertices and faces as OBJ text.
pub fn write_obj(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut out = String::new();
    for v in vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}
