//! Synthetic assembly sequences.
//!
//! A [`SequenceScript`] describes waypoint trajectories, the frames at which
//! parts snap into place and occlusion windows. [`generate_ground_truth`]
//! turns it into per-frame poses and [`generate_observations`] feeds those
//! through the simulated detector. Five built-in assets mirror the part
//! rosters of the reference evaluation with primitive stand-in meshes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{
    AssemblyGraph, AssemblyState, KinematicLink, ObjectSpec, SwitchPair, DEFAULT_ROT_THRESHOLD_DEG,
    DEFAULT_TRANS_THRESHOLD_M,
};
use crate::detector::{
    profile_for, simulate_observation, Condition, DetectedKeypoint, NoiseProfile, Observation,
};
use crate::geom::{compose, so3_exp, so3_log, PoseRecord, RigidTransform, Vec3};
use crate::keypoints::{CameraIntrinsics, ObjectModel, Vec2, DEFAULT_KEYPOINT_COUNT};

/// Quaternion tolerance used when reading poses back from JSON.
const JSON_QUATERNION_TOLERANCE: f64 = 1e-9;

pub const BUILTIN_ASSETS: [&str; 5] = [
    "hobby_corner_clamp",
    "geared_caliper",
    "nano_chuck",
    "hand_screw_clamp",
    "liftpod",
];

/// Length of the scripted child occlusion after each assembly step (hand condition).
pub const CHILD_OCCLUSION_FRAMES: usize = 30;
/// Length of the optional whole-roster occlusion.
pub const FULL_OCCLUSION_FRAMES: usize = 20;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown asset `{0}`")]
    UnknownAsset(String),
    #[error("invalid script: {0}")]
    Script(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {what} at line {line}: {reason}")]
    Parse {
        what: &'static str,
        line: usize,
        reason: String,
    },
}

fn script_err(msg: impl Into<String>) -> SceneError {
    SceneError::Script(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WaypointRecord", into = "WaypointRecord")]
pub struct Waypoint {
    pub frame: usize,
    pub pose: RigidTransform,
}

#[derive(Serialize, Deserialize)]
struct WaypointRecord {
    frame: usize,
    t: [f64; 3],
    q: [f64; 4],
}

impl From<Waypoint> for WaypointRecord {
    fn from(w: Waypoint) -> Self {
        let r = PoseRecord::from(&w.pose);
        Self {
            frame: w.frame,
            t: r.t,
            q: r.q,
        }
    }
}

impl TryFrom<WaypointRecord> for Waypoint {
    type Error = String;

    fn try_from(r: WaypointRecord) -> Result<Self, String> {
        let pose = RigidTransform::from_quaternion(r.t, r.q, JSON_QUATERNION_TOLERANCE)
            .map_err(|e| e.to_string())?;
        Ok(Self {
            frame: r.frame,
            pose,
        })
    }
}

/// The frame at which the assembly reaches `state_index`: from this frame on
/// the switch pair of `state_index − 1` sits exactly at its expected pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyEvent {
    pub frame: usize,
    pub state_index: usize,
}

/// Inclusive frame range during which an object is never detected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionWindow {
    pub object_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl OcclusionWindow {
    pub fn covers(&self, object_id: &str, frame: usize) -> bool {
        self.object_id == object_id && (self.start_frame..=self.end_frame).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScript {
    pub asset: String,
    pub n_frames: usize,
    pub condition: Condition,
    pub seed: u64,
    /// Replace the condition's noise with a perfect detector (occlusion
    /// windows still apply).
    #[serde(default)]
    pub noiseless: bool,
    pub trajectories: BTreeMap<String, Vec<Waypoint>>,
    pub assembly_events: Vec<AssemblyEvent>,
    #[serde(default)]
    pub occlusion_windows: Vec<OcclusionWindow>,
}

impl SequenceScript {
    pub fn validate(&self, graph: &AssemblyGraph) -> Result<(), SceneError> {
        if self.n_frames == 0 {
            return Err(script_err("n_frames must be positive"));
        }
        for o in &graph.objects {
            let wps = self
                .trajectories
                .get(&o.id)
                .ok_or_else(|| script_err(format!("no trajectory for `{}`", o.id)))?;
            if wps.is_empty() {
                return Err(script_err(format!("empty trajectory for `{}`", o.id)));
            }
            if wps.windows(2).any(|w| w[0].frame >= w[1].frame) {
                return Err(script_err(format!(
                    "waypoints of `{}` are not strictly sorted",
                    o.id
                )));
            }
            if let Some(w) = wps.iter().find(|w| w.frame >= self.n_frames) {
                return Err(script_err(format!(
                    "waypoint frame {} of `{}` is outside 0..{}",
                    w.frame, o.id, self.n_frames
                )));
            }
        }
        if let Some(id) = self
            .trajectories
            .keys()
            .find(|id| !graph.objects.iter().any(|o| &o.id == *id))
        {
            return Err(script_err(format!("trajectory for unknown object `{id}`")));
        }
        for (i, e) in self.assembly_events.iter().enumerate() {
            if e.frame >= self.n_frames {
                return Err(script_err(format!(
                    "event frame {} outside the sequence",
                    e.frame
                )));
            }
            if e.state_index == 0 || e.state_index > graph.terminal_state() {
                return Err(script_err(format!(
                    "event state {} has no switch pair before it",
                    e.state_index
                )));
            }
            if i > 0 {
                let p = &self.assembly_events[i - 1];
                if e.frame <= p.frame || e.state_index <= p.state_index {
                    return Err(script_err(
                        "assembly events must strictly increase in frame and state",
                    ));
                }
            }
        }
        for w in &self.occlusion_windows {
            if w.start_frame > w.end_frame {
                return Err(script_err(format!(
                    "occlusion window of `{}` ends before it starts",
                    w.object_id
                )));
            }
        }
        Ok(())
    }

    fn occluded(&self, object_id: &str, frame: usize) -> bool {
        self.occlusion_windows
            .iter()
            .any(|w| w.covers(object_id, frame))
    }

    /// Detector profile implied by the condition, seed and noiseless flag.
    pub fn noise_profile(&self) -> NoiseProfile {
        if self.noiseless {
            NoiseProfile::zero(self.seed)
        } else {
            profile_for(self.condition).with_seed(self.seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub frame_index: usize,
    pub poses: BTreeMap<String, RigidTransform>,
}

/// Pose along a waypoint list: linear in translation, constant angular
/// velocity in rotation, clamped to the end waypoints.
pub fn interpolate(waypoints: &[Waypoint], frame: usize) -> Result<RigidTransform, SceneError> {
    let first = waypoints
        .first()
        .ok_or_else(|| script_err("empty trajectory"))?;
    if frame <= first.frame {
        return Ok(first.pose);
    }
    let k = waypoints.partition_point(|w| w.frame <= frame) - 1;
    let a = &waypoints[k];
    let Some(b) = waypoints.get(k + 1) else {
        return Ok(a.pose);
    };
    if frame == a.frame {
        return Ok(a.pose);
    }
    let s = (frame - a.frame) as f64 / (b.frame - a.frame) as f64;
    let delta = so3_log(&(a.pose.rotation.transpose() * b.pose.rotation)).map_err(|_| {
        script_err(format!(
            "waypoints at frames {} and {} differ by a half turn",
            a.frame, b.frame
        ))
    })?;
    Ok(RigidTransform::new(
        a.pose.rotation * so3_exp(&(delta * s)),
        a.pose.translation + (b.pose.translation - a.pose.translation) * s,
    ))
}

/// Ground-truth poses of every object at one frame.
pub fn poses_at(
    script: &SequenceScript,
    graph: &AssemblyGraph,
    frame: usize,
) -> Result<BTreeMap<String, RigidTransform>, SceneError> {
    // attached parts follow `parent ∘ expected` from their event frame on
    let mut slaved: BTreeMap<&str, (&str, RigidTransform)> = BTreeMap::new();
    for e in script.assembly_events.iter().filter(|e| e.frame <= frame) {
        let sw = graph.states[e.state_index - 1]
            .switch_pair
            .as_ref()
            .ok_or_else(|| script_err(format!("state {} has no switch pair", e.state_index - 1)))?;
        if slaved
            .insert(sw.b_id.as_str(), (sw.a_id.as_str(), sw.expected))
            .is_some()
        {
            return Err(script_err(format!("`{}` is attached twice", sw.b_id)));
        }
    }
    let mut out = BTreeMap::new();
    for o in &graph.objects {
        resolve(script, &slaved, &o.id, frame, &mut out, 0)?;
    }
    Ok(out)
}

fn resolve(
    script: &SequenceScript,
    slaved: &BTreeMap<&str, (&str, RigidTransform)>,
    id: &str,
    frame: usize,
    out: &mut BTreeMap<String, RigidTransform>,
    depth: usize,
) -> Result<RigidTransform, SceneError> {
    if let Some(p) = out.get(id) {
        return Ok(*p);
    }
    if depth > slaved.len() {
        return Err(script_err("assembly events form a cycle"));
    }
    let pose = match slaved.get(id) {
        Some((parent, expected)) => compose(
            &resolve(script, slaved, parent, frame, out, depth + 1)?,
            expected,
        ),
        None => {
            let wps = script
                .trajectories
                .get(id)
                .ok_or_else(|| script_err(format!("no trajectory for `{id}`")))?;
            interpolate(wps, frame)?
        }
    };
    out.insert(id.to_string(), pose);
    Ok(pose)
}

pub fn generate_ground_truth(
    script: &SequenceScript,
    graph: &AssemblyGraph,
) -> Result<Vec<GroundTruthFrame>, SceneError> {
    script.validate(graph)?;
    (0..script.n_frames)
        .map(|f| {
            Ok(GroundTruthFrame {
                frame_index: f,
                poses: poses_at(script, graph, f)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservations {
    pub frame_index: usize,
    /// One observation per model, in model order.
    pub observations: Vec<Observation>,
}

impl FrameObservations {
    pub fn get(&self, object_id: &str) -> Option<&Observation> {
        self.observations.iter().find(|o| o.object_id == object_id)
    }
}

/// Simulated detections for every frame under the script's condition;
/// objects inside an occlusion window are never detected.
pub fn generate_observations(
    gt: &[GroundTruthFrame],
    models: &[ObjectModel],
    intr: &CameraIntrinsics,
    script: &SequenceScript,
) -> Vec<FrameObservations> {
    let profile = script.noise_profile();
    gt.iter()
        .map(|g| FrameObservations {
            frame_index: g.frame_index,
            observations: models
                .iter()
                .map(|m| match g.poses.get(&m.id) {
                    Some(pose) if !script.occluded(&m.id, g.frame_index) => {
                        simulate_observation(m, pose, intr, &profile, g.frame_index)
                    }
                    _ => Observation::missed(&m.id, g.frame_index),
                })
                .collect(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Primitive meshes

/// Axis-aligned box surface sampled on a `(n+1)^3` lattice, triangulated.
pub fn box_mesh(half: Vec3, n: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let n = n.max(1);
    let mut index = BTreeMap::new();
    let mut vertices = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                if [i, j, k].iter().any(|&c| c == 0 || c == n) {
                    index.insert((i, j, k), vertices.len());
                    let c = |v: usize, h: f64| (2.0 * v as f64 / n as f64 - 1.0) * h;
                    vertices.push(Vec3::new(c(i, half.x), c(j, half.y), c(k, half.z)));
                }
            }
        }
    }
    let mut faces = Vec::new();
    for axis in 0..3 {
        for side in [0, n] {
            for a in 0..n {
                for b in 0..n {
                    let at = |da: usize, db: usize| {
                        let mut c = [0; 3];
                        c[axis] = side;
                        c[(axis + 1) % 3] = a + da;
                        c[(axis + 2) % 3] = b + db;
                        index[&(c[0], c[1], c[2])]
                    };
                    let (v00, v10, v11, v01) = (at(0, 0), at(1, 0), at(1, 1), at(0, 1));
                    if side == 0 {
                        faces.push([v00, v11, v10]);
                        faces.push([v00, v01, v11]);
                    } else {
                        faces.push([v00, v10, v11]);
                        faces.push([v00, v11, v01]);
                    }
                }
            }
        }
    }
    (vertices, faces)
}

/// Closed cylinder along z with `segments` around and `rings` height bands.
pub fn cylinder_mesh(
    radius: f64,
    half_height: f64,
    segments: usize,
    rings: usize,
) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let segments = segments.max(3);
    let rings = rings.max(1);
    let mut vertices = Vec::new();
    for r in 0..=rings {
        let z = -half_height + 2.0 * half_height * r as f64 / rings as f64;
        for s in 0..segments {
            let a = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let bottom = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, -half_height));
    let top = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, half_height));
    let mut faces = Vec::new();
    let at = |r: usize, s: usize| r * segments + s % segments;
    for r in 0..rings {
        for s in 0..segments {
            faces.push([at(r, s), at(r, s + 1), at(r + 1, s + 1)]);
            faces.push([at(r, s), at(r + 1, s + 1), at(r + 1, s)]);
        }
    }
    for s in 0..segments {
        faces.push([bottom, at(0, s + 1), at(0, s)]);
        faces.push([top, at(rings, s), at(rings, s + 1)]);
    }
    (vertices, faces)
}

// ---------------------------------------------------------------------------
// Built-in assets

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box(f64, f64, f64),
    Cylinder(f64, f64),
}

impl Shape {
    fn mesh(self) -> (Vec<Vec3>, Vec<[usize; 3]>) {
        match self {
            Shape::Box(x, y, z) => box_mesh(Vec3::new(x, y, z), 4),
            Shape::Cylinder(r, h) => cylinder_mesh(r, h, 16, 2),
        }
    }
}

struct PartDef {
    id: &'static str,
    shape: Shape,
    symmetric: bool,
}

/// `child` attaches to `parent` at `t` (parent frame), rotated by `rot_deg`
/// about `axis`.
struct AttachDef {
    parent: &'static str,
    child: &'static str,
    t: [f64; 3],
    axis: [f64; 3],
    rot_deg: f64,
}

struct AssetDef {
    base: &'static str,
    parts: Vec<PartDef>,
    attachments: Vec<AttachDef>,
}

const fn part(id: &'static str, shape: Shape, symmetric: bool) -> PartDef {
    PartDef {
        id,
        shape,
        symmetric,
    }
}

const fn attach(
    parent: &'static str,
    child: &'static str,
    t: [f64; 3],
    axis: [f64; 3],
    rot_deg: f64,
) -> AttachDef {
    AttachDef {
        parent,
        child,
        t,
        axis,
        rot_deg,
    }
}

const X: [f64; 3] = [1.0, 0.0, 0.0];
const Y: [f64; 3] = [0.0, 1.0, 0.0];
const Z: [f64; 3] = [0.0, 0.0, 1.0];

fn asset_def(name: &str) -> Option<AssetDef> {
    use Shape::{Box as B, Cylinder as C};
    let def = match name {
        "hobby_corner_clamp" => AssetDef {
            base: "clamp_base",
            parts: vec![
                part("clamp_base", B(0.06, 0.04, 0.02), false),
                part("clamp_bolt", C(0.012, 0.04), true),
                part("clamp_jaw", B(0.04, 0.03, 0.02), false),
            ],
            attachments: vec![
                attach("clamp_base", "clamp_jaw", [0.10, 0.0, 0.0], Z, 0.0),
                attach("clamp_jaw", "clamp_bolt", [0.0, 0.042, 0.0], Y, 90.0),
            ],
        },
        "geared_caliper" => AssetDef {
            base: "fix",
            parts: vec![
                part("fix", B(0.08, 0.015, 0.008), false),
                part("move_bottom", B(0.03, 0.02, 0.008), false),
                part("move_top_vernier", B(0.025, 0.012, 0.006), false),
            ],
            attachments: vec![
                attach("fix", "move_bottom", [0.02, -0.035, 0.0], Z, 0.0),
                attach("move_bottom", "move_top_vernier", [0.0, 0.0, 0.014], Z, 0.0),
            ],
        },
        "nano_chuck" => AssetDef {
            base: "base",
            parts: vec![
                part("balljoint", C(0.02, 0.02), true),
                part("base", B(0.05, 0.05, 0.015), false),
                part("headplate", C(0.035, 0.008), true),
                part("nut", C(0.015, 0.008), true),
                part("screw", C(0.006, 0.03), true),
                part("vise_base", B(0.045, 0.025, 0.01), false),
                part("vise_screw", C(0.005, 0.035), true),
                part("vise_slider", B(0.02, 0.025, 0.01), false),
            ],
            attachments: vec![
                attach("base", "balljoint", [0.0, 0.0, 0.035], Z, 0.0),
                attach("balljoint", "headplate", [0.0, 0.0, 0.028], Z, 0.0),
                attach("headplate", "screw", [0.0, 0.0, 0.038], Z, 0.0),
                attach("screw", "nut", [0.0, 0.0, 0.02], Z, 0.0),
                attach("headplate", "vise_base", [0.0, 0.0, 0.018], Z, 30.0),
                attach("vise_base", "vise_slider", [0.03, 0.0, 0.02], Z, 0.0),
                attach("vise_slider", "vise_screw", [0.04, 0.0, 0.0], Y, 90.0),
            ],
        },
        "hand_screw_clamp" => AssetDef {
            base: "jaw_1",
            parts: vec![
                part("jaw_1", B(0.08, 0.015, 0.015), false),
                part("jaw_2", B(0.08, 0.015, 0.015), false),
                part("knob_1", C(0.015, 0.015), true),
                part("knob_2", C(0.015, 0.015), true),
                part("pad", B(0.03, 0.005, 0.015), false),
                part("thread_1", C(0.006, 0.05), true),
                part("thread_2", C(0.006, 0.05), true),
            ],
            attachments: vec![
                attach("jaw_1", "thread_1", [-0.04, 0.0, 0.0], X, 90.0),
                attach("jaw_1", "thread_2", [0.04, 0.0, 0.0], X, 90.0),
                attach("thread_1", "jaw_2", [0.04, 0.0, -0.05], X, -90.0),
                attach("thread_1", "knob_1", [0.0, 0.0, 0.065], Z, 0.0),
                attach("thread_2", "knob_2", [0.0, 0.0, 0.065], Z, 0.0),
                attach("jaw_2", "pad", [0.0, -0.02, 0.0], Z, 0.0),
            ],
        },
        "liftpod" => AssetDef {
            base: "base_plate",
            parts: vec![
                part("arm_first", C(0.01, 0.05), true),
                part("arm_last", C(0.01, 0.05), true),
                part("bar", C(0.008, 0.06), true),
                part("base_plate", C(0.05, 0.006), true),
                part("clamp_frame", B(0.025, 0.02, 0.015), false),
                part("clamp_slider", B(0.015, 0.015, 0.01), false),
                part("sleeve", C(0.014, 0.02), true),
            ],
            attachments: vec![
                attach("base_plate", "bar", [0.0, 0.0, 0.066], Z, 0.0),
                attach("bar", "sleeve", [0.0, 0.0, 0.04], Z, 0.0),
                attach("sleeve", "arm_first", [0.05, 0.0, 0.0], Y, 90.0),
                attach("arm_first", "arm_last", [0.0, 0.0, 0.1], Z, 0.0),
                attach("arm_last", "clamp_frame", [0.0, 0.0, 0.065], Z, 0.0),
                attach("clamp_frame", "clamp_slider", [0.0, 0.035, 0.0], Z, 0.0),
            ],
        },
        _ => return None,
    };
    Some(def)
}

fn link_transform(a: &AttachDef) -> RigidTransform {
    let mut t = RigidTransform::from_axis_angle(&Vec3::from(a.axis), a.rot_deg.to_radians());
    t.translation = Vec3::from(a.t);
    t
}

/// Models and assembly graph of a built-in asset, plus its default script.
#[derive(Debug, Clone)]
pub struct Asset {
    pub name: String,
    pub models: Vec<ObjectModel>,
    pub graph: AssemblyGraph,
    pub script: SequenceScript,
}

/// Options for [`default_script`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptOptions {
    pub n_frames: usize,
    pub condition: Condition,
    pub seed: u64,
    pub noiseless: bool,
    /// Occlude every part for [`FULL_OCCLUSION_FRAMES`] frames while the
    /// assembly is carried away, after the last assembly step.
    pub full_occlusion: bool,
}

impl Default for ScriptOptions {
    fn default() -> Self {
        Self {
            n_frames: 300,
            condition: Condition::Normal,
            seed: 0,
            noiseless: false,
            full_occlusion: false,
        }
    }
}

pub fn builtin_models(name: &str) -> Result<(Vec<ObjectModel>, AssemblyGraph), SceneError> {
    let def = asset_def(name).ok_or_else(|| SceneError::UnknownAsset(name.to_string()))?;
    let models = def
        .parts
        .iter()
        .map(|p| {
            let (v, f) = p.shape.mesh();
            ObjectModel::new(p.id, v, f, DEFAULT_KEYPOINT_COUNT, p.symmetric)
                .expect("primitive meshes are valid")
        })
        .collect();
    let objects = def
        .parts
        .iter()
        .map(|p| ObjectSpec {
            id: p.id.to_string(),
            mesh: None,
            symmetric: p.symmetric,
        })
        .collect();
    let n_states = def.attachments.len() + 1;
    let states = (0..n_states)
        .map(|s| AssemblyState {
            index: s,
            base_id: def.base.to_string(),
            links: def.attachments[..s]
                .iter()
                .map(|a| KinematicLink {
                    parent_id: a.parent.to_string(),
                    child_id: a.child.to_string(),
                    relative: link_transform(a),
                })
                .collect(),
            switch_pair: def.attachments.get(s).map(|a| SwitchPair {
                a_id: a.parent.to_string(),
                b_id: a.child.to_string(),
                expected: link_transform(a),
            }),
        })
        .collect();
    let graph = AssemblyGraph {
        objects,
        states,
        trans_threshold: DEFAULT_TRANS_THRESHOLD_M,
        rot_threshold: DEFAULT_ROT_THRESHOLD_DEG,
    };
    graph.validate().expect("built-in graphs are valid");
    Ok((models, graph))
}

pub fn builtin_asset(name: &str) -> Result<Asset, SceneError> {
    let (models, graph) = builtin_models(name)?;
    let script = default_script(name, &graph, &ScriptOptions::default())?;
    Ok(Asset {
        name: name.to_string(),
        models,
        graph,
        script,
    })
}

/// Camera tilt so parts lying on the table show two faces.
fn view_rotation() -> RigidTransform {
    RigidTransform::from_axis_angle(&Vec3::x(), (-35.0f64).to_radians())
}

fn at(t: Vec3, r: &RigidTransform) -> RigidTransform {
    RigidTransform::new(r.rotation, t)
}

/// Representative assembly script for a built-in asset.
///
/// Parts rest on a ring around the base. Step `i` happens at frame `i·L`
/// (`L = n_frames / parts`): the child glides to a staging pose 5 cm and 20°
/// away from its assembled pose (outside the switch thresholds), then snaps
/// in at the event frame. Shortly after each step the growing assembly is
/// moved; under the hand condition the new child is occluded meanwhile.
pub fn default_script(
    asset: &str,
    graph: &AssemblyGraph,
    opts: &ScriptOptions,
) -> Result<SequenceScript, SceneError> {
    let def = asset_def(asset).ok_or_else(|| SceneError::UnknownAsset(asset.to_string()))?;
    let k = def.parts.len();
    let steps = def.attachments.len();
    // a full occlusion gets a segment of its own after the last step
    let seg = opts.n_frames / (k + usize::from(opts.full_occlusion));
    if seg < 12 {
        return Err(script_err(format!(
            "{} frames are too few for {} parts (need at least {})",
            opts.n_frames,
            k,
            12 * (k + usize::from(opts.full_occlusion))
        )));
    }
    let approach = (seg * 2 / 5).clamp(4, 40);
    let move_len = (seg / 5).clamp(2, 10);
    let settle = 5.min(seg / 10).max(1);
    let view = view_rotation();

    // rest poses: base in the middle, the others on an ellipse around it
    let mut rest = BTreeMap::new();
    let others: Vec<&PartDef> = def.parts.iter().filter(|p| p.id != def.base).collect();
    let base_pose = at(Vec3::new(0.0, 0.02, 0.65), &view);
    rest.insert(def.base, base_pose);
    for (j, p) in others.iter().enumerate() {
        let a = std::f64::consts::TAU * j as f64 / others.len() as f64 + 0.3;
        let spin = RigidTransform::from_axis_angle(&Vec3::z(), a + 0.5 * j as f64);
        let pose = at(
            Vec3::new(0.26 * a.cos(), 0.14 * a.sin(), 0.68 + 0.04 * a.sin()),
            &view.compose(&spin),
        );
        rest.insert(p.id, pose);
    }

    let mut script = SequenceScript {
        asset: asset.to_string(),
        n_frames: opts.n_frames,
        condition: opts.condition,
        seed: opts.seed,
        noiseless: opts.noiseless,
        trajectories: def
            .parts
            .iter()
            .map(|p| {
                (
                    p.id.to_string(),
                    vec![Waypoint {
                        frame: 0,
                        pose: rest[p.id],
                    }],
                )
            })
            .collect(),
        assembly_events: Vec::new(),
        occlusion_windows: Vec::new(),
    };

    // the base (and everything attached to it) is carried around after each step
    let mut base_wps = vec![Waypoint {
        frame: 0,
        pose: base_pose,
    }];
    let mut carried = base_pose;
    for i in 1..=steps {
        let event = i * seg;
        let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
        let shift = RigidTransform::new(
            crate::geom::rotation_about(&Vec3::new(0.2, 1.0, 0.1), sign * 25f64.to_radians()),
            Vec3::new(sign * 0.12, -sign * 0.03, 0.02 * sign),
        );
        let start = event + settle;
        let moved = RigidTransform::new(
            shift.rotation * carried.rotation,
            carried.translation + shift.translation,
        );
        base_wps.push(Waypoint {
            frame: start,
            pose: carried,
        });
        base_wps.push(Waypoint {
            frame: (start + move_len).min(opts.n_frames - 1),
            pose: moved,
        });
        carried = moved;
    }
    let mut full_window = None;
    if opts.full_occlusion {
        let last_move_end = steps * seg + settle + move_len;
        let start = last_move_end + 5;
        let end = start + FULL_OCCLUSION_FRAMES - 1;
        if end + 10 >= opts.n_frames {
            return Err(script_err(format!(
                "{} frames leave no room for a full occlusion after the last step",
                opts.n_frames
            )));
        }
        let shift = RigidTransform::new(
            crate::geom::rotation_about(&Vec3::new(1.0, 0.3, 0.0), 40f64.to_radians()),
            Vec3::new(-0.15, 0.05, 0.03),
        );
        let moved = RigidTransform::new(
            shift.rotation * carried.rotation,
            carried.translation + shift.translation,
        );
        base_wps.push(Waypoint {
            frame: start + 2,
            pose: carried,
        });
        base_wps.push(Waypoint {
            frame: start + 8,
            pose: moved,
        });
        full_window = Some((start, end));
    }
    dedup_waypoints(&mut base_wps);
    script.trajectories.insert(def.base.to_string(), base_wps);

    for (i, a) in def.attachments.iter().enumerate() {
        let state_index = i + 1;
        let event = state_index * seg;
        let parent = poses_at(&script, graph, event)?[a.parent];
        let staging_offset = RigidTransform::new(
            crate::geom::rotation_about(&Vec3::new(1.0, 1.0, 0.0), 20f64.to_radians()),
            Vec3::new(0.0, 0.0, 0.05),
        );
        let staging = parent.compose(&link_transform(a)).compose(&staging_offset);
        let rest_pose = rest[a.child];
        let glide_start = event.saturating_sub(approach + 3).max(1);
        let mut wps = vec![Waypoint {
            frame: 0,
            pose: rest_pose,
        }];
        if glide_start > 0 {
            wps.push(Waypoint {
                frame: glide_start,
                pose: rest_pose,
            });
        }
        wps.push(Waypoint {
            frame: event - 3,
            pose: staging,
        });
        dedup_waypoints(&mut wps);
        script.trajectories.insert(a.child.to_string(), wps);
        script.assembly_events.push(AssemblyEvent {
            frame: event,
            state_index,
        });
        if opts.condition == Condition::Hand {
            let start = event + settle;
            script.occlusion_windows.push(OcclusionWindow {
                object_id: a.child.to_string(),
                start_frame: start,
                end_frame: (start + CHILD_OCCLUSION_FRAMES - 1).min(opts.n_frames - 1),
            });
        }
    }
    if let Some((start, end)) = full_window {
        for p in &def.parts {
            script.occlusion_windows.push(OcclusionWindow {
                object_id: p.id.to_string(),
                start_frame: start,
                end_frame: end,
            });
        }
    }
    script.validate(graph)?;
    Ok(script)
}

fn dedup_waypoints(wps: &mut Vec<Waypoint>) {
    wps.dedup_by(|b, a| b.frame <= a.frame);
}

// ---------------------------------------------------------------------------
// JSON-lines I/O

#[derive(Serialize, Deserialize)]
struct GtLine {
    frame: usize,
    poses: Vec<IdPose>,
}

#[derive(Serialize, Deserialize)]
struct IdPose {
    id: String,
    t: [f64; 3],
    q: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct ObsLine {
    frame: usize,
    observations: Vec<ObsRecord>,
}

#[derive(Serialize, Deserialize)]
struct ObsRecord {
    object_id: String,
    detected: bool,
    /// `[u, v, confidence]` per keypoint.
    keypoints: Vec<[f64; 3]>,
}

pub fn write_ground_truth(
    mut out: impl Write,
    frames: &[GroundTruthFrame],
) -> Result<(), SceneError> {
    for f in frames {
        let line = GtLine {
            frame: f.frame_index,
            poses: f
                .poses
                .iter()
                .map(|(id, p)| {
                    let r = PoseRecord::from(p);
                    IdPose {
                        id: id.clone(),
                        t: r.t,
                        q: r.q,
                    }
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn parse_lines<T: serde::de::DeserializeOwned>(
    input: impl BufRead,
    what: &'static str,
) -> Result<Vec<T>, SceneError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SceneError::Parse {
            what,
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_ground_truth(input: impl BufRead) -> Result<Vec<GroundTruthFrame>, SceneError> {
    let lines: Vec<GtLine> = parse_lines(input, "ground truth")?;
    lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let mut poses = BTreeMap::new();
            for p in l.poses {
                let pose = RigidTransform::from_quaternion(p.t, p.q, JSON_QUATERNION_TOLERANCE)
                    .map_err(|e| SceneError::Parse {
                        what: "ground truth",
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                poses.insert(p.id, pose);
            }
            Ok(GroundTruthFrame {
                frame_index: l.frame,
                poses,
            })
        })
        .collect()
}

pub fn write_observations(
    mut out: impl Write,
    frames: &[FrameObservations],
) -> Result<(), SceneError> {
    for f in frames {
        let line = ObsLine {
            frame: f.frame_index,
            observations: f
                .observations
                .iter()
                .map(|o| ObsRecord {
                    object_id: o.object_id.clone(),
                    detected: o.detected,
                    keypoints: o
                        .keypoints
                        .iter()
                        .map(|k| [k.pixel.x, k.pixel.y, k.confidence])
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_observations(input: impl BufRead) -> Result<Vec<FrameObservations>, SceneError> {
    let lines: Vec<ObsLine> = parse_lines(input, "observations")?;
    Ok(lines
        .into_iter()
        .map(|l| FrameObservations {
            frame_index: l.frame,
            observations: l
                .observations
                .into_iter()
                .map(|o| Observation {
                    object_id: o.object_id,
                    frame_index: l.frame,
                    detected: o.detected,
                    keypoints: o
                        .keypoints
                        .iter()
                        .map(|k| DetectedKeypoint {
                            pixel: Vec2::new(k[0], k[1]),
                            confidence: k[2],
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect())
}
