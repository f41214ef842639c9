//! Multi-state assembly graphs.
//!
//! Each assembly state carries a forest of kinematic links (fixed child-in-
//! parent transforms) and, except for the terminal state, a switch pair whose
//! relative pose decides when the assembly advances to the next state.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{compose, invert, rotation_error_deg, translation_error, RigidTransform};

pub const DEFAULT_TRANS_THRESHOLD_M: f64 = 0.03;
pub const DEFAULT_ROT_THRESHOLD_DEG: f64 = 10.0;
/// Allowed deviation of a config quaternion from unit norm.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid graph config at `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("malformed graph JSON: {0}")]
    Json(String),
}

fn schema(field: impl Into<String>, reason: impl Into<String>) -> GraphError {
    GraphError::Schema {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicLink {
    pub parent_id: String,
    pub child_id: String,
    /// Pose of the child expressed in the parent frame.
    pub relative: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchPair {
    pub a_id: String,
    pub b_id: String,
    /// Expected `inverse(pose_a) ∘ pose_b` once the step is assembled.
    pub expected: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyState {
    pub index: usize,
    pub base_id: String,
    pub links: Vec<KinematicLink>,
    pub switch_pair: Option<SwitchPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub id: String,
    pub mesh: Option<String>,
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyGraph {
    pub objects: Vec<ObjectSpec>,
    pub states: Vec<AssemblyState>,
    pub trans_threshold: f64,
    pub rot_threshold: f64,
}

/// A group of rigidly linked parts tracked through a single root pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub root: String,
    /// Root first, then breadth-first so every parent precedes its children.
    pub members: Vec<ModuleMember>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleMember {
    pub id: String,
    /// Parent id and the link transform, `None` for the root.
    pub parent: Option<(String, RigidTransform)>,
    /// Composition of link transforms along the path from the root.
    pub from_root: RigidTransform,
}

impl Module {
    pub fn singleton(id: &str) -> Self {
        Self {
            root: id.to_string(),
            members: vec![ModuleMember {
                id: id.to_string(),
                parent: None,
                from_root: RigidTransform::identity(),
            }],
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.members.iter().any(|m| m.id == id)
    }

    /// Poses of all members given the root pose, composed parent-to-child
    /// along the links so that `child = parent ∘ link` holds bit-exactly.
    pub fn member_poses(&self, root_pose: &RigidTransform) -> Vec<(String, RigidTransform)> {
        let mut out: Vec<(String, RigidTransform)> = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let pose = match &m.parent {
                None => *root_pose,
                Some((pid, link)) => {
                    let parent = out
                        .iter()
                        .find(|(id, _)| id == pid)
                        .map(|(_, p)| *p)
                        .expect("parents precede children in module order");
                    compose(&parent, link)
                }
            };
            out.push((m.id.clone(), pose));
        }
        out
    }
}

impl AssemblyGraph {
    pub fn object_ids(&self) -> impl Iterator<Item = &str> {
        self.objects.iter().map(|o| o.id.as_str())
    }

    pub fn terminal_state(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state(&self, index: usize) -> Option<&AssemblyState> {
        self.states.get(index)
    }

    /// Checks every structural invariant; used by [`load_graph`] and by
    /// code that builds graphs programmatically.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut known = HashSet::new();
        for (i, o) in self.objects.iter().enumerate() {
            if o.id.is_empty() {
                return Err(schema(format!("objects[{i}].id"), "empty id"));
            }
            if !known.insert(o.id.as_str()) {
                return Err(schema(
                    format!("objects[{i}].id"),
                    format!("duplicate id `{}`", o.id),
                ));
            }
        }
        if self.states.is_empty() {
            return Err(schema("states", "at least one state is required"));
        }
        if self.trans_threshold.is_nan() || self.trans_threshold <= 0.0 {
            return Err(schema("thresholds.trans_m", "must be positive"));
        }
        if self.rot_threshold.is_nan() || self.rot_threshold <= 0.0 {
            return Err(schema("thresholds.rot_deg", "must be positive"));
        }
        if !self.states[0].links.is_empty() {
            return Err(schema(
                "states[0].links",
                "the first state must not link any parts",
            ));
        }
        let last = self.states.len() - 1;
        for (si, st) in self.states.iter().enumerate() {
            if st.index != si {
                return Err(schema(
                    format!("states[{si}]"),
                    "state indices must be contiguous from 0",
                ));
            }
            if !known.contains(st.base_id.as_str()) {
                return Err(schema(
                    format!("states[{si}].base"),
                    format!("unknown object `{}`", st.base_id),
                ));
            }
            validate_forest(si, st, &known)?;
            match (&st.switch_pair, si == last) {
                (Some(_), true) => {
                    return Err(schema(
                        format!("states[{si}].switch"),
                        "missing terminal state: the last state must have a null switch",
                    ))
                }
                (None, false) => {
                    return Err(schema(
                        format!("states[{si}].switch"),
                        "non-terminal state needs a switch pair",
                    ))
                }
                (Some(sw), false) => {
                    for (name, id) in [("a", &sw.a_id), ("b", &sw.b_id)] {
                        if !known.contains(id.as_str()) {
                            return Err(schema(
                                format!("states[{si}].switch.{name}"),
                                format!("unknown object `{id}`"),
                            ));
                        }
                    }
                    if sw.a_id == sw.b_id {
                        return Err(schema(
                            format!("states[{si}].switch"),
                            "switch pair members must differ",
                        ));
                    }
                }
                (None, true) => {}
            }
        }
        Ok(())
    }

    /// Serializes to the JSON config format accepted by [`load_graph`].
    pub fn to_config_json(&self) -> String {
        let cfg = GraphConfig {
            objects: self
                .objects
                .iter()
                .map(|o| ObjectConfig {
                    id: o.id.clone(),
                    mesh: o.mesh.clone(),
                    symmetric: o.symmetric,
                })
                .collect(),
            thresholds: Some(ThresholdConfig {
                trans_m: self.trans_threshold,
                rot_deg: self.rot_threshold,
            }),
            states: self
                .states
                .iter()
                .map(|s| StateConfig {
                    base: s.base_id.clone(),
                    links: s
                        .links
                        .iter()
                        .map(|l| LinkConfig {
                            parent: l.parent_id.clone(),
                            child: l.child_id.clone(),
                            t: l.relative.translation_array(),
                            q: l.relative.quaternion(),
                        })
                        .collect(),
                    switch: s.switch_pair.as_ref().map(|sw| SwitchConfig {
                        a: sw.a_id.clone(),
                        b: sw.b_id.clone(),
                        t: sw.expected.translation_array(),
                        q: sw.expected.quaternion(),
                    }),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&cfg).expect("graph config serializes")
    }
}

fn validate_forest(si: usize, st: &AssemblyState, known: &HashSet<&str>) -> Result<(), GraphError> {
    let mut parent_of: HashMap<&str, &str> = HashMap::new();
    for (li, l) in st.links.iter().enumerate() {
        let field = |f: &str| format!("states[{si}].links[{li}].{f}");
        if !known.contains(l.parent_id.as_str()) {
            return Err(schema(
                field("parent"),
                format!("unknown object `{}`", l.parent_id),
            ));
        }
        if !known.contains(l.child_id.as_str()) {
            return Err(schema(
                field("child"),
                format!("unknown object `{}`", l.child_id),
            ));
        }
        if l.parent_id == l.child_id {
            return Err(schema(field("child"), "a part cannot be linked to itself"));
        }
        if l.child_id == st.base_id {
            return Err(schema(field("child"), "the base part cannot be a child"));
        }
        if parent_of.insert(&l.child_id, &l.parent_id).is_some() {
            return Err(schema(
                field("child"),
                format!("`{}` already has a parent", l.child_id),
            ));
        }
    }
    for (li, l) in st.links.iter().enumerate() {
        let mut seen = HashSet::new();
        let mut cur = l.child_id.as_str();
        while let Some(&p) = parent_of.get(cur) {
            if !seen.insert(cur) {
                return Err(schema(
                    format!("states[{si}].links[{li}]"),
                    "links form a cycle",
                ));
            }
            cur = p;
        }
    }
    Ok(())
}

/// Connected components of the link forest of `state_index`.
///
/// Modules are ordered by the position of their root in `graph.objects`;
/// parts without links form singleton modules. Returns an empty list for an
/// out-of-range state.
pub fn module_partition(graph: &AssemblyGraph, state_index: usize) -> Vec<Module> {
    let Some(state) = graph.state(state_index) else {
        return Vec::new();
    };
    let mut children: HashMap<&str, Vec<&KinematicLink>> = HashMap::new();
    let mut has_parent = HashSet::new();
    for l in &state.links {
        children.entry(l.parent_id.as_str()).or_default().push(l);
        has_parent.insert(l.child_id.as_str());
    }
    let mut modules = Vec::new();
    for obj in &graph.objects {
        if has_parent.contains(obj.id.as_str()) {
            continue;
        }
        let mut module = Module::singleton(&obj.id);
        let mut queue = VecDeque::from([(obj.id.as_str(), RigidTransform::identity())]);
        while let Some((id, from_root)) = queue.pop_front() {
            for l in children.get(id).into_iter().flatten() {
                let child_from_root = compose(&from_root, &l.relative);
                module.members.push(ModuleMember {
                    id: l.child_id.clone(),
                    parent: Some((id.to_string(), l.relative)),
                    from_root: child_from_root,
                });
                queue.push_back((l.child_id.as_str(), child_from_root));
            }
        }
        modules.push(module);
    }
    modules
}

/// Every part in its own module (tracking without links).
pub fn singleton_partition(graph: &AssemblyGraph) -> Vec<Module> {
    graph
        .objects
        .iter()
        .map(|o| Module::singleton(&o.id))
        .collect()
}

/// Translation (m) and rotation (deg) offsets of the switch pair's relative
/// pose from its expected value; `None` if a pose is missing or the state is
/// terminal.
pub fn transition_errors(
    graph: &AssemblyGraph,
    current_state_index: usize,
    poses: &BTreeMap<String, RigidTransform>,
) -> Option<(f64, f64)> {
    let sw = graph.state(current_state_index)?.switch_pair.as_ref()?;
    let pa = poses.get(&sw.a_id)?;
    let pb = poses.get(&sw.b_id)?;
    let relative = compose(&invert(pa), pb);
    Some((
        translation_error(&relative.translation, &sw.expected.translation),
        rotation_error_deg(&relative.rotation, &sw.expected.rotation),
    ))
}

/// Next state index if both offsets are strictly below their thresholds.
pub fn check_transition(
    graph: &AssemblyGraph,
    current_state_index: usize,
    poses: &BTreeMap<String, RigidTransform>,
) -> Option<usize> {
    let (e_trans, e_rot) = transition_errors(graph, current_state_index, poses)?;
    (e_trans < graph.trans_threshold && e_rot < graph.rot_threshold)
        .then_some(current_state_index + 1)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphConfig {
    objects: Vec<ObjectConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thresholds: Option<ThresholdConfig>,
    states: Vec<StateConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectConfig {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mesh: Option<String>,
    #[serde(default)]
    symmetric: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ThresholdConfig {
    trans_m: f64,
    rot_deg: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateConfig {
    base: String,
    #[serde(default)]
    links: Vec<LinkConfig>,
    switch: Option<SwitchConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LinkConfig {
    parent: String,
    child: String,
    t: [f64; 3],
    q: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct SwitchConfig {
    a: String,
    b: String,
    t: [f64; 3],
    q: [f64; 4],
}

fn pose_field(field: String, t: [f64; 3], q: [f64; 4]) -> Result<RigidTransform, GraphError> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(schema(format!("{field}.t"), "translation must be finite"));
    }
    RigidTransform::from_quaternion(t, q, QUATERNION_TOLERANCE)
        .map_err(|e| schema(format!("{field}.q"), e.to_string()))
}

/// Parses and validates a graph config (JSON).
pub fn load_graph(config_text: &str) -> Result<AssemblyGraph, GraphError> {
    let cfg: GraphConfig =
        serde_json::from_str(config_text).map_err(|e| GraphError::Json(e.to_string()))?;
    let (trans_threshold, rot_threshold) = cfg
        .thresholds
        .map(|t| (t.trans_m, t.rot_deg))
        .unwrap_or((DEFAULT_TRANS_THRESHOLD_M, DEFAULT_ROT_THRESHOLD_DEG));
    let mut states = Vec::with_capacity(cfg.states.len());
    for (si, st) in cfg.states.into_iter().enumerate() {
        let mut links = Vec::with_capacity(st.links.len());
        for (li, l) in st.links.into_iter().enumerate() {
            links.push(KinematicLink {
                relative: pose_field(format!("states[{si}].links[{li}]"), l.t, l.q)?,
                parent_id: l.parent,
                child_id: l.child,
            });
        }
        let switch_pair = match st.switch {
            Some(sw) => Some(SwitchPair {
                expected: pose_field(format!("states[{si}].switch"), sw.t, sw.q)?,
                a_id: sw.a,
                b_id: sw.b,
            }),
            None => None,
        };
        states.push(AssemblyState {
            index: si,
            base_id: st.base,
            links,
            switch_pair,
        });
    }
    let graph = AssemblyGraph {
        objects: cfg
            .objects
            .into_iter()
            .map(|o| ObjectSpec {
                id: o.id,
                mesh: o.mesh,
                symmetric: o.symmetric,
            })
            .collect(),
        states,
        trans_threshold,
        rot_threshold,
    };
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use proptest::prelude::*;

    const TWO_STATE: &str = r#"{
        "objects": [{"id": "a", "mesh": "a.obj", "symmetric": false}, {"id": "b", "mesh": "b.obj", "symmetric": true}],
        "thresholds": {"trans_m": 0.03, "rot_deg": 10},
        "states": [
            {"base": "a", "links": [], "switch": {"a": "a", "b": "b", "t": [0.1, 0, 0], "q": [1, 0, 0, 0]}},
            {"base": "a", "links": [{"parent": "a", "child": "b", "t": [0.1, 0, 0], "q": [1, 0, 0, 0]}], "switch": null}
        ]
    }"#;

    fn clamp_config() -> String {
        r#"{
        "objects": [{"id": "clamp_base"}, {"id": "clamp_bolt", "symmetric": true}, {"id": "clamp_jaw"}],
        "states": [
            {"base": "clamp_base", "links": [], "switch": {"a": "clamp_base", "b": "clamp_jaw", "t": [0.04, 0, 0.01], "q": [1, 0, 0, 0]}},
            {"base": "clamp_base", "links": [{"parent": "clamp_base", "child": "clamp_jaw", "t": [0.04, 0, 0.01], "q": [1, 0, 0, 0]}],
             "switch": {"a": "clamp_jaw", "b": "clamp_bolt", "t": [0, 0.02, 0], "q": [0.7071067811865476, 0.7071067811865476, 0, 0]}},
            {"base": "clamp_base", "links": [
                {"parent": "clamp_base", "child": "clamp_jaw", "t": [0.04, 0, 0.01], "q": [1, 0, 0, 0]},
                {"parent": "clamp_jaw", "child": "clamp_bolt", "t": [0, 0.02, 0], "q": [0.7071067811865476, 0.7071067811865476, 0, 0]}
            ], "switch": null}
        ]}"#
        .to_string()
    }

    fn field_of(err: GraphError) -> String {
        match err {
            GraphError::Schema { field, .. } => field,
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn loads_two_state_config() {
        let g = load_graph(TWO_STATE).unwrap();
        assert_eq!(g.states.len(), 2);
        assert!(g.states[0].links.is_empty());
        assert_eq!(g.states[1].links.len(), 1);
        assert_eq!(g.trans_threshold, 0.03);
        assert!(g.objects[1].symmetric);
    }

    #[test]
    fn thresholds_default_when_absent() {
        let g = load_graph(&clamp_config()).unwrap();
        assert_eq!(g.trans_threshold, DEFAULT_TRANS_THRESHOLD_M);
        assert_eq!(g.rot_threshold, DEFAULT_ROT_THRESHOLD_DEG);
    }

    #[test]
    fn self_link_is_rejected() {
        let bad = TWO_STATE.replace(
            r#""parent": "a", "child": "b""#,
            r#""parent": "b", "child": "b""#,
        );
        assert_eq!(
            field_of(load_graph(&bad).unwrap_err()),
            "states[1].links[0].child"
        );
    }

    #[test]
    fn unknown_id_is_rejected() {
        let bad = TWO_STATE.replace(r#""child": "b""#, r#""child": "zz""#);
        assert_eq!(
            field_of(load_graph(&bad).unwrap_err()),
            "states[1].links[0].child"
        );
    }

    #[test]
    fn missing_terminal_state_is_rejected() {
        let bad = TWO_STATE.replace(
            r#""switch": null"#,
            r#""switch": {"a": "a", "b": "b", "t": [0, 0, 0], "q": [1, 0, 0, 0]}"#,
        );
        assert_eq!(field_of(load_graph(&bad).unwrap_err()), "states[1].switch");
    }

    #[test]
    fn cycle_is_rejected() {
        let cfg = r#"{
            "objects": [{"id": "a"}, {"id": "b"}, {"id": "c"}],
            "states": [
                {"base": "a", "links": [], "switch": {"a": "a", "b": "b", "t": [0, 0, 0], "q": [1, 0, 0, 0]}},
                {"base": "a", "links": [
                    {"parent": "b", "child": "c", "t": [0, 0, 0], "q": [1, 0, 0, 0]},
                    {"parent": "c", "child": "b", "t": [0, 0, 0], "q": [1, 0, 0, 0]}
                ], "switch": null}
            ]}"#;
        let field = field_of(load_graph(cfg).unwrap_err());
        assert!(field.starts_with("states[1].links["), "{field}");
    }

    #[test]
    fn linked_first_state_is_rejected() {
        let bad = TWO_STATE.replacen(
            r#""links": []"#,
            r#""links": [{"parent": "a", "child": "b", "t": [0, 0, 0], "q": [1, 0, 0, 0]}]"#,
            1,
        );
        assert_eq!(field_of(load_graph(&bad).unwrap_err()), "states[0].links");
    }

    #[test]
    fn non_unit_quaternion_is_rejected() {
        let bad = TWO_STATE.replacen(r#""q": [1, 0, 0, 0]"#, r#""q": [1.001, 0, 0, 0]"#, 1);
        assert_eq!(
            field_of(load_graph(&bad).unwrap_err()),
            "states[0].switch.q"
        );
        let ok = TWO_STATE.replacen(r#""q": [1, 0, 0, 0]"#, r#""q": [1.0000001, 0, 0, 0]"#, 1);
        assert!(load_graph(&ok).is_ok());
    }

    #[test]
    fn clamp_fixture_forms_a_chain() {
        let g = load_graph(&clamp_config()).unwrap();
        assert_eq!(g.states.len(), 3);
        let m = module_partition(&g, 2);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].root, "clamp_base");
        let order: Vec<&str> = m[0].members.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(order, ["clamp_base", "clamp_jaw", "clamp_bolt"]);
        assert_eq!(m[0].members[2].parent.as_ref().unwrap().0, "clamp_jaw");
    }

    #[test]
    fn config_round_trip() {
        let g = load_graph(&clamp_config()).unwrap();
        let again = load_graph(&g.to_config_json()).unwrap();
        assert_eq!(again.states.len(), g.states.len());
        for (a, b) in g.states.iter().zip(&again.states) {
            for (la, lb) in a.links.iter().zip(&b.links) {
                assert!(la.relative.max_abs_diff(&lb.relative) < 1e-15);
            }
        }
    }

    #[test]
    fn state_zero_is_all_singletons() {
        let g = load_graph(&clamp_config()).unwrap();
        let m = module_partition(&g, 0);
        assert_eq!(m.len(), 3);
        assert!(m
            .iter()
            .all(|x| x.members.len() == 1 && x.members[0].from_root == RigidTransform::identity()));
    }

    #[test]
    fn chain_composes_along_path() {
        let g = load_graph(&clamp_config()).unwrap();
        let m = &module_partition(&g, 2)[0];
        let l1 = g.states[2].links[0].relative;
        let l2 = g.states[2].links[1].relative;
        assert_eq!(m.members[2].from_root, compose(&l1, &l2));
    }

    #[test]
    fn disjoint_pairs_form_two_modules() {
        let cfg = r#"{
            "objects": [{"id": "a"}, {"id": "b"}, {"id": "c"}, {"id": "d"}],
            "states": [
                {"base": "a", "links": [], "switch": {"a": "a", "b": "b", "t": [0, 0, 0], "q": [1, 0, 0, 0]}},
                {"base": "a", "links": [
                    {"parent": "a", "child": "b", "t": [0.1, 0, 0], "q": [1, 0, 0, 0]},
                    {"parent": "c", "child": "d", "t": [0, 0.1, 0], "q": [1, 0, 0, 0]}
                ], "switch": null}
            ]}"#;
        let g = load_graph(cfg).unwrap();
        let m = module_partition(&g, 1);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].root.as_str(), m[0].members.len()), ("a", 2));
        assert_eq!((m[1].root.as_str(), m[1].members.len()), ("c", 2));
    }

    fn poses_with_offset(
        g: &AssemblyGraph,
        dt: f64,
        drot_deg: f64,
    ) -> BTreeMap<String, RigidTransform> {
        let expected = g.states[0].switch_pair.as_ref().unwrap().expected;
        let a = RigidTransform::new(
            crate::geom::rotation_about(&Vec3::new(0.2, 1.0, 0.1), 0.4),
            Vec3::new(0.05, -0.02, 0.6),
        );
        let offset = RigidTransform::new(
            crate::geom::rotation_about(&Vec3::new(0.0, 0.0, 1.0), drot_deg.to_radians()),
            Vec3::new(dt, 0.0, 0.0),
        );
        let b = compose(&a, &compose(&expected, &offset));
        BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)])
    }

    #[test]
    fn transition_thresholds() {
        let g = load_graph(TWO_STATE).unwrap();
        assert_eq!(
            check_transition(&g, 0, &poses_with_offset(&g, 0.0, 0.0)),
            Some(1)
        );
        assert_eq!(
            check_transition(&g, 0, &poses_with_offset(&g, 0.02, 5.0)),
            Some(1)
        );
        assert_eq!(
            check_transition(&g, 0, &poses_with_offset(&g, 0.04, 5.0)),
            None
        );
        assert_eq!(
            check_transition(&g, 0, &poses_with_offset(&g, 0.02, 12.0)),
            None
        );
        // terminal state never switches
        assert_eq!(
            check_transition(&g, 1, &poses_with_offset(&g, 0.0, 0.0)),
            None
        );
    }

    #[test]
    fn missing_pose_means_no_transition() {
        let g = load_graph(TWO_STATE).unwrap();
        let mut poses = poses_with_offset(&g, 0.0, 0.0);
        poses.remove("b");
        assert_eq!(check_transition(&g, 0, &poses), None);
    }

    type Forest = (usize, Vec<Option<usize>>, Vec<(f64, f64, f64, f64)>);

    /// Random forests over `n` nodes: each node i > 0 either has no parent or
    /// a parent among nodes < i.
    fn random_forest() -> impl Strategy<Value = Forest> {
        (2usize..9).prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(prop::option::of(0usize..100), n - 1),
                prop::collection::vec(
                    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -3.0f64..3.0),
                    n - 1,
                ),
            )
        })
    }

    proptest! {
        #[test]
        fn member_transforms_match_path_composition((n, parents, params) in random_forest()) {
            let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
            let mut links = Vec::new();
            let mut parent_of: HashMap<usize, (usize, RigidTransform)> = HashMap::new();
            for (k, p) in parents.iter().enumerate() {
                let child = k + 1;
                if let Some(p) = p {
                    let parent = p % child;
                    let (x, y, z, a) = params[k];
                    let rel = RigidTransform::new(
                        crate::geom::rotation_about(&Vec3::new(x, y, z + 1.5), a),
                        Vec3::new(x, y, z),
                    );
                    parent_of.insert(child, (parent, rel));
                    links.push(KinematicLink { parent_id: ids[parent].clone(), child_id: ids[child].clone(), relative: rel });
                }
            }
            let g = AssemblyGraph {
                objects: ids.iter().map(|id| ObjectSpec { id: id.clone(), mesh: None, symmetric: false }).collect(),
                states: vec![
                    AssemblyState { index: 0, base_id: ids[0].clone(), links: vec![], switch_pair: Some(SwitchPair { a_id: ids[0].clone(), b_id: ids[1].clone(), expected: RigidTransform::identity() }) },
                    AssemblyState { index: 1, base_id: ids[0].clone(), links, switch_pair: None },
                ],
                trans_threshold: 0.03,
                rot_threshold: 10.0,
            };
            g.validate().unwrap();
            let modules = module_partition(&g, 1);
            let mut covered = 0;
            for m in &modules {
                let root_idx: usize = m.root[1..].parse().unwrap();
                prop_assert!(!parent_of.contains_key(&root_idx));
                for mem in &m.members {
                    covered += 1;
                    // oracle: climb to the root, then compose top-down
                    let mut chain = Vec::new();
                    let mut cur: usize = mem.id[1..].parse().unwrap();
                    while let Some((p, rel)) = parent_of.get(&cur) {
                        chain.push(*rel);
                        cur = *p;
                    }
                    prop_assert_eq!(cur, root_idx);
                    let expected = chain.iter().rev().fold(RigidTransform::identity(), |acc, r| compose(&acc, r));
                    prop_assert!(mem.from_root.max_abs_diff(&expected) < 1e-12);
                }
            }
            prop_assert_eq!(covered, n);
        }

        #[test]
        fn transition_invariant_to_camera_motion(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, ang in -3.0f64..3.0,
            tx in -1.0f64..1.0, ty in -1.0f64..1.0, tz in -1.0f64..1.0,
            dt in 0.0f64..0.06, dr in 0.0f64..20.0,
        ) {
            let g = load_graph(TWO_STATE).unwrap();
            let poses = poses_with_offset(&g, dt, dr);
            let cam = RigidTransform::new(crate::geom::rotation_about(&Vec3::new(ax, ay, 1.0), ang), Vec3::new(tx, ty, tz));
            let moved: BTreeMap<String, RigidTransform> = poses.iter().map(|(k, p)| (k.clone(), compose(&cam, p))).collect();
            // keep clear of the boundary where rounding could flip the decision
            prop_assume!((dt - 0.03).abs() > 1e-9 && (dr - 10.0).abs() > 1e-6);
            prop_assert_eq!(check_transition(&g, 0, &poses), check_transition(&g, 0, &moved));
        }
    }
}
