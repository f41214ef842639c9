//! Assembly graphs: states, kinematic modules and the switching rule.

use std::collections::BTreeMap;

use gbot::assembly::{check_transition, module_partition, transition_errors};
use gbot::geom::{RigidTransform, Vec3};
use gbot::scene::builtin_asset;

fn main() {
    let asset = builtin_asset("hand_screw_clamp").unwrap();
    let graph = &asset.graph;
    for state in &graph.states {
        let modules = module_partition(graph, state.index);
        let sizes: Vec<String> = modules
            .iter()
            .map(|m| format!("{}({})", m.root, m.members.len()))
            .collect();
        let next = state.switch_pair.as_ref().map_or("final".to_string(), |s| {
            format!("{} joins {}", s.b_id, s.a_id)
        });
        println!(
            "state {}: {} modules [{}], next: {next}",
            state.index,
            modules.len(),
            sizes.join(", ")
        );
    }

    // the first step fires once the moving part is within 3 cm and 10 degrees of its seat
    let sw = graph.states[0].switch_pair.clone().unwrap();
    let base = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 0.6));
    for (dt, deg) in [(0.02, 5.0), (0.04, 5.0), (0.02, 12.0)] {
        let offset = RigidTransform::new(
            gbot::geom::rotation_about(&Vec3::z(), f64::to_radians(deg)),
            Vec3::new(dt, 0.0, 0.0),
        );
        let mut poses = BTreeMap::new();
        poses.insert(sw.a_id.clone(), base);
        poses.insert(sw.b_id.clone(), base.compose(&sw.expected).compose(&offset));
        let (e_t, e_r) = transition_errors(graph, 0, &poses).unwrap();
        println!(
            "offset {:.0} cm / {deg:.0} deg -> measured {:.1} cm / {e_r:.1} deg, transition: {:?}",
            dt * 100.0,
            e_t * 100.0,
            check_transition(graph, 0, &poses)
        );
    }
}
