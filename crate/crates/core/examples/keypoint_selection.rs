//! Farthest point sampling of keypoints on a mesh and their projection.

use gbot::geom::{RigidTransform, Vec3};
use gbot::keypoints::{project, CameraIntrinsics, ObjectModel, DEFAULT_KEYPOINT_COUNT};
use gbot::scene::box_mesh;

fn main() {
    let (vertices, faces) = box_mesh(Vec3::new(0.06, 0.04, 0.02), 4);
    let model = ObjectModel::new("block", vertices, faces, DEFAULT_KEYPOINT_COUNT, false).unwrap();
    println!(
        "{} vertices, keypoints at indices {:?}",
        model.vertices.len(),
        model.keypoint_indices
    );

    let kps = model.keypoints();
    let min_gap = kps
        .iter()
        .enumerate()
        .flat_map(|(i, a)| kps[i + 1..].iter().map(move |b| (a - b).norm()))
        .fold(f64::INFINITY, f64::min);
    println!("smallest keypoint spacing: {:.1} mm", min_gap * 1e3);

    let intr = CameraIntrinsics::default();
    let pose = RigidTransform::new(
        gbot::geom::rotation_about(&Vec3::new(1.0, 1.0, 0.0), 0.6),
        Vec3::new(0.05, -0.02, 0.5),
    );
    for (i, p) in project(&intr, &pose, &kps).iter().enumerate().take(5) {
        println!(
            "keypoint {i}: ({:7.1}, {:7.1}) px visible={}",
            p.pixel.x, p.pixel.y, p.visible
        );
    }
}
