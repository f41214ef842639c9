//! Recovering a pose from keypoints, with and without outliers.

use gbot::geom::{rotation_error_deg, RigidTransform, Vec3};
use gbot::keypoints::{project, CameraIntrinsics, ObjectModel, Vec2};
use gbot::pnp::{ransac_pnp, solve_pnp, Correspondence, RansacParams};
use gbot::scene::box_mesh;

fn main() {
    let (vertices, faces) = box_mesh(Vec3::new(0.15, 0.1, 0.075), 4);
    let model = ObjectModel::new("housing", vertices, faces, 17, false).unwrap();
    let intr = CameraIntrinsics::default();
    let truth = RigidTransform::new(
        gbot::geom::rotation_about(&Vec3::new(0.3, 1.0, 0.2), 0.7),
        Vec3::new(0.04, 0.02, 0.8),
    );
    let kps = model.keypoints();
    let mut corrs: Vec<Correspondence> = project(&intr, &truth, &kps)
        .iter()
        .zip(&kps)
        .map(|(p, x)| Correspondence::new(*x, p.pixel, 1.0))
        .collect();

    let exact = solve_pnp(&corrs, &intr, None).unwrap();
    println!(
        "noiseless: {:.2e} m, {:.2e} deg",
        (exact.pose.translation - truth.translation).norm(),
        rotation_error_deg(&exact.pose.rotation, &truth.rotation)
    );

    // five keypoints replaced by garbage detections
    for (k, c) in corrs.iter_mut().enumerate().take(5) {
        c.point_img = Vec2::new(97.0 * k as f64 + 40.0, 600.0 - 55.0 * k as f64);
    }
    let naive = solve_pnp(&corrs, &intr, None).unwrap();
    let robust = ransac_pnp(&corrs, &intr, &RansacParams::default()).unwrap();
    for (name, pose) in [("least squares", naive.pose), ("ransac", robust.pose)] {
        println!(
            "{name:>13}: {:.2} mm, {:.3} deg",
            (pose.translation - truth.translation).norm() * 1e3,
            rotation_error_deg(&pose.rotation, &truth.rotation)
        );
    }
    println!(
        "ransac kept {} of {} keypoints",
        robust.inliers.len(),
        corrs.len()
    );
}
