//! ADD, ADD-S and the thresholded score.

use gbot::geom::{RigidTransform, Vec3};
use gbot::metrics::{add_error, adds_error, score, DEFAULT_SCORE_THRESHOLD_M};
use gbot::scene::cylinder_mesh;

fn main() {
    let (vertices, _) = cylinder_mesh(0.02, 0.05, 12, 4);
    let gt = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 0.7));
    // spinning a cylinder about its own axis changes nothing visible
    let spun = gt.compose(&RigidTransform::from_axis_angle(
        &Vec3::z(),
        std::f64::consts::PI / 6.0,
    ));
    println!(
        "spun by 30 deg: ADD {:.1} mm, ADD-S {:.1} mm",
        add_error(&spun, &gt, &vertices) * 1e3,
        adds_error(&spun, &gt, &vertices) * 1e3
    );
    let shifted = RigidTransform::from_translation(Vec3::new(0.02, 0.0, 0.7));
    println!(
        "shifted by 2 cm: ADD {:.1} mm",
        add_error(&shifted, &gt, &vertices) * 1e3
    );

    // each frame earns 1 - e / 10 cm, floored at zero
    let errors = [0.0, 0.02, 0.05, 0.10, 0.25];
    println!(
        "score of {errors:?} m: {:.3}",
        score(&errors, DEFAULT_SCORE_THRESHOLD_M).unwrap()
    );
}
