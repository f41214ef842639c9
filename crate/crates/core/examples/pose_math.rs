//! Rigid transforms: composition, inversion, twists and quaternion records.

use gbot::geom::{
    exp_twist, log_transform, retract_left, rotation_error_deg, PoseRecord, RigidTransform, Twist,
    Vec3,
};

fn main() {
    // a part 60 cm in front of the camera, turned 30 degrees about its vertical axis
    let part = RigidTransform::new(
        gbot::geom::rotation_about(&Vec3::y(), 30f64.to_radians()),
        Vec3::new(0.0, 0.0, 0.6),
    );
    // a child mounted 5 cm along the part's x axis
    let mount = RigidTransform::from_translation(Vec3::new(0.05, 0.0, 0.0));
    let child = part.compose(&mount);
    println!("child in camera frame: {:?}", child.translation_array());

    // relative pose recovers the mount exactly
    let relative = part.inverse().compose(&child);
    println!(
        "recovered mount offset: {:.2e}",
        relative.max_abs_diff(&mount)
    );

    // twists live in the tangent space: [angular; linear]
    let delta = Twist::new(Vec3::new(0.0, 0.0, 0.1), Vec3::new(0.01, 0.0, 0.0));
    let nudged = retract_left(&part, &delta);
    println!(
        "nudge rotates by {:.3} deg",
        rotation_error_deg(&nudged.rotation, &part.rotation)
    );
    let round_trip = log_transform(&exp_twist(&delta)).expect("small twist");
    println!(
        "exp/log round trip error: {:.2e}",
        (round_trip.to_vector() - delta.to_vector()).norm()
    );

    // the serialized form used by every file and the HTTP API: t plus [w, x, y, z]
    let record = PoseRecord::from(&child);
    println!("{}", serde_json::to_string(&record).unwrap());
    let back = record.to_transform(1e-9).unwrap();
    println!("record round trip error: {:.2e}", back.max_abs_diff(&child));
}
