//! The simulated keypoint detector under each recording condition.

use gbot::detector::{profile_for, simulate_observation, Condition};
use gbot::keypoints::CameraIntrinsics;
use gbot::scene::{builtin_asset, generate_ground_truth};

fn main() {
    let asset = builtin_asset("geared_caliper").unwrap();
    let gt = generate_ground_truth(&asset.script, &asset.graph).unwrap();
    let intr = CameraIntrinsics::default();
    let model = &asset.models[0];
    for condition in Condition::ALL {
        let profile = profile_for(condition).with_seed(3);
        let (mut detected, mut usable, mut outliers) = (0, 0, 0);
        for frame in &gt {
            let obs = simulate_observation(
                model,
                &frame.poses[&model.id],
                &intr,
                &profile,
                frame.frame_index,
            );
            if obs.detected {
                detected += 1;
                usable += obs.usable_count();
                outliers += obs.keypoints.iter().filter(|k| k.confidence == 0.1).count();
            }
        }
        println!(
            "{condition:>7}: sigma {:.1} px, detected {:3}/{} frames, {:.1} usable keypoints, {:.1}% outliers",
            profile.pixel_sigma,
            detected,
            gt.len(),
            usable as f64 / detected.max(1) as f64,
            100.0 * outliers as f64 / usable.max(1) as f64
        );
    }
}
