//! Tracking a simulated assembly sequence frame by frame.

use gbot::bench::Method;
use gbot::keypoints::CameraIntrinsics;
use gbot::metrics::add_error;
use gbot::scene::{builtin_asset, generate_ground_truth, generate_observations};
use gbot::tracker::{TrackEvent, Tracker};

fn main() {
    let asset = builtin_asset("hobby_corner_clamp").unwrap();
    let intr = CameraIntrinsics::default();
    let gt = generate_ground_truth(&asset.script, &asset.graph).unwrap();
    let frames = generate_observations(&gt, &asset.models, &intr, &asset.script);

    let mut tracker = Tracker::new(
        asset.graph.clone(),
        asset.models.clone(),
        intr,
        Method::Gbot.tracker_config(),
    )
    .unwrap();
    for (obs, truth) in frames.iter().zip(&gt) {
        let report = tracker.process(obs);
        for event in &report.events {
            if !matches!(event, TrackEvent::Lost { .. }) {
                println!("frame {:3}: {event:?}", report.frame_index);
            }
        }
        if report.frame_index.is_multiple_of(50) {
            let errs: Vec<String> = asset
                .models
                .iter()
                .filter_map(|m| {
                    let e = add_error(report.poses.get(&m.id)?, &truth.poses[&m.id], &m.vertices);
                    Some(format!("{} {:.1} mm", m.id, e * 1e3))
                })
                .collect();
            println!(
                "frame {:3}: state {} | {}",
                report.frame_index,
                report.state_index,
                errs.join(", ")
            );
        }
    }
}
