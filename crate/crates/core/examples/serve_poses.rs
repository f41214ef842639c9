//! Publishing live poses over HTTP and polling them like a headset would.

use std::io::Read;
use std::net::TcpStream;
use std::sync::Arc;

use gbot::api::{PoseHub, PoseServer, PoseSnapshot};
use gbot::keypoints::CameraIntrinsics;
use gbot::scene::{builtin_asset, generate_ground_truth, generate_observations};
use gbot::tracker::{Tracker, TrackerConfig};

fn get(addr: std::net::SocketAddr, path: &str) -> String {
    use std::io::Write;
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

fn body(response: &str) -> &str {
    response.split("\r\n\r\n").nth(1).unwrap_or("")
}

fn main() {
    let hub = Arc::new(PoseHub::new());
    let server = PoseServer::start("127.0.0.1:0".parse().unwrap(), hub.clone()).unwrap();
    let addr = server.local_addr();
    println!(
        "before tracking: {}",
        get(addr, "/poses").lines().next().unwrap()
    );

    let asset = builtin_asset("nano_chuck").unwrap();
    let intr = CameraIntrinsics::default();
    let gt = generate_ground_truth(&asset.script, &asset.graph).unwrap();
    let frames = generate_observations(&gt, &asset.models, &intr, &asset.script);
    let mut tracker =
        Tracker::new(asset.graph, asset.models, intr, TrackerConfig::default()).unwrap();
    for frame in &frames {
        hub.publish(&tracker.process(frame));
    }

    let snapshot: PoseSnapshot = serde_json::from_str(body(&get(addr, "/poses"))).unwrap();
    println!(
        "snapshot {} in state {}: {} poses",
        snapshot.sequence_number,
        snapshot.state_index,
        snapshot.poses.len()
    );
    for p in snapshot.poses.iter().take(3) {
        println!("  {:<12} t={:?} tracked={}", p.object_id, p.t, p.tracked);
    }
    println!("/state: {}", body(&get(addr, "/state")));
    server.shutdown().unwrap();
}
