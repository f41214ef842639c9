//! Live pose publishing over HTTP.
//!
//! The tracker thread publishes immutable snapshots into a [`PoseHub`];
//! request handlers only ever load the current snapshot, whose JSON bodies
//! were serialized once at publish time. Publishing is an atomic pointer swap,
//! so readers never see a half-written snapshot and never block the writer.

use std::collections::{BTreeSet, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use arc_swap::ArcSwapOption;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde::{Deserialize, Serialize};

use crate::geom::PoseRecord;
use crate::tracker::{TrackEvent, TrackReport};

/// Number of recent events served by `/state`.
pub const EVENTS_TAIL_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPose {
    pub object_id: String,
    pub t: [f64; 3],
    /// Unit quaternion, `[w, x, y, z]`.
    pub q: [f64; 4],
    /// False when the object's module had no usable detection this frame and
    /// its pose was carried forward.
    pub tracked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSnapshot {
    pub sequence_number: u64,
    /// Milliseconds since the Unix epoch at publish time.
    pub timestamp: u64,
    pub state_index: usize,
    pub poses: Vec<SnapshotPose>,
}

impl PoseSnapshot {
    pub fn from_report(report: &TrackReport, sequence_number: u64, timestamp: u64) -> Self {
        let lost_roots: BTreeSet<&str> = report
            .events
            .iter()
            .filter_map(|e| match e {
                TrackEvent::Lost { module_root } => Some(module_root.as_str()),
                _ => None,
            })
            .collect();
        let poses = report
            .poses
            .iter()
            .map(|(id, pose)| {
                let root = report
                    .module_roots
                    .get(id)
                    .map_or(id.as_str(), String::as_str);
                let rec = PoseRecord::from(pose);
                SnapshotPose {
                    object_id: id.clone(),
                    t: rec.t,
                    q: rec.q,
                    tracked: !lost_roots.contains(root),
                }
            })
            .collect();
        PoseSnapshot {
            sequence_number,
            timestamp,
            state_index: report.state_index,
            poses,
        }
    }
}

/// A tracker event stamped with the frame it happened on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEvent {
    pub frame: usize,
    #[serde(flatten)]
    pub event: TrackEvent,
}

/// Body of `GET /state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub state_index: usize,
    pub events_tail: Vec<FrameEvent>,
}

struct Published {
    poses_body: Bytes,
    state_body: Bytes,
}

#[derive(Default)]
struct WriterState {
    sequence_number: u64,
    tail: VecDeque<FrameEvent>,
}

/// Latest published snapshot, shared between the tracker and HTTP handlers.
#[derive(Default)]
pub struct PoseHub {
    current: ArcSwapOption<Published>,
    writer: Mutex<WriterState>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl PoseHub {
    pub fn new() -> Self {
        Self::default()
    }

    /// Publishes `report` and returns its sequence number (starting at 1).
    pub fn publish(&self, report: &TrackReport) -> u64 {
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        w.sequence_number += 1;
        for e in &report.events {
            if w.tail.len() == EVENTS_TAIL_LEN {
                w.tail.pop_front();
            }
            w.tail.push_back(FrameEvent {
                frame: report.frame_index,
                event: e.clone(),
            });
        }
        let snapshot = PoseSnapshot::from_report(report, w.sequence_number, now_ms());
        let state = StateSummary {
            state_index: report.state_index,
            events_tail: w.tail.iter().cloned().collect(),
        };
        let published = Published {
            poses_body: serde_json::to_vec(&snapshot)
                .expect("snapshot serializes")
                .into(),
            state_body: serde_json::to_vec(&state).expect("state serializes").into(),
        };
        self.current.store(Some(Arc::new(published)));
        w.sequence_number
    }

    /// Serialized latest snapshot, if anything was published.
    pub fn poses_json(&self) -> Option<Bytes> {
        self.current.load().as_ref().map(|p| p.poses_body.clone())
    }

    pub fn state_json(&self) -> Option<Bytes> {
        self.current.load().as_ref().map(|p| p.state_body.clone())
    }
}

const EMPTY_BODY: &str = r#"{"error":"no poses published yet","poses":[]}"#;

fn json(status: StatusCode, body: Bytes) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn respond(body: Option<Bytes>) -> Response {
    match body {
        Some(b) => json(StatusCode::OK, b),
        None => json(
            StatusCode::SERVICE_UNAVAILABLE,
            Bytes::from_static(EMPTY_BODY.as_bytes()),
        ),
    }
}

/// Routes `GET|HEAD /poses` and `GET|HEAD /state`; everything else is 404.
pub fn router(hub: Arc<PoseHub>) -> Router {
    Router::new()
        .route(
            "/poses",
            get(|State(h): State<Arc<PoseHub>>| async move { respond(h.poses_json()) }),
        )
        .route(
            "/state",
            get(|State(h): State<Arc<PoseHub>>| async move { respond(h.state_json()) }),
        )
        .with_state(hub)
}

/// Serving must not slow tracking down, so on Linux the server thread runs at
/// the lowest nice level: it still makes progress when the CPU is saturated,
/// but the tracker wins whenever both are runnable.
#[cfg(target_os = "linux")]
fn lower_thread_priority() {
    // SAFETY: plain syscalls on the calling thread.
    let rc = unsafe {
        let tid = libc::syscall(libc::SYS_gettid) as libc::id_t;
        libc::setpriority(libc::PRIO_PROCESS, tid, 19)
    };
    if rc != 0 {
        log::warn!(
            "could not lower API thread priority: {}",
            std::io::Error::last_os_error()
        );
    }
}

#[cfg(not(target_os = "linux"))]
fn lower_thread_priority() {}

/// HTTP server running on its own thread.
pub struct PoseServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl PoseServer {
    /// Binds `addr` (port 0 picks a free port) and starts serving `hub`.
    pub fn start(addr: SocketAddr, hub: Arc<PoseHub>) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("gbot-api".into())
            .spawn(move || {
                lower_thread_priority();
                let rt = tokio::runtime::Builder::new_current_thread()
                    .enable_io()
                    .build()?;
                rt.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener)?;
                    axum::serve(listener, router(hub))
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await
                })
            })?;
        log::info!("serving poses on http://{addr}");
        Ok(PoseServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the server thread.
    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for PoseServer {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::RigidTransform;
    use std::collections::BTreeMap;

    fn report(frame: usize, events: Vec<TrackEvent>) -> TrackReport {
        let mut poses = BTreeMap::new();
        poses.insert("a".to_string(), RigidTransform::identity());
        poses.insert("b".to_string(), RigidTransform::identity());
        let module_roots = [("a", "a"), ("b", "a")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        TrackReport {
            frame_index: frame,
            state_index: 1,
            poses,
            module_roots,
            runtime_ms: 1.0,
            events,
        }
    }

    #[test]
    fn nothing_published_yet() {
        let hub = PoseHub::new();
        assert!(hub.poses_json().is_none());
        assert!(hub.state_json().is_none());
    }

    #[test]
    fn sequence_numbers_increase_and_lost_modules_are_flagged() {
        let hub = PoseHub::new();
        assert_eq!(hub.publish(&report(0, vec![])), 1);
        let lost = vec![TrackEvent::Lost {
            module_root: "a".into(),
        }];
        assert_eq!(hub.publish(&report(1, lost)), 2);
        let snap: PoseSnapshot = serde_json::from_slice(&hub.poses_json().unwrap()).unwrap();
        assert_eq!(snap.sequence_number, 2);
        assert!(snap.poses.iter().all(|p| !p.tracked));
        assert_eq!(snap.poses[0].q, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn events_tail_is_bounded() {
        let hub = PoseHub::new();
        for f in 0..40 {
            hub.publish(&report(f, vec![TrackEvent::Transition { from: 0, to: 1 }]));
        }
        let state: StateSummary = serde_json::from_slice(&hub.state_json().unwrap()).unwrap();
        assert_eq!(state.events_tail.len(), EVENTS_TAIL_LEN);
        assert_eq!(state.events_tail.last().unwrap().frame, 39);
        assert_eq!(state.events_tail[0].frame, 40 - EVENTS_TAIL_LEN);
    }
}
