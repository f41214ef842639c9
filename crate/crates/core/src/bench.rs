//! Benchmark harness: tracker variants, evaluation against ground truth,
//! track files and report tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::PoseHub;
use crate::detector::Condition;
use crate::geom::{PoseRecord, RigidTransform};
use crate::keypoints::{CameraIntrinsics, ObjectModel};
use crate::metrics::{
    frame_errors, summarize, FrameErrors, MetricsError, DEFAULT_SCORE_THRESHOLD_M,
};
use crate::scene::{
    builtin_models, default_script, generate_ground_truth, generate_observations,
    read_ground_truth, read_observations, write_ground_truth, write_observations, GroundTruthFrame,
    SceneError, ScriptOptions, SequenceScript,
};
use crate::tracker::{run_sequence, TrackError, TrackEvent, TrackReport, Tracker, TrackerConfig};

pub const SCRIPT_FILE: &str = "script.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";
pub const OBSERVATIONS_FILE: &str = "observations.jsonl";
pub const TRACK_FILE: &str = "track.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown method `{0}` (expected independent, gbot or gbot-reinit)")]
    UnknownMethod(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {what}: {reason}")]
    Parse { what: String, reason: String },
    #[error("no runs to report")]
    EmptyReport,
    #[error("conflicting results for {0}")]
    Conflict(String),
    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),
}

impl BenchError {
    /// Whether the error stems from bad user input rather than a failed run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            BenchError::UnknownMethod(_)
                | BenchError::Scene(SceneError::UnknownAsset(_))
                | BenchError::EmptyReport
                | BenchError::Conflict(_)
                | BenchError::MissingInput(_)
        )
    }
}

/// Tracker variants of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Every part tracked on its own, links ignored.
    #[serde(rename = "independent")]
    Independent,
    /// Graph-constrained tracking.
    #[serde(rename = "gbot")]
    Gbot,
    /// Graph-constrained tracking with periodic re-initialization.
    #[serde(rename = "gbot-reinit")]
    GbotReinit,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Independent, Method::Gbot, Method::GbotReinit];

    pub fn name(self) -> &'static str {
        match self {
            Method::Independent => "independent",
            Method::Gbot => "gbot",
            Method::GbotReinit => "gbot-reinit",
        }
    }

    pub fn tracker_config(self) -> TrackerConfig {
        TrackerConfig {
            use_links: self != Method::Independent,
            reinit_enabled: self == Method::GbotReinit,
            ..TrackerConfig::default()
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BenchError::UnknownMethod(s.to_string()))
    }
}

/// Per-frame errors of a tracked sequence against ground truth.
pub fn evaluate(
    reports: &[TrackReport],
    gt: &[GroundTruthFrame],
    models: &[ObjectModel],
) -> Vec<FrameErrors> {
    let by_frame: BTreeMap<usize, &GroundTruthFrame> =
        gt.iter().map(|g| (g.frame_index, g)).collect();
    reports
        .iter()
        .filter_map(|r| {
            let g = by_frame.get(&r.frame_index)?;
            Some(frame_errors(r.frame_index, models, &r.poses, &g.poses))
        })
        .collect()
}

/// Summary of one tracked run, as written by `track` and read by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub asset: String,
    pub condition: Condition,
    pub method: Method,
    pub seed: u64,
    pub frames: usize,
    /// ADD(S) score ×100 with the 10 cm threshold.
    pub adds: f64,
    pub e_trans_cm: Option<f64>,
    pub e_rot_deg: Option<f64>,
    /// Mean tracker time per frame; absent when timing was not recorded.
    pub ms_per_frame: Option<f64>,
    pub transitions: usize,
    pub reinits: usize,
    pub final_state: usize,
}

pub struct RunInfo<'a> {
    pub asset: &'a str,
    pub condition: Condition,
    pub method: Method,
    pub seed: u64,
    pub record_timing: bool,
}

pub fn run_record(
    info: &RunInfo<'_>,
    reports: &[TrackReport],
    errors: &[FrameErrors],
) -> Result<RunRecord, BenchError> {
    let summary = summarize(errors, DEFAULT_SCORE_THRESHOLD_M)?;
    let count = |pred: fn(&TrackEvent) -> bool| {
        reports
            .iter()
            .flat_map(|r| &r.events)
            .filter(|e| pred(e))
            .count()
    };
    let ms = reports.iter().map(|r| r.runtime_ms).sum::<f64>() / reports.len().max(1) as f64;
    Ok(RunRecord {
        asset: info.asset.to_string(),
        condition: info.condition,
        method: info.method,
        seed: info.seed,
        frames: reports.len(),
        adds: summary.adds_score * 100.0,
        e_trans_cm: summary.e_trans_m.map(|t| t * 100.0),
        e_rot_deg: summary.e_rot_deg,
        ms_per_frame: info.record_timing.then_some(ms),
        transitions: count(|e| matches!(e, TrackEvent::Transition { .. })),
        reinits: count(|e| matches!(e, TrackEvent::Reinit { .. })),
        final_state: reports.last().map_or(0, |r| r.state_index),
    })
}

/// Everything produced by an in-memory benchmark run.
pub struct BenchRun {
    pub gt: Vec<GroundTruthFrame>,
    pub reports: Vec<TrackReport>,
    pub errors: Vec<FrameErrors>,
    pub record: RunRecord,
}

/// Generates a sequence for a built-in asset, tracks it and scores it.
pub fn run_builtin(
    asset: &str,
    opts: &ScriptOptions,
    method: Method,
) -> Result<BenchRun, BenchError> {
    let (models, graph) = builtin_models(asset)?;
    let intr = CameraIntrinsics::default();
    let script = default_script(asset, &graph, opts)?;
    let gt = generate_ground_truth(&script, &graph)?;
    let obs = generate_observations(&gt, &models, &intr, &script);
    let reports = run_sequence(&obs, &graph, &models, &intr, &method.tracker_config())?;
    let errors = evaluate(&reports, &gt, &models);
    let info = RunInfo {
        asset,
        condition: opts.condition,
        method,
        seed: opts.seed,
        record_timing: true,
    };
    let record = run_record(&info, &reports, &errors)?;
    Ok(BenchRun {
        gt,
        reports,
        errors,
        record,
    })
}

// ---------------------------------------------------------------------------
// Track files

#[derive(Serialize, Deserialize)]
struct TrackLine {
    frame: usize,
    state: usize,
    poses: Vec<TrackedPose>,
    module_roots: BTreeMap<String, String>,
    runtime_ms: Option<f64>,
    events: Vec<TrackEvent>,
}

#[derive(Serialize, Deserialize)]
struct TrackedPose {
    id: String,
    t: [f64; 3],
    q: [f64; 4],
}

/// One JSON line per report. Without `timing` the runtime is written as
/// `null` so that the file is reproducible byte for byte.
pub fn write_track(
    mut out: impl Write,
    reports: &[TrackReport],
    timing: bool,
) -> Result<(), BenchError> {
    for r in reports {
        let line = TrackLine {
            frame: r.frame_index,
            state: r.state_index,
            poses: r
                .poses
                .iter()
                .map(|(id, p)| {
                    let rec = PoseRecord::from(p);
                    TrackedPose {
                        id: id.clone(),
                        t: rec.t,
                        q: rec.q,
                    }
                })
                .collect(),
            module_roots: r.module_roots.clone(),
            runtime_ms: timing.then_some(r.runtime_ms),
            events: r.events.clone(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_track(input: impl BufRead) -> Result<Vec<TrackReport>, BenchError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |reason: String| BenchError::Parse {
            what: format!("track line {}", i + 1),
            reason,
        };
        let l: TrackLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let mut poses = BTreeMap::new();
        for p in l.poses {
            let pose: RigidTransform = PoseRecord { t: p.t, q: p.q }
                .to_transform(1e-9)
                .map_err(|e| parse(e.to_string()))?;
            poses.insert(p.id, pose);
        }
        out.push(TrackReport {
            frame_index: l.frame,
            state_index: l.state,
            poses,
            module_roots: l.module_roots,
            runtime_ms: l.runtime_ms.unwrap_or(0.0),
            events: l.events,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report tables

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub asset: String,
    pub condition: String,
    pub method: Method,
    pub adds: f64,
    pub e_trans_cm: Option<f64>,
    pub e_rot_deg: Option<f64>,
    pub ms_per_frame: Option<f64>,
    /// Number of seeds averaged into this row.
    pub runs: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Rows per (asset, condition, method) averaged over seeds, followed by one
/// "Mean / Overall" row per method.
///
/// The same (asset, condition, method, seed) may appear more than once only
/// with identical results.
pub fn build_table(records: &[RunRecord]) -> Result<Vec<TableRow>, BenchError> {
    if records.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    let mut unique: BTreeMap<(String, Condition, Method, u64), &RunRecord> = BTreeMap::new();
    for r in records {
        let key = (r.asset.clone(), r.condition, r.method, r.seed);
        match unique.get(&key) {
            Some(prev) if *prev != r => {
                return Err(BenchError::Conflict(format!(
                    "{} / {} / {} / seed {}",
                    r.asset, r.condition, r.method, r.seed
                )))
            }
            Some(_) => {}
            None => {
                unique.insert(key, r);
            }
        }
    }
    let mut groups: BTreeMap<(String, Condition, Method), Vec<&RunRecord>> = BTreeMap::new();
    for ((asset, cond, method, _), r) in &unique {
        groups
            .entry((asset.clone(), *cond, *method))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<TableRow> = groups
        .into_iter()
        .map(|((asset, cond, method), rs)| TableRow {
            asset,
            condition: cond.to_string(),
            method,
            adds: rs.iter().map(|r| r.adds).sum::<f64>() / rs.len() as f64,
            e_trans_cm: mean_of(rs.iter().map(|r| r.e_trans_cm)),
            e_rot_deg: mean_of(rs.iter().map(|r| r.e_rot_deg)),
            ms_per_frame: mean_of(rs.iter().map(|r| r.ms_per_frame)),
            runs: rs.len(),
        })
        .collect();
    let mut overall = Vec::new();
    for method in Method::ALL {
        let mine: Vec<&TableRow> = rows.iter().filter(|r| r.method == method).collect();
        if mine.is_empty() {
            continue;
        }
        overall.push(TableRow {
            asset: "Mean".into(),
            condition: "Overall".into(),
            method,
            adds: mine.iter().map(|r| r.adds).sum::<f64>() / mine.len() as f64,
            e_trans_cm: mean_of(mine.iter().map(|r| r.e_trans_cm)),
            e_rot_deg: mean_of(mine.iter().map(|r| r.e_rot_deg)),
            ms_per_frame: mean_of(mine.iter().map(|r| r.ms_per_frame)),
            runs: mine.iter().map(|r| r.runs).sum(),
        });
    }
    rows.extend(overall);
    Ok(rows)
}

fn cell(v: Option<f64>, digits: usize, missing: &str) -> String {
    v.map_or_else(|| missing.to_string(), |x| format!("{x:.digits$}"))
}

pub fn render_markdown(rows: &[TableRow]) -> String {
    let mut s = String::from(
        "| Asset | Condition | Method | ADD(S) | e_trans (cm) | e_rot (deg) | ms/frame |\n|---|---|---|---:|---:|---:|---:|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {:.1} | {} | {} | {} |\n",
            r.asset,
            r.condition,
            r.method,
            r.adds,
            cell(r.e_trans_cm, 2, "-"),
            cell(r.e_rot_deg, 2, "-"),
            cell(r.ms_per_frame, 2, "-"),
        ));
    }
    s
}

pub fn render_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("asset,condition,method,adds,e_trans_cm,e_rot_deg,ms_per_frame\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.3},{},{},{}\n",
            r.asset,
            r.condition,
            r.method,
            r.adds,
            cell(r.e_trans_cm, 4, ""),
            cell(r.e_rot_deg, 4, ""),
            cell(r.ms_per_frame, 4, ""),
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Dataset directories

fn create(path: &Path) -> Result<BufWriter<File>, BenchError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>, BenchError> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(BenchError::MissingInput(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), BenchError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Writes the script, ground truth and simulated observations of a built-in
/// asset into `dir`, creating it if needed.
pub fn generate_dataset(
    asset: &str,
    opts: &ScriptOptions,
    dir: &Path,
) -> Result<SequenceScript, BenchError> {
    let (models, graph) = builtin_models(asset)?;
    let script = default_script(asset, &graph, opts)?;
    let gt = generate_ground_truth(&script, &graph)?;
    let obs = generate_observations(&gt, &models, &CameraIntrinsics::default(), &script);
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(SCRIPT_FILE), &script)?;
    let mut out = create(&dir.join(GROUND_TRUTH_FILE))?;
    write_ground_truth(&mut out, &gt)?;
    out.flush()?;
    let mut out = create(&dir.join(OBSERVATIONS_FILE))?;
    write_observations(&mut out, &obs)?;
    out.flush()?;
    Ok(script)
}

/// How a dataset is tracked.
#[derive(Clone, Copy)]
pub struct TrackOptions<'a> {
    pub method: Method,
    /// Record per-frame runtimes; off for byte-reproducible outputs.
    pub timing: bool,
    /// Publish every report here while tracking.
    pub hub: Option<&'a PoseHub>,
    /// Replay at this frame rate instead of as fast as possible.
    pub fps: Option<f64>,
}

impl TrackOptions<'_> {
    pub fn new(method: Method) -> Self {
        TrackOptions {
            method,
            timing: true,
            hub: None,
            fps: None,
        }
    }
}

/// Tracks the observations in `data_dir`, scores them against its ground
/// truth and writes the track and summary files into `out_dir`.
pub fn track_dataset(
    data_dir: &Path,
    out_dir: &Path,
    opts: &TrackOptions<'_>,
) -> Result<RunRecord, BenchError> {
    let script: SequenceScript = serde_json::from_reader(open(&data_dir.join(SCRIPT_FILE))?)
        .map_err(|e| BenchError::Parse {
            what: SCRIPT_FILE.into(),
            reason: e.to_string(),
        })?;
    let (models, graph) = builtin_models(&script.asset)?;
    script.validate(&graph)?;
    let gt = read_ground_truth(open(&data_dir.join(GROUND_TRUTH_FILE))?)?;
    let obs = read_observations(open(&data_dir.join(OBSERVATIONS_FILE))?)?;
    if obs.is_empty() {
        return Err(TrackError::EmptySequence.into());
    }

    let mut tracker = Tracker::new(
        graph,
        models.clone(),
        CameraIntrinsics::default(),
        opts.method.tracker_config(),
    )?;
    let period = opts
        .fps
        .filter(|f| *f > 0.0)
        .map(|f| Duration::from_secs_f64(1.0 / f));
    let start = Instant::now();
    let mut reports = Vec::with_capacity(obs.len());
    for (i, frame) in obs.iter().enumerate() {
        let report = tracker.process(frame);
        if let Some(hub) = opts.hub {
            hub.publish(&report);
        }
        for e in &report.events {
            log::debug!("frame {}: {:?}", report.frame_index, e);
        }
        reports.push(report);
        if let Some(p) = period {
            let due = start + p * (i as u32 + 1);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
    }
    if !tracker.is_initialized() {
        return Err(TrackError::SequenceFailed { frames: obs.len() }.into());
    }

    let errors = evaluate(&reports, &gt, &models);
    let info = RunInfo {
        asset: &script.asset,
        condition: script.condition,
        method: opts.method,
        seed: script.seed,
        record_timing: opts.timing,
    };
    let record = run_record(&info, &reports, &errors)?;
    std::fs::create_dir_all(out_dir)?;
    let mut out = create(&out_dir.join(TRACK_FILE))?;
    write_track(&mut out, &reports, opts.timing)?;
    out.flush()?;
    write_json(&out_dir.join(SUMMARY_FILE), &record)?;
    log::info!(
        "{} / {} / {}: ADD(S) {:.1} over {} frames",
        record.asset,
        record.condition,
        record.method,
        record.adds,
        record.frames
    );
    Ok(record)
}

/// Reads run summaries; a directory stands for the summary file inside it.
pub fn read_summaries(paths: &[PathBuf]) -> Result<Vec<RunRecord>, BenchError> {
    if paths.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    paths
        .iter()
        .map(|p| {
            let file = if p.is_dir() {
                p.join(SUMMARY_FILE)
            } else {
                p.clone()
            };
            serde_json::from_reader(open(&file)?).map_err(|e| BenchError::Parse {
                what: file.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect()
}
