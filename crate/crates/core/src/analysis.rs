//! Offline checks over a run's log directory.
//!
//! Recomputes the system invariants from the logs alone: PWM bounds, the
//! Direct/NoControl bracket around setpoints, mode-graph soundness, the
//! thruster handover depth, GPS surfacing spans, sensor cadence and ranges.
//! Also reports the horizontal cross-track RMS of the true track.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guidance::GuidanceMode;
use crate::harness::{
    RunManifest, CC_TELEGRAMS, MEASUREMENTS, MISSION_LOG, ROUTE_FILE, RUN_MANIFEST, SC_TELEGRAMS,
    STATE_LOG,
};
use crate::measurement::{Channel, SensorConfig};
use crate::protocol::{
    read_telegram_log, Direction, LoggedFrame, HEADER_LEN, ID_LLC_COMMAND, ID_LLC_SETPOINTS_CWOLF,
    LLC_COMMAND_LEN, LLC_SETPOINTS_CWOLF_LEN, MOTOR_COUNT, PWM_LIMIT,
};
use crate::route_gen::{read_route_csv, Route, RouteProfile, WaypointKind};
use crate::trajectory::{route_sections, SectionKind};

pub const DEPTH_PROFILE: &str = "depth_profile.csv";

/// Depth below which the vehicle counts as surfaced for GPS purposes.
pub const SURFACED_DEPTH: f64 = 0.3;
/// Slack on the thruster-to-propeller handover depth.
const HANDOVER_SLACK: f64 = 0.15;
/// Max distance between a surfaced stretch and the planned surfacing.
const SURFACING_MATCH_RADIUS: f64 = 5.0;
const CADENCE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}: no run logs found")]
    NoLogs(PathBuf),
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacingSpan {
    /// Index of the planned SurfaceStart waypoint.
    pub waypoint: usize,
    /// Horizontal distance driven at depth < 0.3 m around that surfacing.
    pub surfaced_length: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CadenceStats {
    pub fast_samples: usize,
    pub nitrate_samples: usize,
    pub first_t: f64,
    pub last_t: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub files: Vec<String>,
    pub violations: Vec<Violation>,
    pub mode_sequence: Vec<GuidanceMode>,
    pub completed_waypoints: Vec<usize>,
    pub cross_track_rms: Option<f64>,
    pub cross_track_max: Option<f64>,
    pub surfacings: Vec<SurfacingSpan>,
    pub cadence: Option<CadenceStats>,
    pub setpoints_checked: usize,
}

impl AnalysisReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn violate(&mut self, check: &str, detail: impl Into<String>) {
        self.violations.push(Violation {
            check: check.to_string(),
            detail: detail.into(),
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Deserialize)]
struct NavLite {
    depth: f64,
}

/// The mission-log fields the checks need; PWM is read wide so corrupted
/// values still parse.
#[derive(Deserialize)]
struct MissionLine {
    t: f64,
    mode: GuidanceMode,
    section: usize,
    nav: NavLite,
    pwm: Vec<i64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, reason: impl ToString) -> AnalysisError {
    AnalysisError::Parse {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn read_state_log(path: &Path) -> Result<Vec<StateRow>, AnalysisError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let f = |i: usize| -> Result<f64, AnalysisError> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(path, format!("bad field {i} in {rec:?}")))
        };
        rows.push(StateRow {
            t: f(0)?,
            x: f(1)?,
            y: f(2)?,
            z: f(3)?,
        });
    }
    Ok(rows)
}

fn read_mission_log(path: &Path) -> Result<Vec<MissionLine>, AnalysisError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| parse_err(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

fn read_frames(path: &Path) -> Result<Vec<LoggedFrame>, AnalysisError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_telegram_log(BufReader::new(file)).map_err(|e| parse_err(path, e))
}

fn frame_id(bytes: &[u8]) -> Option<u16> {
    (bytes.len() >= HEADER_LEN).then(|| u16::from_le_bytes([bytes[0], bytes[1]]))
}

/// Setpoint PWM values read straight from the wire bytes, so out-of-range
/// values are seen even when a strict decoder would reject them.
fn raw_setpoints(bytes: &[u8]) -> Option<[i16; MOTOR_COUNT]> {
    if frame_id(bytes)? != ID_LLC_SETPOINTS_CWOLF
        || bytes.len() != HEADER_LEN + LLC_SETPOINTS_CWOLF_LEN
    {
        return None;
    }
    let mut pwm = [0i16; MOTOR_COUNT];
    for (i, p) in pwm.iter_mut().enumerate() {
        let o = HEADER_LEN + 2 * i;
        *p = i16::from_le_bytes([bytes[o], bytes[o + 1]]);
    }
    Some(pwm)
}

fn raw_command(bytes: &[u8]) -> Option<u16> {
    if frame_id(bytes)? != ID_LLC_COMMAND || bytes.len() != HEADER_LEN + LLC_COMMAND_LEN {
        return None;
    }
    Some(u16::from_le_bytes([
        bytes[HEADER_LEN],
        bytes[HEADER_LEN + 1],
    ]))
}

fn check_pwm(report: &mut AnalysisReport, source: &str, t: f64, pwm: &[i64]) {
    report.setpoints_checked += 1;
    if let Some((i, p)) = pwm
        .iter()
        .enumerate()
        .find(|(_, p)| p.abs() > PWM_LIMIT as i64)
    {
        report.violate(
            "PWM saturation",
            format!("{source} t={t:.1}: pwm[{i}] = {p} outside ±{PWM_LIMIT}"),
        );
    }
    if pwm.len() != MOTOR_COUNT {
        report.violate(
            "PWM saturation",
            format!("{source} t={t:.1}: {} PWM values", pwm.len()),
        );
    }
}

/// Setpoints must be bracketed by a Direct activation and a NoControl
/// release.
fn check_command_bracket(report: &mut AnalysisReport, frames: &[LoggedFrame]) {
    use crate::protocol::LlcMode;
    let sent: Vec<&LoggedFrame> = frames
        .iter()
        .filter(|f| f.direction == Direction::Sent)
        .collect();
    let first_direct = sent
        .iter()
        .position(|f| raw_command(&f.bytes) == Some(LlcMode::Direct as u16));
    let first_setpoint = sent.iter().position(|f| raw_setpoints(&f.bytes).is_some());
    match (first_direct, first_setpoint) {
        (None, Some(_)) => report.violate("direct mode", "setpoints sent without a Direct command"),
        (Some(d), Some(s)) if s < d => {
            report.violate("direct mode", "setpoints sent before the Direct command")
        }
        _ => {}
    }
    let last_cmd = sent.iter().rev().find_map(|f| raw_command(&f.bytes));
    if first_direct.is_some() && last_cmd != Some(LlcMode::NoControl as u16) {
        report.violate("release", "SC never released the vehicle with NoControl");
    }
}

fn check_modes(report: &mut AnalysisReport, lines: &[MissionLine], profile: Option<&RouteProfile>) {
    let mut prev = GuidanceMode::Idle;
    let mut prev_depth = 0.0;
    for l in lines {
        if l.mode == prev {
            prev_depth = l.nav.depth;
            continue;
        }
        if !l.mode.can_follow(prev) {
            report.violate(
                "mode graph",
                format!("t={:.1}: {} -> {}", l.t, prev.as_str(), l.mode.as_str()),
            );
        }
        if let Some(p) = profile {
            let depth = l.nav.depth.max(prev_depth);
            if prev == GuidanceMode::ThrusterDescent
                && l.mode == GuidanceMode::DiagonalTransit
                && depth < p.z_min - HANDOVER_SLACK
            {
                report.violate(
                    "handover depth",
                    format!(
                        "t={:.1}: propeller phase began at {depth:.2} m (z_min {})",
                        l.t, p.z_min
                    ),
                );
            }
        }
        report.mode_sequence.push(l.mode);
        prev = l.mode;
        prev_depth = l.nav.depth;
    }
}

/// Contiguous runs of state rows at depth < [`SURFACED_DEPTH`].
fn surfaced_runs(rows: &[StateRow]) -> Vec<&[StateRow]> {
    rows.split(|r| r.z >= SURFACED_DEPTH)
        .filter(|r| r.len() > 1)
        .collect()
}

fn path_length(rows: &[StateRow]) -> f64 {
    rows.windows(2)
        .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
        .sum()
}

fn check_surfacings(report: &mut AnalysisReport, rows: &[StateRow], route: &Route, l_gps: f64) {
    let runs = surfaced_runs(rows);
    let w = &route.waypoints;
    for (i, start) in w
        .iter()
        .enumerate()
        .filter(|(_, p)| p.kind == WaypointKind::SurfaceStart)
    {
        // A surfacing that runs into the end of the route is the arrival, not
        // a GPS stop.
        let Some(end) = w[i..].iter().find(|p| p.kind == WaypointKind::SurfaceEnd) else {
            continue;
        };
        // The matching run must pass close to both ends of the planned stretch.
        let near = |run: &[StateRow], x: f64, y: f64| {
            run.iter()
                .any(|r| (r.x - x).hypot(r.y - y) < SURFACING_MATCH_RADIUS)
        };
        let best = runs
            .iter()
            .filter(|run| near(run, start.x, start.y) || near(run, end.x, end.y))
            .map(|run| path_length(run))
            .fold(0.0, f64::max);
        report.surfacings.push(SurfacingSpan {
            waypoint: i,
            surfaced_length: best,
        });
        if best < l_gps {
            report.violate(
                "surfacing",
                format!(
                    "waypoint {i}: surfaced for {best:.1} m of track, need {l_gps} m for a GPS fix"
                ),
            );
        }
    }
}

/// Per-row horizontal cross-track error while the mission log shows a track
/// mode, keyed by state row index.
fn cross_track(
    rows: &[StateRow],
    lines: &[MissionLine],
    route: &Route,
) -> Result<BTreeMap<usize, f64>, String> {
    let sections = route_sections(route).map_err(|e| e.to_string())?;
    let polylines: Vec<Option<Vec<(f64, f64)>>> = sections
        .iter()
        .map(|s| match &s.kind {
            SectionKind::Track {
                spline: Some(sp), ..
            } => Some(
                sp.sample(0.5)
                    .into_iter()
                    .map(|(_, p)| (p[0], p[1]))
                    .collect(),
            ),
            _ => None,
        })
        .collect();
    let mut out = BTreeMap::new();
    let mut li = 0;
    for (ri, r) in rows.iter().enumerate() {
        while li + 1 < lines.len() && lines[li + 1].t <= r.t + 1e-6 {
            li += 1;
        }
        let Some(l) = lines.get(li).filter(|l| l.t <= r.t + 1e-6) else {
            continue;
        };
        if !matches!(
            l.mode,
            GuidanceMode::SurfaceRun | GuidanceMode::DiagonalTransit
        ) {
            continue;
        }
        let Some(Some(poly)) = polylines.get(l.section) else {
            continue;
        };
        out.insert(ri, polyline_distance(poly, r.x, r.y));
    }
    Ok(out)
}

pub fn polyline_distance(poly: &[(f64, f64)], x: f64, y: f64) -> f64 {
    if poly.len() == 1 {
        return (poly[0].0 - x).hypot(poly[0].1 - y);
    }
    poly.windows(2)
        .map(|w| {
            let ((ax, ay), (bx, by)) = (w[0], w[1]);
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (ax + t * dx - x).hypot(ay + t * dy - y)
        })
        .fold(f64::INFINITY, f64::min)
}

fn check_measurements(
    report: &mut AnalysisReport,
    path: &Path,
    cfg: &SensorConfig,
) -> Result<(), AnalysisError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(path, e))?;
    let channels = [
        (4, Channel::Nitrate),
        (5, Channel::Oxygen),
        (6, Channel::Conductivity),
        (7, Channel::Temperature),
    ];
    let mut stats = CadenceStats::default();
    let (mut last_fast, mut last_nitrate): (Option<f64>, Option<f64>) = (None, None);
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e))?;
        let t: f64 = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(path, format!("row {n}: bad t")))?;
        if n == 0 {
            stats.first_t = t;
        }
        stats.last_t = t;
        for (col, ch) in channels {
            let Some(raw) = rec.get(col).filter(|v| !v.is_empty()) else {
                continue;
            };
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(path, format!("row {n}: bad {}", ch.flag_name())))?;
            let (lo, hi) = cfg.range(ch);
            if !(lo..=hi).contains(&v) {
                report.violate(
                    "sensor range",
                    format!("t={t}: {} = {v} outside [{lo}, {hi}]", ch.flag_name()),
                );
            }
        }
        let has = |col: usize| rec.get(col).is_some_and(|v| !v.is_empty());
        if has(5) {
            stats.fast_samples += 1;
            if let Some(prev) = last_fast {
                if t - prev > cfg.fast_period + CADENCE_EPS {
                    report.violate(
                        "sensor cadence",
                        format!("fast channels silent from t={prev} to t={t}"),
                    );
                }
            }
            last_fast = Some(t);
        }
        if has(4) {
            stats.nitrate_samples += 1;
            if let Some(prev) = last_nitrate {
                if t - prev > cfg.nitrate_period + CADENCE_EPS {
                    report.violate(
                        "sensor cadence",
                        format!("nitrate silent from t={prev} to t={t}"),
                    );
                }
            }
            last_nitrate = Some(t);
        }
    }
    report.cadence = Some(stats);
    Ok(())
}

fn write_depth_profile(
    path: &Path,
    rows: &[StateRow],
    lines: &[MissionLine],
    xte: &BTreeMap<usize, f64>,
) -> Result<(), AnalysisError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "t,x,y,z,mode,cross_track")?;
        let mut li = 0;
        for (ri, r) in rows.iter().enumerate() {
            while li + 1 < lines.len() && lines[li + 1].t <= r.t + 1e-6 {
                li += 1;
            }
            let mode = lines
                .get(li)
                .filter(|l| l.t <= r.t + 1e-6)
                .map_or("", |l| l.mode.as_str());
            let e = xte.get(&ri).map_or(String::new(), |e| format!("{e:.3}"));
            writeln!(w, "{:.1},{:.3},{:.3},{:.3},{mode},{e}", r.t, r.x, r.y, r.z)?;
        }
        w.flush()
    };
    write().map_err(io_err(path))
}

/// Runs every check whose inputs are present in `dir` and writes
/// `depth_profile.csv` when a state log exists.
pub fn analyze_dir(dir: &Path) -> Result<AnalysisReport, AnalysisError> {
    let known = [
        RUN_MANIFEST,
        ROUTE_FILE,
        STATE_LOG,
        MISSION_LOG,
        MEASUREMENTS,
        CC_TELEGRAMS,
        SC_TELEGRAMS,
    ];
    let present = |name: &str| dir.join(name).is_file();
    let mut report = AnalysisReport {
        files: known
            .iter()
            .filter(|n| present(n))
            .map(|n| n.to_string())
            .collect(),
        ..AnalysisReport::default()
    };
    if ![
        STATE_LOG,
        MISSION_LOG,
        MEASUREMENTS,
        CC_TELEGRAMS,
        SC_TELEGRAMS,
    ]
    .iter()
    .any(|n| present(n))
    {
        return Err(AnalysisError::NoLogs(dir.to_path_buf()));
    }

    let manifest: Option<RunManifest> = if present(RUN_MANIFEST) {
        let p = dir.join(RUN_MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
        Some(serde_json::from_str(&text).map_err(|e| parse_err(&p, e))?)
    } else {
        None
    };
    let route = if present(ROUTE_FILE) {
        let p = dir.join(ROUTE_FILE);
        Some(read_route_csv(File::open(&p).map_err(io_err(&p))?).map_err(|e| parse_err(&p, e))?)
    } else {
        None
    };
    let profile = manifest.as_ref().map(|m| m.profile);

    let lines = if present(MISSION_LOG) {
        read_mission_log(&dir.join(MISSION_LOG))?
    } else {
        Vec::new()
    };
    for l in &lines {
        check_pwm(&mut report, MISSION_LOG, l.t, &l.pwm);
    }
    check_modes(&mut report, &lines, profile.as_ref());
    if let Some(g) = manifest.as_ref().and_then(|m| m.guidance.as_ref()) {
        if g.final_mode == GuidanceMode::Complete
            && report.mode_sequence.last() != Some(&GuidanceMode::Complete)
        {
            report.mode_sequence.push(GuidanceMode::Complete);
        }
        report.completed_waypoints = g.completed_waypoints.clone();
    }
    if let Some(err) = manifest.as_ref().and_then(|m| m.guidance_error.as_ref()) {
        report.violate("guidance", err.clone());
    }

    for (name, dir_filter) in [
        (CC_TELEGRAMS, Direction::Received),
        (SC_TELEGRAMS, Direction::Sent),
    ] {
        if !present(name) {
            continue;
        }
        let frames = read_frames(&dir.join(name))?;
        for f in frames.iter().filter(|f| f.direction == dir_filter) {
            if let Some(pwm) = raw_setpoints(&f.bytes) {
                check_pwm(&mut report, name, f.time, &pwm.map(i64::from));
            }
        }
        if name == SC_TELEGRAMS {
            check_command_bracket(&mut report, &frames);
        }
    }

    if present(STATE_LOG) {
        let rows = read_state_log(&dir.join(STATE_LOG))?;
        if let (Some(route), Some(p)) = (&route, &profile) {
            check_surfacings(&mut report, &rows, route, p.l_gps);
        }
        let xte = match &route {
            Some(route) if !lines.is_empty() => cross_track(&rows, &lines, route)
                .map_err(|e| parse_err(&dir.join(ROUTE_FILE), e))?,
            _ => BTreeMap::new(),
        };
        if !xte.is_empty() {
            let n = xte.len() as f64;
            report.cross_track_rms = Some((xte.values().map(|e| e * e).sum::<f64>() / n).sqrt());
            report.cross_track_max = xte.values().copied().reduce(f64::max);
        }
        write_depth_profile(&dir.join(DEPTH_PROFILE), &rows, &lines, &xte)?;
    }

    if present(MEASUREMENTS) {
        let cfg = manifest.as_ref().map(|m| m.sensors).unwrap_or_default();
        check_measurements(&mut report, &dir.join(MEASUREMENTS), &cfg)?;
    }
    Ok(report)
}
