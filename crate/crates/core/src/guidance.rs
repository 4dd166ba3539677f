//! Scientific Computer runtime: mission management, LOS steering and a PID
//! autopilot emitting direct-mode motor setpoints.
//!
//! The route is cut into sections (see [`route_sections`]); each section maps
//! to one guidance mode:
//!
//! | section                 | mode              |
//! |-------------------------|-------------------|
//! | surface track           | `SurfaceRun`      |
//! | submerged track         | `DiagonalTransit` |
//! | vertical, going down    | `ThrusterDescent` |
//! | vertical, going up      | `ThrusterAscent`  |
//!
//! The controller is event driven: one setpoint telegram per NavData fix,
//! with no wall-clock dependence.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{wrap_angle, GeoOrigin};
use crate::protocol::{
    encode, Direction, LlcCommand, LlcMode, LlcSetpointsCWolf, NavData, Telegram,
    TelegramLogWriter, TelegramSink, TelegramSource, TransportError, PWM_LIMIT,
};
use crate::route_gen::{Route, RouteProfile, WaypointKind};
use crate::trajectory::{
    route_sections, RouteSection, SectionKind, SplineTrajectory, TrajectoryError, Vec3,
};

/// Search window around the last projection, meters of arc length.
const PROJECT_WINDOW: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuidanceMode {
    Idle,
    ThrusterDescent,
    DiagonalTransit,
    ThrusterAscent,
    SurfaceRun,
    Complete,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 6] = [
        GuidanceMode::Idle,
        GuidanceMode::ThrusterDescent,
        GuidanceMode::DiagonalTransit,
        GuidanceMode::ThrusterAscent,
        GuidanceMode::SurfaceRun,
        GuidanceMode::Complete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::Idle => "idle",
            GuidanceMode::ThrusterDescent => "thruster_descent",
            GuidanceMode::DiagonalTransit => "diagonal_transit",
            GuidanceMode::ThrusterAscent => "thruster_ascent",
            GuidanceMode::SurfaceRun => "surface_run",
            GuidanceMode::Complete => "complete",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Edges of the mode graph.
    pub fn can_follow(self, from: GuidanceMode) -> bool {
        use GuidanceMode::*;
        matches!(
            (from, self),
            (
                Idle,
                ThrusterDescent | DiagonalTransit | SurfaceRun | ThrusterAscent
            ) | (SurfaceRun, ThrusterDescent | Complete)
                | (ThrusterDescent, DiagonalTransit | ThrusterAscent | Complete)
                | (DiagonalTransit, ThrusterAscent | Complete)
                | (ThrusterAscent, SurfaceRun | ThrusterDescent | Complete)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Integrator clamp, in output units.
    pub i_limit: f64,
}

impl PidGains {
    pub const fn new(kp: f64, ki: f64, kd: f64, i_limit: f64) -> Self {
        Self {
            kp,
            ki,
            kd,
            i_limit,
        }
    }

    fn is_finite(&self) -> bool {
        [self.kp, self.ki, self.kd, self.i_limit]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlGains {
    /// Heading error (rad) to yaw PWM.
    pub heading: PidGains,
    /// Depth error (m) to common vertical PWM.
    pub depth: PidGains,
    /// Speed error (m/s) to common main PWM.
    pub speed: PidGains,
    /// Pitch error (rad) to differential vertical PWM.
    pub pitch: PidGains,
    /// Depth error (m) to pitch correction (rad) during diagonal transit.
    pub depth_pitch: PidGains,
    /// Feedforward main PWM per (m/s)², per motor.
    pub speed_ff_quadratic: f64,
    /// Feedforward main PWM per m/s, per motor.
    pub speed_ff_linear: f64,
    /// Share of the yaw command given to the lateral thrusters.
    pub lateral_share: f64,
    pub lookahead_distance: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            heading: PidGains::new(900.0, 20.0, 400.0, 150.0),
            depth: PidGains::new(500.0, 40.0, 900.0, 300.0),
            speed: PidGains::new(500.0, 80.0, 0.0, 200.0),
            pitch: PidGains::new(1800.0, 100.0, 900.0, 300.0),
            depth_pitch: PidGains::new(0.12, 0.01, 0.25, 0.15),
            speed_ff_quadratic: 98.4,
            speed_ff_linear: 19.7,
            lateral_share: 0.5,
            lookahead_distance: 6.0,
        }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let pids = [
            self.heading,
            self.depth,
            self.speed,
            self.pitch,
            self.depth_pitch,
        ];
        let scalars = [
            self.speed_ff_quadratic,
            self.speed_ff_linear,
            self.lateral_share,
            self.lookahead_distance,
        ];
        if !pids.iter().all(PidGains::is_finite) || !scalars.iter().all(|v| v.is_finite()) {
            return Err(GuidanceError::Config("gains must be finite".into()));
        }
        if self.lookahead_distance <= 0.0 {
            return Err(GuidanceError::Config(
                "lookahead_distance must be > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub gains: ControlGains,
    /// Horizontal distance at which the final waypoint counts as reached.
    pub capture_radius: f64,
    /// Along-track distance before a section end at which it counts as done.
    pub end_tolerance: f64,
    /// Depth margin for finishing a thruster descent.
    pub depth_tolerance: f64,
    /// Depth at which a thruster ascent counts as surfaced.
    pub surfaced_depth: f64,
    /// Extra surface distance on top of `l_gps` before diving again.
    pub gps_margin: f64,
    /// Speed reference slope approaching a section end, 1/s.
    pub brake_gain: f64,
    /// Speed floor while approaching a section end.
    pub approach_speed: f64,
    /// Speed limit while holding position during vertical transitions.
    pub hold_speed: f64,
    pub max_pitch_ref: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gains: ControlGains::default(),
            capture_radius: 3.0,
            end_tolerance: 0.5,
            depth_tolerance: 0.1,
            surfaced_depth: 0.2,
            gps_margin: 1.0,
            brake_gain: 0.3,
            approach_speed: 0.2,
            hold_speed: 0.3,
            max_pitch_ref: 30f64.to_radians(),
        }
    }
}

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("guidance config: {0}")]
    Config(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("route is empty")]
    EmptyRoute,
    #[error("not activated")]
    NotActive,
    #[error("navigation field `{0}` is not finite")]
    InvalidNav(&'static str),
    #[error("no NavData for {0:?}; vehicle released")]
    Watchdog(Duration),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("mission log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default)]
struct Pid {
    integral: f64,
    prev_error: Option<f64>,
}

impl Pid {
    /// PID output with conditional integration: the integrator only grows
    /// while the output is not pushing further into saturation.
    fn update(&mut self, g: &PidGains, error: f64, dt: f64, limit: f64) -> f64 {
        let deriv = match self.prev_error {
            Some(p) if dt > 0.0 => (error - p) / dt,
            _ => 0.0,
        };
        self.prev_error = Some(error);
        let unsat = g.kp * error + self.integral + g.kd * deriv;
        let saturated = unsat.abs() >= limit && unsat.signum() == error.signum();
        if !saturated {
            self.integral = (self.integral + g.ki * error * dt).clamp(-g.i_limit, g.i_limit);
        }
        (g.kp * error + self.integral + g.kd * deriv).clamp(-limit, limit)
    }

    fn reset(&mut self) {
        *self = Pid::default();
    }
}

/// Desired heading toward the lookahead point `s + lookahead` on `traj`.
/// Past the end the point is extrapolated along the horizontal end tangent,
/// so the heading stays defined while the vehicle closes on the end point.
pub fn los_heading(
    pos: [f64; 2],
    traj: &SplineTrajectory,
    s: f64,
    lookahead: f64,
) -> Result<f64, GuidanceError> {
    let target = lookahead_point(traj, s + lookahead)?;
    let (dx, dy) = (target[0] - pos[0], target[1] - pos[1]);
    Ok(wrap_angle(dy.atan2(dx)))
}

fn horizontal_end_direction(traj: &SplineTrajectory) -> Result<[f64; 2], GuidanceError> {
    let len = traj.total_length();
    let d = traj.derivative(len)?;
    let n = d[0].hypot(d[1]);
    if n > 1e-9 {
        return Ok([d[0] / n, d[1] / n]);
    }
    // Vertical end tangent: fall back to the last horizontal chord.
    let pts = traj.points();
    for w in pts.windows(2).rev() {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        let n = dx.hypot(dy);
        if n > 1e-9 {
            return Ok([dx / n, dy / n]);
        }
    }
    Err(GuidanceError::Trajectory(TrajectoryError::ZeroTangent(len)))
}

pub fn lookahead_point(traj: &SplineTrajectory, s: f64) -> Result<Vec3, GuidanceError> {
    let len = traj.total_length();
    if s <= len {
        return Ok(traj.eval_clamped(s.max(0.0)));
    }
    let end = traj.eval_clamped(len);
    let dir = horizontal_end_direction(traj)?;
    let extra = s - len;
    Ok([end[0] + dir[0] * extra, end[1] + dir[1] * extra, end[2]])
}

/// Per-step tracker bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerState {
    pub current_mode: GuidanceMode,
    pub section: usize,
    /// Projected arc length on the current section spline.
    pub s_hint: f64,
    pub active_waypoint_index: usize,
    /// Horizontal distance travelled since the last SurfaceEnd.
    pub submerged_distance_accumulator: f64,
    /// Horizontal distance travelled in the current surface run.
    pub surfaced_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressReport {
    pub mode: GuidanceMode,
    pub waypoint_index: usize,
    /// In [0, 1], never decreasing.
    pub fraction_complete: f64,
    pub surfacing_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeChange {
    pub t: f64,
    pub from: GuidanceMode,
    pub to: GuidanceMode,
    pub depth: f64,
    pub section: usize,
}

/// One line of the JSON-lines mission log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub mode: GuidanceMode,
    pub section: usize,
    pub waypoint: usize,
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub nav: NavData,
    pub pwm: [i16; 6],
}

struct SectionInfo {
    section: RouteSection,
    mode: GuidanceMode,
    /// Track length before this section (3D, verticals as |dz|).
    offset: f64,
    length: f64,
    /// Surface run that must cover `l_gps` before ending.
    gps_run: bool,
}

pub struct Guidance {
    config: GuidanceConfig,
    origin: GeoOrigin,
    z_min: f64,
    l_gps: f64,
    route: Route,
    sections: Vec<SectionInfo>,
    total_length: f64,
    state: TrackerState,
    activated: bool,
    released: bool,
    last_nav: Option<NavData>,
    last_xy: Option<[f64; 2]>,
    last_setpoints: LlcSetpointsCWolf,
    heading_pid: Pid,
    depth_pid: Pid,
    speed_pid: Pid,
    pitch_pid: Pid,
    depth_pitch_pid: Pid,
    hold_heading: Option<f64>,
    fresh_section: bool,
    fraction: f64,
    surfacings: usize,
    completed: Vec<usize>,
    transitions: Vec<ModeChange>,
}

fn section_length(s: &RouteSection) -> f64 {
    match &s.kind {
        SectionKind::Track {
            spline: Some(t), ..
        } => t.total_length(),
        SectionKind::Track { spline: None, .. } => 0.0,
        SectionKind::Vertical {
            from_depth,
            to_depth,
        } => (to_depth - from_depth).abs(),
    }
}

impl Guidance {
    pub fn new(
        route: Route,
        profile: &RouteProfile,
        config: GuidanceConfig,
        origin: GeoOrigin,
    ) -> Result<Self, GuidanceError> {
        config.gains.validate()?;
        if route.waypoints.is_empty() {
            return Err(GuidanceError::EmptyRoute);
        }
        let mut offset = 0.0;
        let mut sections = Vec::new();
        for section in route_sections(&route)? {
            let mode = match &section.kind {
                SectionKind::Track { surface: true, .. } => GuidanceMode::SurfaceRun,
                SectionKind::Track { surface: false, .. } => GuidanceMode::DiagonalTransit,
                SectionKind::Vertical {
                    from_depth,
                    to_depth,
                } if to_depth > from_depth => GuidanceMode::ThrusterDescent,
                SectionKind::Vertical { .. } => GuidanceMode::ThrusterAscent,
            };
            let length = section_length(&section);
            let gps_run = mode == GuidanceMode::SurfaceRun
                && route.waypoints[section.first].kind == WaypointKind::SurfaceStart;
            sections.push(SectionInfo {
                section,
                mode,
                offset,
                length,
                gps_run,
            });
            offset += length;
        }
        Ok(Self {
            config,
            origin,
            z_min: profile.z_min,
            l_gps: profile.l_gps,
            route,
            sections,
            total_length: offset,
            state: TrackerState {
                current_mode: GuidanceMode::Idle,
                section: 0,
                s_hint: 0.0,
                active_waypoint_index: 0,
                submerged_distance_accumulator: 0.0,
                surfaced_distance: 0.0,
            },
            activated: false,
            released: false,
            last_nav: None,
            last_xy: None,
            last_setpoints: LlcSetpointsCWolf::default(),
            heading_pid: Pid::default(),
            depth_pid: Pid::default(),
            speed_pid: Pid::default(),
            pitch_pid: Pid::default(),
            depth_pitch_pid: Pid::default(),
            hold_heading: None,
            fresh_section: true,
            fraction: 0.0,
            surfacings: 0,
            completed: Vec::new(),
            transitions: Vec::new(),
        })
    }

    pub fn mode(&self) -> GuidanceMode {
        self.state.current_mode
    }

    pub fn tracker(&self) -> &TrackerState {
        &self.state
    }

    pub fn route(&self) -> &Route {
        &self.route
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.config
    }

    pub fn transitions(&self) -> &[ModeChange] {
        &self.transitions
    }

    /// Waypoint indices in the order they were reached.
    pub fn completed_waypoints(&self) -> &[usize] {
        &self.completed
    }

    pub fn is_active(&self) -> bool {
        self.activated && !self.released
    }

    /// Telegram switching the LLC to Direct mode; `None` if already active.
    pub fn activate(&mut self) -> Option<Telegram> {
        if self.activated {
            return None;
        }
        self.activated = true;
        Some(Telegram::LlcCommand(LlcCommand {
            mode: LlcMode::Direct,
        }))
    }

    /// Telegram releasing the vehicle; `None` if never activated or already
    /// released.
    pub fn shutdown(&mut self) -> Option<Telegram> {
        if !self.activated || self.released {
            return None;
        }
        self.released = true;
        Some(Telegram::LlcCommand(LlcCommand {
            mode: LlcMode::NoControl,
        }))
    }

    pub fn mission_progress(&self) -> ProgressReport {
        ProgressReport {
            mode: self.state.current_mode,
            waypoint_index: self.state.active_waypoint_index,
            fraction_complete: self.fraction,
            surfacing_count: self.surfacings,
        }
    }

    fn set_mode(&mut self, to: GuidanceMode, t: f64, depth: f64) {
        let from = self.state.current_mode;
        if from == to {
            return;
        }
        debug_assert!(to.can_follow(from), "{from:?} -> {to:?}");
        self.transitions.push(ModeChange {
            t,
            from,
            to,
            depth,
            section: self.state.section,
        });
        self.state.current_mode = to;
        for pid in [
            &mut self.heading_pid,
            &mut self.depth_pid,
            &mut self.pitch_pid,
            &mut self.depth_pitch_pid,
        ] {
            pid.reset();
        }
        self.hold_heading = None;
    }

    fn mark_completed(&mut self, upto: usize) {
        let next = self.completed.last().map_or(0, |w| w + 1);
        for w in next..=upto.min(self.route.waypoints.len() - 1) {
            self.completed.push(w);
            if self.route.waypoints[w].kind == WaypointKind::SurfaceStart {
                self.surfacings += 1;
            }
            if self.route.waypoints[w].kind == WaypointKind::SurfaceEnd {
                self.state.submerged_distance_accumulator = 0.0;
            }
        }
        self.state.active_waypoint_index = (upto + 1).min(self.route.waypoints.len() - 1);
    }

    fn enter_section(&mut self, idx: usize, t: f64, depth: f64) {
        self.state.section = idx;
        self.state.s_hint = 0.0;
        self.state.surfaced_distance = 0.0;
        self.fresh_section = true;
        let mode = self.sections[idx].mode;
        self.set_mode(mode, t, depth);
        let first = self.sections[idx].section.first;
        if first > 0 {
            self.mark_completed(first);
        } else if self.completed.is_empty() {
            self.mark_completed(0);
        }
    }

    fn finish(&mut self, t: f64, depth: f64) {
        self.mark_completed(self.route.waypoints.len() - 1);
        self.fraction = 1.0;
        self.state.active_waypoint_index = self.route.waypoints.len() - 1;
        self.set_mode(GuidanceMode::Complete, t, depth);
    }

    /// Whether the current section is done at position `p`.
    fn section_done(&self, p: Vec3) -> bool {
        let info = &self.sections[self.state.section];
        let last_section = self.state.section + 1 == self.sections.len();
        match &info.section.kind {
            SectionKind::Track { spline: None, .. } => true,
            SectionKind::Track {
                spline: Some(t), ..
            } => {
                let end = t.eval_clamped(t.total_length());
                if last_section
                    && (p[0] - end[0]).hypot(p[1] - end[1]) <= self.config.capture_radius
                {
                    return true;
                }
                let along = self.state.s_hint >= t.total_length() - self.config.end_tolerance;
                let gps_ok = !info.gps_run
                    || self.state.surfaced_distance >= self.l_gps + self.config.gps_margin;
                along && gps_ok
            }
            SectionKind::Vertical {
                from_depth,
                to_depth,
            } => {
                if to_depth > from_depth {
                    p[2] >= to_depth - self.config.depth_tolerance
                } else {
                    p[2] <= to_depth + self.config.surfaced_depth
                }
            }
        }
    }

    /// One control step. Stale fixes return the previous setpoints; a fix
    /// with a non-finite field yields an error and zeroed setpoints.
    pub fn step(&mut self, nav: &NavData) -> Result<LlcSetpointsCWolf, GuidanceError> {
        if !self.activated {
            return Err(GuidanceError::NotActive);
        }
        let fields = [
            ("timestamp", nav.timestamp),
            ("latitude", nav.latitude),
            ("longitude", nav.longitude),
            ("depth", nav.depth),
            ("pitch", nav.pitch),
            ("yaw", nav.yaw),
            ("speed", nav.speed),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            self.last_setpoints = LlcSetpointsCWolf::default();
            return Err(GuidanceError::InvalidNav(name));
        }
        if let Some(last) = self.last_nav {
            if nav.timestamp <= last.timestamp {
                return Ok(self.last_setpoints);
            }
        }
        if self.released || self.state.current_mode == GuidanceMode::Complete {
            self.last_setpoints = LlcSetpointsCWolf::default();
            return Ok(self.last_setpoints);
        }
        let dt = self.last_nav.map_or(0.1, |l| nav.timestamp - l.timestamp);
        self.last_nav = Some(*nav);
        let (x, y) = self.origin.to_local(nav.latitude, nav.longitude);
        let p = [x, y, nav.depth];
        if let Some([lx, ly]) = self.last_xy {
            let d = (x - lx).hypot(y - ly);
            if nav.depth < crate::simulator::GPS_DEPTH {
                self.state.surfaced_distance += d;
            } else {
                self.state.surfaced_distance = 0.0;
            }
            self.state.submerged_distance_accumulator += d;
        }
        self.last_xy = Some([x, y]);

        if self.state.current_mode == GuidanceMode::Idle {
            self.enter_section(0, nav.timestamp, nav.depth);
        }
        loop {
            self.update_progress(p);
            if !self.section_done(p) {
                break;
            }
            let next = self.state.section + 1;
            if next >= self.sections.len() {
                self.finish(nav.timestamp, nav.depth);
                self.last_setpoints = LlcSetpointsCWolf::default();
                return Ok(self.last_setpoints);
            }
            let surfaced = self.state.surfaced_distance;
            let last = self.sections[self.state.section].section.last;
            self.mark_completed(last);
            self.enter_section(next, nav.timestamp, nav.depth);
            // A surface run keeps the distance already covered since surfacing.
            if self.sections[next].mode == GuidanceMode::SurfaceRun {
                self.state.surfaced_distance = surfaced;
            }
        }
        let sp = self.control(nav, p, dt)?;
        self.last_setpoints = sp;
        Ok(sp)
    }

    fn update_progress(&mut self, p: Vec3) {
        let info = &self.sections[self.state.section];
        if let SectionKind::Track {
            spline: Some(t), ..
        } = &info.section.kind
        {
            // The first fix in a section searches the whole spline.
            let window = if self.fresh_section {
                t.total_length()
            } else {
                PROJECT_WINDOW
            };
            self.fresh_section = false;
            let s = t
                .project_within(p, self.state.s_hint, window)
                .max(self.state.s_hint);
            self.state.s_hint = s;
            let passed = t
                .knots()
                .partition_point(|k| *k <= s + self.config.end_tolerance);
            let (first, last) = (info.section.first, info.section.last);
            if passed > 1 && first + passed - 1 < last {
                self.mark_completed(first + passed - 1);
            }
        }
        let info = &self.sections[self.state.section];
        let done_in_section = match &info.section.kind {
            SectionKind::Track { .. } => self.state.s_hint,
            SectionKind::Vertical { from_depth, .. } => (p[2] - from_depth).abs().min(info.length),
        };
        if self.total_length > 0.0 {
            let f = ((info.offset + done_in_section) / self.total_length).clamp(0.0, 1.0);
            self.fraction = self.fraction.max(f);
        }
    }

    fn speed_command(&mut self, u_ref: f64, u: f64, dt: f64) -> f64 {
        let g = self.config.gains;
        let ff = g.speed_ff_quadratic * u_ref * u_ref.abs() + g.speed_ff_linear * u_ref;
        ff + self
            .speed_pid
            .update(&g.speed, u_ref - u, dt, f64::from(PWM_LIMIT))
    }

    fn control(
        &mut self,
        nav: &NavData,
        p: Vec3,
        dt: f64,
    ) -> Result<LlcSetpointsCWolf, GuidanceError> {
        let g = self.config.gains;
        let limit = f64::from(PWM_LIMIT);
        let info = &self.sections[self.state.section];
        let mode = info.mode;
        let (heading_ref, u_ref, vertical, pitch_diff);
        match &info.section.kind {
            SectionKind::Track {
                spline: Some(t), ..
            } => {
                let t = t.clone();
                let gps_run = info.gps_run;
                let s = self.state.s_hint;
                heading_ref = los_heading([p[0], p[1]], &t, s, g.lookahead_distance)?;
                let mut remaining = t.total_length() - s;
                if gps_run {
                    remaining = remaining
                        .max(self.l_gps + self.config.gps_margin - self.state.surfaced_distance);
                }
                let last_section = self.state.section + 1 == self.sections.len();
                let cruise = self.route.waypoints[info.section.first].speed;
                u_ref = if last_section {
                    cruise
                } else {
                    (self.config.approach_speed + self.config.brake_gain * remaining).min(cruise)
                };
                if mode == GuidanceMode::SurfaceRun {
                    vertical = 0.0;
                    pitch_diff = 0.0;
                } else {
                    let (v, d) = self.diagonal_depth(&t, s, nav, p, dt);
                    vertical = v;
                    pitch_diff = d;
                }
            }
            SectionKind::Track { spline: None, .. } => {
                unreachable!("single-point sections finish immediately")
            }
            SectionKind::Vertical { to_depth, .. } => {
                let target = self.route.waypoints[info.section.last];
                let next_heading = self.next_track_heading([target.x, target.y]);
                let hold = *self
                    .hold_heading
                    .get_or_insert(next_heading.unwrap_or(nav.yaw));
                heading_ref = hold;
                let along = (target.x - p[0]) * nav.yaw.cos() + (target.y - p[1]) * nav.yaw.sin();
                u_ref = (0.3 * along).clamp(-self.config.hold_speed, self.config.hold_speed);
                let z_ref = if mode == GuidanceMode::ThrusterAscent {
                    to_depth - 0.5
                } else {
                    *to_depth
                };
                vertical = self.depth_pid.update(&g.depth, z_ref - p[2], dt, limit);
                pitch_diff = self.pitch_pid.update(&g.pitch, -nav.pitch, dt, limit);
            }
        }
        let yaw_cmd =
            self.heading_pid
                .update(&g.heading, wrap_angle(heading_ref - nav.yaw), dt, limit);
        let common = self.speed_command(u_ref, nav.speed, dt);
        Ok(allocate(
            common,
            yaw_cmd,
            g.lateral_share,
            vertical,
            pitch_diff,
        ))
    }

    /// Vertical commands for diagonal flight: pitch follows the spline slope
    /// plus a depth correction; the common vertical term only helps at low
    /// speed where pitch has little effect on depth rate.
    fn diagonal_depth(
        &mut self,
        t: &SplineTrajectory,
        s: f64,
        nav: &NavData,
        p: Vec3,
        dt: f64,
    ) -> (f64, f64) {
        let g = self.config.gains;
        let limit = f64::from(PWM_LIMIT);
        let len = t.total_length();
        let d = t.derivative(s.min(len)).unwrap_or([1.0, 0.0, 0.0]);
        let slope_pitch = -d[2].atan2(d[0].hypot(d[1]));
        let z_max = t.points().iter().map(|q| q[2]).fold(self.z_min, f64::max);
        let z_ref = t.eval_clamped(s)[2].clamp(self.z_min, z_max);
        let err = z_ref - p[2];
        let correction = self
            .depth_pitch_pid
            .update(&g.depth_pitch, err, dt, FRAC_PI_2);
        let pitch_ref =
            (slope_pitch - correction).clamp(-self.config.max_pitch_ref, self.config.max_pitch_ref);
        let pitch_diff = self
            .pitch_pid
            .update(&g.pitch, pitch_ref - nav.pitch, dt, limit);
        let low_speed = (1.0 - nav.speed.abs()).clamp(0.0, 1.0);
        let vertical = low_speed * self.depth_pid.update(&g.depth, err, dt, limit);
        (vertical, pitch_diff)
    }

    fn next_track_heading(&self, from: [f64; 2]) -> Option<f64> {
        self.sections[self.state.section + 1..]
            .iter()
            .find_map(|s| match &s.section.kind {
                SectionKind::Track {
                    spline: Some(t), ..
                } => {
                    let q = lookahead_point(t, self.config.gains.lookahead_distance).ok()?;
                    let (dx, dy) = (q[0] - from[0], q[1] - from[1]);
                    (dx.hypot(dy) > 1e-6).then(|| wrap_angle(dy.atan2(dx)))
                }
                _ => None,
            })
    }
}

fn to_pwm(v: f64) -> i16 {
    v.round().clamp(-f64::from(PWM_LIMIT), f64::from(PWM_LIMIT)) as i16
}

/// Maps common/differential commands to the six motors. Differential parts
/// get priority: the common part is reduced so that neither motor of a pair
/// saturates.
pub fn allocate(
    common: f64,
    yaw: f64,
    lateral_share: f64,
    vertical: f64,
    pitch: f64,
) -> LlcSetpointsCWolf {
    let limit = f64::from(PWM_LIMIT);
    let pair = |common: f64, diff: f64| {
        let half = (diff / 2.0).clamp(-limit, limit);
        let room = limit - half.abs();
        let c = common.clamp(-room, room);
        (c + half, c - half)
    };
    let (port, stbd) = pair(common, yaw * (1.0 - lateral_share));
    let lat = (yaw * lateral_share).clamp(-limit, limit);
    let (stern, bow) = pair(vertical, pitch);
    LlcSetpointsCWolf {
        pwm: [
            to_pwm(port),
            to_pwm(stbd),
            to_pwm(lat),
            to_pwm(-lat),
            to_pwm(bow),
            to_pwm(stern),
        ],
    }
}

/// Where the SC node sends and logs.
pub struct GuidanceIo<'a> {
    pub to_cc: &'a dyn TelegramSink,
    pub inbound: &'a mut dyn TelegramSource,
    pub mission_log: Option<&'a mut dyn Write>,
    pub telegram_log: Option<&'a mut TelegramLogWriter<Box<dyn Write + Send>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceReport {
    pub final_mode: GuidanceMode,
    pub progress: ProgressReport,
    pub transitions: Vec<ModeChange>,
    pub completed_waypoints: Vec<usize>,
    pub nav_received: u64,
    pub malformed: u64,
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct NodeTimeouts {
    /// Abort if no NavData arrives for this long once the mission runs.
    pub watchdog: Duration,
    /// Allowance for the first NavData.
    pub startup: Duration,
}

impl Default for NodeTimeouts {
    fn default() -> Self {
        Self {
            watchdog: Duration::from_secs(5),
            startup: Duration::from_secs(30),
        }
    }
}

fn send_logged(io: &mut GuidanceIo<'_>, t: f64, tg: &Telegram) -> Result<(), GuidanceError> {
    if let Some(l) = io.telegram_log.as_mut() {
        l.record(
            t,
            Direction::Sent,
            &encode(tg).map_err(TransportError::from)?,
        )?;
    }
    io.to_cc.send(tg)?;
    Ok(())
}

/// SC event loop. Activates Direct mode, answers every NavData with one
/// setpoint telegram and releases the vehicle on completion, on `stop`, or
/// when the NavData stream goes silent past the watchdog.
pub fn run_guidance(
    g: &mut Guidance,
    io: &mut GuidanceIo<'_>,
    timeouts: NodeTimeouts,
    stop: &std::sync::atomic::AtomicBool,
) -> Result<GuidanceReport, GuidanceError> {
    use std::sync::atomic::Ordering;
    let (mut nav_received, mut malformed) = (0u64, 0u64);
    let mut last_t = 0.0;
    if let Some(cmd) = g.activate() {
        send_logged(io, last_t, &cmd)?;
    }
    let mut last_rx = Instant::now();
    let mut last_reactivation: Option<Instant> = None;
    let mut failure = None;
    loop {
        if stop.load(Ordering::Acquire) {
            log::info!("guidance stop requested");
            break;
        }
        let limit = if nav_received == 0 {
            timeouts.startup
        } else {
            timeouts.watchdog
        };
        if last_rx.elapsed() > limit {
            log::error!("no NavData for {limit:?}; releasing vehicle");
            failure = Some(GuidanceError::Watchdog(limit));
            break;
        }
        let received = match io.inbound.receive(Duration::from_millis(50)) {
            Ok(r) => r,
            Err(TransportError::Closed) => {
                std::thread::sleep(Duration::from_millis(5));
                None
            }
            Err(e) => return Err(e.into()),
        };
        let tg = match received {
            None => {
                // Nothing from the LLC yet: the activation may have gone to a
                // port nobody was bound to.
                let quiet = last_reactivation.unwrap_or(last_rx).elapsed() > Duration::from_secs(1);
                if nav_received == 0 && g.is_active() && quiet {
                    log::info!("no NavData yet; re-sending Direct");
                    let cmd = Telegram::LlcCommand(LlcCommand {
                        mode: LlcMode::Direct,
                    });
                    send_logged(io, last_t, &cmd)?;
                    last_reactivation = Some(Instant::now());
                }
                continue;
            }
            Some(Err(e)) => {
                log::warn!("SC dropped malformed datagram: {e}");
                malformed += 1;
                continue;
            }
            Some(Ok(tg)) => tg,
        };
        if let Some(l) = io.telegram_log.as_mut() {
            l.record(
                last_t,
                Direction::Received,
                &encode(&tg).map_err(TransportError::from)?,
            )?;
        }
        match tg {
            Telegram::NavData(nav) => {
                nav_received += 1;
                last_rx = Instant::now();
                last_t = nav.timestamp;
                let sp = match g.step(&nav) {
                    Ok(sp) => sp,
                    Err(GuidanceError::InvalidNav(f)) => {
                        log::error!("invalid NavData field {f}; zero setpoints");
                        LlcSetpointsCWolf::default()
                    }
                    Err(e) => return Err(e),
                };
                if g.mode() == GuidanceMode::Complete {
                    break;
                }
                send_logged(io, last_t, &Telegram::LlcSetpointsCWolf(sp))?;
                if let Some(w) = io.mission_log.as_mut() {
                    let (x, y) = g.origin.to_local(nav.latitude, nav.longitude);
                    let rec = LogRecord {
                        t: nav.timestamp,
                        mode: g.mode(),
                        section: g.state.section,
                        waypoint: g.state.active_waypoint_index,
                        s: g.state.s_hint,
                        x,
                        y,
                        nav,
                        pwm: sp.pwm,
                    };
                    serde_json::to_writer(&mut **w, &rec).map_err(std::io::Error::from)?;
                    w.write_all(b"\n")?;
                }
            }
            Telegram::LlcStatus(st) if st.mode_echo != LlcMode::Direct && g.is_active() => {
                // The LLC missed the activation (e.g. started after us).
                if last_reactivation.is_none_or(|t| t.elapsed() > Duration::from_secs(1)) {
                    log::warn!("LLC reports {:?}; re-sending Direct", st.mode_echo);
                    send_logged(
                        io,
                        last_t,
                        &Telegram::LlcCommand(LlcCommand {
                            mode: LlcMode::Direct,
                        }),
                    )?;
                    last_reactivation = Some(Instant::now());
                }
            }
            Telegram::LlcError(e) => log::warn!("LLC error {}: {}", e.code, e.message),
            _ => {}
        }
    }
    if let Some(cmd) = g.shutdown() {
        // The CC may already be gone; releasing is best effort.
        if let Err(e) = send_logged(io, last_t, &cmd) {
            log::warn!("could not send release command: {e}");
        }
    }
    if let Some(w) = io.mission_log.as_mut() {
        w.flush()?;
    }
    if let Some(l) = io.telegram_log.as_mut() {
        l.flush()?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GuidanceReport {
        final_mode: g.mode(),
        progress: g.mission_progress(),
        transitions: g.transitions.clone(),
        completed_waypoints: g.completed.clone(),
        nav_received,
        malformed,
        aborted: g.mode() != GuidanceMode::Complete,
    })
}
