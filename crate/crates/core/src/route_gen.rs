//! Route generation: mission elements to a 3D waypoint list.
//!
//! The horizontal path of a meander is built from straight legs joined by
//! half-circle turns of radius `d_leg / 2`. Turns are reproduced by points at
//! angular steps of at most `alpha_arc`, and every leg adjoining a turn gets a
//! transition point `d_arc` before/after the turn for a smooth spline. The
//! depth profile is a sawtooth between `z_min` and `z_max` at `alpha_dive`,
//! with vertical thruster transitions between the surface and `z_min` and a
//! surface run of `l_gps` whenever the submerged budget `d_dive` is used up.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoOrigin, Point2};
use crate::mission_plan::{validate_plan, MeanderElement, MissionElement, MissionPlan, Violation};

/// Positions closer than this along the path are the same point.
const S_EPS: f64 = 1e-9;
/// Depth vertices and path points closer than this are merged.
const MERGE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouteProfile {
    /// Maximum angular step on arcs, degrees.
    pub alpha_arc: f64,
    /// Offset of the transition points before/after a turn, meters.
    pub d_arc: f64,
    /// Thruster/propeller handover depth, meters.
    pub z_min: f64,
    /// Submerge/emerge angle, degrees.
    pub alpha_dive: f64,
    /// Submerged along-track budget between surfacings, meters.
    pub d_dive: f64,
    /// Surface run length for a GPS fix, meters.
    pub l_gps: f64,
    pub cruise_speed: f64,
}

impl Default for RouteProfile {
    fn default() -> Self {
        Self {
            alpha_arc: 30.0,
            d_arc: 5.0,
            z_min: 1.0,
            alpha_dive: 20.0,
            d_dive: 250.0,
            l_gps: 30.0,
            cruise_speed: 1.5,
        }
    }
}

impl RouteProfile {
    /// Checks the profile on its own (no element depth involved).
    pub fn validate(&self) -> Result<(), RouteError> {
        let bad = |msg: String| Err(RouteError::InvalidProfile(msg));
        let all = [
            self.alpha_arc,
            self.d_arc,
            self.z_min,
            self.alpha_dive,
            self.d_dive,
            self.l_gps,
            self.cruise_speed,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("all profile values must be finite".into());
        }
        if !(self.alpha_arc > 0.0 && self.alpha_arc <= 90.0) {
            return bad(format!(
                "alpha_arc must be in (0, 90] degrees (got {})",
                self.alpha_arc
            ));
        }
        if self.d_arc < 0.0 {
            return bad(format!("d_arc must be >= 0 (got {})", self.d_arc));
        }
        if self.z_min <= 0.0 {
            return bad(format!("z_min must be > 0 (got {})", self.z_min));
        }
        if !(self.alpha_dive > 0.0 && self.alpha_dive < 90.0) {
            return bad(format!(
                "alpha_dive must be in (0, 90) degrees (got {})",
                self.alpha_dive
            ));
        }
        if self.d_dive <= 0.0 {
            return bad(format!("d_dive must be > 0 (got {})", self.d_dive));
        }
        if self.l_gps <= 0.0 {
            return bad(format!("l_gps must be > 0 (got {})", self.l_gps));
        }
        if self.cruise_speed <= 0.0 {
            return bad(format!(
                "cruise_speed must be > 0 (got {})",
                self.cruise_speed
            ));
        }
        Ok(())
    }

    /// Checks the profile against the deepest point of a sawtooth element.
    pub fn validate_for_depth(&self, z_max: f64) -> Result<(), RouteError> {
        self.validate()?;
        if self.z_min >= z_max {
            return Err(RouteError::InvalidProfile(format!(
                "z_min ({}) must be shallower than z_max ({z_max})",
                self.z_min
            )));
        }
        let needed = 2.0 * self.z_min + 2.0 * self.half_cycle_track(z_max);
        if self.d_dive < needed {
            return Err(RouteError::InvalidProfile(format!(
                "d_dive ({}) is shorter than one dive cycle with pivots ({needed:.3} m)",
                self.d_dive
            )));
        }
        Ok(())
    }

    pub fn dive_slope(&self) -> f64 {
        self.alpha_dive.to_radians().tan()
    }

    /// Horizontal distance of one descent (or ascent) between `z_min` and `z_max`.
    pub fn half_cycle_horizontal(&self, z_max: f64) -> f64 {
        (z_max - self.z_min) / self.dive_slope()
    }

    /// Along-track (3D) length of one descent between `z_min` and `z_max`.
    pub fn half_cycle_track(&self, z_max: f64) -> f64 {
        (z_max - self.z_min) / self.alpha_dive.to_radians().sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointKind {
    Track,
    ArcPoint,
    /// Smoothing point `d_arc` before or after a turn.
    ArcTransition,
    /// Handover point at `z_min` between vertical and diagonal motion.
    SubmergePivot,
    SurfaceStart,
    SurfaceEnd,
}

impl WaypointKind {
    pub const ALL: [WaypointKind; 6] = [
        WaypointKind::Track,
        WaypointKind::ArcPoint,
        WaypointKind::ArcTransition,
        WaypointKind::SubmergePivot,
        WaypointKind::SurfaceStart,
        WaypointKind::SurfaceEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WaypointKind::Track => "track",
            WaypointKind::ArcPoint => "arc_point",
            WaypointKind::ArcTransition => "arc_transition",
            WaypointKind::SubmergePivot => "submerge_pivot",
            WaypointKind::SurfaceStart => "surface_start",
            WaypointKind::SurfaceEnd => "surface_end",
        }
    }
}

impl fmt::Display for WaypointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WaypointKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WaypointKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown waypoint kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub kind: WaypointKind,
    pub speed: f64,
}

impl Waypoint {
    pub fn xy(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn horizontal_dist(&self, o: &Waypoint) -> f64 {
        self.xy().dist(o.xy())
    }

    pub fn dist3(&self, o: &Waypoint) -> f64 {
        let h = self.horizontal_dist(o);
        h.hypot(self.z - o.z)
    }

    /// Same horizontal position, different depth.
    pub fn is_vertical_to(&self, o: &Waypoint) -> bool {
        self.horizontal_dist(o) <= S_EPS && self.z != o.z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub waypoints: Vec<Waypoint>,
    pub horizontal_length: f64,
    /// Inclusive waypoint index ranges from each descent pivot to the matching
    /// ascent pivot.
    pub submerged_segments: Vec<(usize, usize)>,
}

impl Route {
    pub fn from_waypoints(waypoints: Vec<Waypoint>) -> Self {
        let horizontal_length = waypoints
            .windows(2)
            .map(|w| w[0].horizontal_dist(&w[1]))
            .sum();
        let mut submerged_segments = Vec::new();
        let mut start = None;
        for (i, w) in waypoints.iter().enumerate() {
            match start {
                None if w.z > 0.0 => start = Some(i),
                Some(s) if w.z == 0.0 => {
                    submerged_segments.push((s, i - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            submerged_segments.push((s, waypoints.len() - 1));
        }
        Self {
            waypoints,
            horizontal_length,
            submerged_segments,
        }
    }

    pub fn surfacing_count(&self) -> usize {
        self.waypoints
            .iter()
            .filter(|w| w.kind == WaypointKind::SurfaceStart)
            .count()
    }

    pub fn max_depth(&self) -> f64 {
        self.waypoints.iter().map(|w| w.z).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouteError {
    #[error("invalid route profile: {0}")]
    InvalidProfile(String),
    #[error("invalid mission plan: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidPlan(Vec<Violation>),
    #[error("degenerate arc: {0}")]
    DegenerateArc(String),
    #[error("d_arc ({d_arc} m) must be shorter than half the adjoining leg ({leg_length} m)")]
    TransitionTooLong { d_arc: f64, leg_length: f64 },
    #[error("element {element}: depth {z} m lies between the surface and z_min ({z_min} m)")]
    DepthAboveHandover { element: usize, z: f64, z_min: f64 },
    #[error("element {element}: {message}")]
    Degenerate { element: usize, message: String },
    #[error("route file: {0}")]
    Format(String),
}

/// One piece of a horizontal path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentShape {
    Line {
        from: Point2,
        to: Point2,
    },
    /// Points are `center + radius * (cos a, sin a)` for `a` from
    /// `start_angle` over `sweep` (radians, signed).
    Arc {
        center: Point2,
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl SegmentShape {
    pub fn start(&self) -> Point2 {
        match *self {
            SegmentShape::Line { from, .. } => from,
            SegmentShape::Arc {
                center,
                radius,
                start_angle,
                ..
            } => polar(center, radius, start_angle),
        }
    }

    pub fn end(&self) -> Point2 {
        match *self {
            SegmentShape::Line { to, .. } => to,
            SegmentShape::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => polar(center, radius, start_angle + sweep),
        }
    }

    /// Exact length (arc length for arcs).
    pub fn length(&self) -> f64 {
        match *self {
            SegmentShape::Line { from, to } => from.dist(to),
            SegmentShape::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }
}

fn polar(center: Point2, radius: f64, angle: f64) -> Point2 {
    let (s, c) = angle.sin_cos();
    Point2::new(center.x + radius * c, center.y + radius * s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSegment {
    pub shape: SegmentShape,
    /// Kind of the waypoint emitted at the segment end.
    pub end_kind: WaypointKind,
    /// Exact end point; arcs snap to this instead of the trigonometric value.
    pub end: Point2,
}

/// Depth-free horizontal path.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizontalPath {
    pub start: Point2,
    pub segments: Vec<PathSegment>,
}

impl HorizontalPath {
    pub fn length(&self) -> f64 {
        self.segments.iter().map(|s| s.shape.length()).sum()
    }

    pub fn arc_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s.shape, SegmentShape::Arc { .. }))
            .count()
    }

    fn rotated(&self, pivot: Point2, angle: f64) -> HorizontalPath {
        let rot = |p: Point2| p.rotate_about(pivot, angle);
        HorizontalPath {
            start: rot(self.start),
            segments: self
                .segments
                .iter()
                .map(|seg| PathSegment {
                    shape: match seg.shape {
                        SegmentShape::Line { from, to } => SegmentShape::Line {
                            from: rot(from),
                            to: rot(to),
                        },
                        SegmentShape::Arc {
                            center,
                            radius,
                            start_angle,
                            sweep,
                        } => SegmentShape::Arc {
                            center: rot(center),
                            radius,
                            start_angle: start_angle + angle,
                            sweep,
                        },
                    },
                    end_kind: seg.end_kind,
                    end: rot(seg.end),
                })
                .collect(),
        }
    }
}

/// Builds the legs and turns of a meander.
pub fn expand_meander(m: &MeanderElement) -> Result<HorizontalPath, RouteError> {
    let plan_check = MissionPlan {
        name: String::new(),
        origin_lat: 0.0,
        origin_lon: 0.0,
        elements: vec![
            MissionElement::Initial { x: 0.0, y: 0.0 },
            MissionElement::Meander(*m),
            MissionElement::Final { x: 0.0, y: 0.0 },
        ],
    };
    let violations = validate_plan(&plan_check);
    if !violations.is_empty() {
        return Err(RouteError::InvalidPlan(violations));
    }

    use std::f64::consts::FRAC_PI_2;
    use std::f64::consts::PI;

    let start = Point2::new(m.x_meander, m.y_meander);
    let radius = m.d_leg / 2.0;
    let mut segments = Vec::new();
    for k in 0..m.n_legs {
        let offset = f64::from(k) * m.d_leg;
        let (x0, x1) = if k % 2 == 0 {
            (0.0, m.l_leg)
        } else {
            (m.l_leg, 0.0)
        };
        let from = Point2::new(start.x + x0, start.y + offset);
        let to = Point2::new(start.x + x1, start.y + offset);
        let last = k + 1 == m.n_legs;
        segments.push(PathSegment {
            shape: SegmentShape::Line { from, to },
            end_kind: if last {
                WaypointKind::Track
            } else {
                WaypointKind::ArcPoint
            },
            end: to,
        });
        if !last {
            let sweep = if k % 2 == 0 { PI } else { -PI };
            segments.push(PathSegment {
                shape: SegmentShape::Arc {
                    center: Point2::new(to.x, to.y + radius),
                    radius,
                    start_angle: -FRAC_PI_2,
                    sweep,
                },
                end_kind: WaypointKind::ArcPoint,
                end: Point2::new(to.x, to.y + m.d_leg),
            });
        }
    }
    let path = HorizontalPath { start, segments };
    Ok(path.rotated(start, m.theta_meander.to_radians()))
}

/// Samples an arc at equal angular steps no larger than `alpha_arc`
/// (all angles in radians). Both endpoints are included.
pub fn discretize_arc(
    center: Point2,
    radius: f64,
    start_angle: f64,
    end_angle: f64,
    alpha_arc: f64,
) -> Result<Vec<Point2>, RouteError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(RouteError::DegenerateArc(format!(
            "radius must be > 0 (got {radius})"
        )));
    }
    if !(alpha_arc > 0.0) || !alpha_arc.is_finite() {
        return Err(RouteError::DegenerateArc(format!(
            "angular step must be > 0 (got {alpha_arc})"
        )));
    }
    let sweep = end_angle - start_angle;
    if !sweep.is_finite() || sweep.abs() < 1e-12 {
        return Err(RouteError::DegenerateArc("zero sweep".into()));
    }
    let steps = arc_steps(sweep, alpha_arc);
    let step = sweep / steps as f64;
    Ok((0..=steps)
        .map(|i| {
            let a = if i == steps {
                end_angle
            } else {
                start_angle + step * i as f64
            };
            polar(center, radius, a)
        })
        .collect())
}

fn arc_steps(sweep: f64, alpha_arc: f64) -> usize {
    ((sweep.abs() / alpha_arc) - 1e-9).ceil().max(1.0) as usize
}

/// Splits every leg adjoining a turn so that an `ArcTransition` point sits
/// `d_arc` before the turn start and `d_arc` after the turn end. With
/// `d_arc == 0` the turn endpoints themselves become the transition points.
pub fn insert_arc_transitions(
    path: &HorizontalPath,
    d_arc: f64,
) -> Result<HorizontalPath, RouteError> {
    if !(d_arc >= 0.0) {
        return Err(RouteError::InvalidProfile(format!(
            "d_arc must be >= 0 (got {d_arc})"
        )));
    }
    let is_arc = |i: usize| {
        path.segments
            .get(i)
            .is_some_and(|s| matches!(s.shape, SegmentShape::Arc { .. }))
    };
    let mut out = Vec::with_capacity(path.segments.len() + 4);
    for (i, seg) in path.segments.iter().enumerate() {
        let SegmentShape::Line { from, to } = seg.shape else {
            let mut seg = *seg;
            if d_arc == 0.0 && !is_arc(i + 1) && i + 1 < path.segments.len() {
                seg.end_kind = WaypointKind::ArcTransition;
            }
            out.push(seg);
            continue;
        };
        let after_arc = i > 0 && is_arc(i - 1);
        let before_arc = is_arc(i + 1);
        let len = from.dist(to);
        if (after_arc || before_arc) && d_arc >= len / 2.0 {
            return Err(RouteError::TransitionTooLong {
                d_arc,
                leg_length: len,
            });
        }
        let mut cursor = from;
        if after_arc && d_arc > 0.0 {
            let p = from.lerp(to, d_arc / len);
            out.push(PathSegment {
                shape: SegmentShape::Line {
                    from: cursor,
                    to: p,
                },
                end_kind: WaypointKind::ArcTransition,
                end: p,
            });
            cursor = p;
        }
        if before_arc && d_arc > 0.0 {
            let p = from.lerp(to, 1.0 - d_arc / len);
            out.push(PathSegment {
                shape: SegmentShape::Line {
                    from: cursor,
                    to: p,
                },
                end_kind: WaypointKind::ArcTransition,
                end: p,
            });
            cursor = p;
        }
        let end_kind = if before_arc && d_arc == 0.0 {
            WaypointKind::ArcTransition
        } else {
            seg.end_kind
        };
        out.push(PathSegment {
            shape: SegmentShape::Line { from: cursor, to },
            end_kind,
            end: to,
        });
    }
    Ok(HorizontalPath {
        start: path.start,
        segments: out,
    })
}

/// Planar waypoint with its cumulative chord distance from the path start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPoint {
    pub p: Point2,
    pub kind: WaypointKind,
    pub s: f64,
}

/// Polyline approximation of a horizontal path; arcs become chords.
pub fn flatten_path(
    path: &HorizontalPath,
    alpha_arc_deg: f64,
) -> Result<Vec<PlanarPoint>, RouteError> {
    let mut pts = vec![PlanarPoint {
        p: path.start,
        kind: WaypointKind::Track,
        s: 0.0,
    }];
    let mut push = |p: Point2, kind: WaypointKind| {
        let last = *pts.last().expect("non-empty");
        let d = last.p.dist(p);
        if d > S_EPS {
            pts.push(PlanarPoint {
                p,
                kind,
                s: last.s + d,
            });
        }
    };
    for seg in &path.segments {
        match seg.shape {
            SegmentShape::Line { .. } => push(seg.end, seg.end_kind),
            SegmentShape::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let arc = discretize_arc(
                    center,
                    radius,
                    start_angle,
                    start_angle + sweep,
                    alpha_arc_deg.to_radians(),
                )?;
                for p in &arc[1..arc.len() - 1] {
                    push(*p, WaypointKind::ArcPoint);
                }
                push(seg.end, seg.end_kind);
            }
        }
    }
    Ok(pts)
}

fn planar_length(pts: &[PlanarPoint]) -> f64 {
    pts.last().map_or(0.0, |p| p.s)
}

fn point_at(pts: &[PlanarPoint], s: f64) -> Point2 {
    if s <= 0.0 {
        return pts[0].p;
    }
    let last = pts[pts.len() - 1];
    if s >= last.s {
        return last.p;
    }
    let i = pts.partition_point(|p| p.s <= s);
    let (a, b) = (pts[i - 1], pts[i]);
    a.p.lerp(b.p, (s - a.s) / (b.s - a.s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DepthVertex {
    s: f64,
    z: f64,
    kind: WaypointKind,
}

/// Depth plan for one submerged-capable section.
#[derive(Debug, Clone, Copy, PartialEq)]
enum DepthProgram {
    Sawtooth { z_max: f64 },
    Level { z: f64 },
}

fn sawtooth_vertices(length: f64, profile: &RouteProfile, z_max: f64) -> Vec<DepthVertex> {
    let slope = profile.dive_slope();
    let z_min = profile.z_min;
    let h = profile.half_cycle_horizontal(z_max);
    let half_track = profile.half_cycle_track(z_max);
    let mut v = Vec::new();
    let mut s = 0.0;
    let mut first_period = true;

    loop {
        v.push(DepthVertex {
            s,
            z: 0.0,
            kind: if first_period {
                WaypointKind::Track
            } else {
                WaypointKind::SurfaceEnd
            },
        });
        v.push(DepthVertex {
            s,
            z: z_min,
            kind: WaypointKind::SubmergePivot,
        });
        let mut acc = z_min;
        let mut dived = false;
        loop {
            let rem = length - s;
            if rem <= S_EPS {
                break;
            }
            if dived && acc + z_min + half_track >= profile.d_dive {
                break;
            }
            if rem >= 2.0 * h - S_EPS {
                v.push(DepthVertex {
                    s: s + h,
                    z: z_max,
                    kind: WaypointKind::Track,
                });
                s = (s + 2.0 * h).min(length);
                v.push(DepthVertex {
                    s,
                    z: z_min,
                    kind: WaypointKind::Track,
                });
                acc += 2.0 * half_track;
            } else {
                let hh = rem / 2.0;
                let peak = z_min + hh * slope;
                v.push(DepthVertex {
                    s: s + hh,
                    z: peak,
                    kind: WaypointKind::Track,
                });
                s = length;
                v.push(DepthVertex {
                    s,
                    z: z_min,
                    kind: WaypointKind::Track,
                });
                acc += 2.0 * hh.hypot(peak - z_min);
            }
            dived = true;
        }
        v.last_mut().expect("pivot pushed").kind = WaypointKind::SubmergePivot;
        v.push(DepthVertex {
            s,
            z: 0.0,
            kind: WaypointKind::SurfaceStart,
        });
        first_period = false;

        // Surface run, then dive again only if a full cycle still fits.
        if length - s <= profile.l_gps + 2.0 * h - S_EPS {
            break;
        }
        s += profile.l_gps;
    }
    v
}

fn level_vertices(length: f64, profile: &RouteProfile, z: f64) -> Vec<DepthVertex> {
    let z_min = profile.z_min;
    let mut v = vec![
        DepthVertex {
            s: 0.0,
            z: 0.0,
            kind: WaypointKind::Track,
        },
        DepthVertex {
            s: 0.0,
            z: z_min,
            kind: WaypointKind::SubmergePivot,
        },
    ];
    let h = (z - z_min) / profile.dive_slope();
    if h > S_EPS {
        if length >= 2.0 * h {
            v.push(DepthVertex {
                s: h,
                z,
                kind: WaypointKind::Track,
            });
            if length - 2.0 * h > S_EPS {
                v.push(DepthVertex {
                    s: length - h,
                    z,
                    kind: WaypointKind::Track,
                });
            }
        } else {
            let hh = length / 2.0;
            v.push(DepthVertex {
                s: hh,
                z: z_min + hh * profile.dive_slope(),
                kind: WaypointKind::Track,
            });
        }
    }
    v.push(DepthVertex {
        s: length,
        z: z_min,
        kind: WaypointKind::SubmergePivot,
    });
    v.push(DepthVertex {
        s: length,
        z: 0.0,
        kind: WaypointKind::SurfaceStart,
    });
    v
}

fn depth_at(vertices: &[DepthVertex], s: f64) -> f64 {
    // Last vertex at or before s; vertical pairs resolve to the later one.
    let i = vertices.partition_point(|v| v.s <= s);
    if i == 0 {
        return vertices[0].z;
    }
    if i == vertices.len() {
        return vertices[i - 1].z;
    }
    let (a, b) = (vertices[i - 1], vertices[i]);
    a.z + (b.z - a.z) * (s - a.s) / (b.s - a.s)
}

fn merge_profile(pts: &[PlanarPoint], vertices: &[DepthVertex], speed: f64) -> Vec<Waypoint> {
    let mut out = Vec::with_capacity(pts.len() + vertices.len());
    let (mut i, mut j) = (0, 0);
    while i < pts.len() || j < vertices.len() {
        let take_vertex = match (pts.get(i), vertices.get(j)) {
            (Some(p), Some(v)) => {
                if (p.s - v.s).abs() <= MERGE_EPS {
                    // Same place: the depth vertex wins, the planar kind survives
                    // only where the vertex carries no event of its own.
                    let kind = if v.kind == WaypointKind::Track {
                        p.kind
                    } else {
                        v.kind
                    };
                    out.push(Waypoint {
                        x: p.p.x,
                        y: p.p.y,
                        z: v.z,
                        kind,
                        speed,
                    });
                    j += 1;
                    // A vertical pair shares one planar point.
                    while let Some(v2) =
                        vertices.get(j).filter(|v2| (v2.s - p.s).abs() <= MERGE_EPS)
                    {
                        out.push(Waypoint {
                            x: p.p.x,
                            y: p.p.y,
                            z: v2.z,
                            kind: v2.kind,
                            speed,
                        });
                        j += 1;
                    }
                    i += 1;
                    continue;
                }
                v.s < p.s
            }
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (None, None) => unreachable!(),
        };
        if take_vertex {
            let v = vertices[j];
            let p = point_at(pts, v.s);
            out.push(Waypoint {
                x: p.x,
                y: p.y,
                z: v.z,
                kind: v.kind,
                speed,
            });
            j += 1;
        } else {
            let p = pts[i];
            out.push(Waypoint {
                x: p.p.x,
                y: p.p.y,
                z: depth_at(vertices, p.s),
                kind: p.kind,
                speed,
            });
            i += 1;
        }
    }
    out
}

/// Applies the sawtooth dive profile to a flattened horizontal path.
pub fn apply_dive_profile(
    path: &[PlanarPoint],
    profile: &RouteProfile,
    z_max: f64,
) -> Result<Route, RouteError> {
    profile.validate_for_depth(z_max)?;
    if path.len() < 2 {
        return Err(RouteError::Degenerate {
            element: 0,
            message: "path needs at least two points".into(),
        });
    }
    let length = planar_length(path);
    if length < profile.half_cycle_horizontal(z_max) {
        log::warn!(
            "path of {length:.1} m is shorter than one descent ({:.1} m); emitting a single partial dive",
            profile.half_cycle_horizontal(z_max)
        );
    }
    let vertices = sawtooth_vertices(length, profile, z_max);
    Ok(Route::from_waypoints(merge_profile(
        path,
        &vertices,
        profile.cruise_speed,
    )))
}

struct RouteBuilder {
    waypoints: Vec<Waypoint>,
    speed: f64,
}

impl RouteBuilder {
    fn push(&mut self, w: Waypoint) {
        if let Some(last) = self.waypoints.last() {
            if last.horizontal_dist(&w) <= S_EPS && last.z == w.z {
                return;
            }
        }
        self.waypoints.push(w);
    }

    fn surface(&mut self, p: Point2) {
        self.push(Waypoint {
            x: p.x,
            y: p.y,
            z: 0.0,
            kind: WaypointKind::Track,
            speed: self.speed,
        });
    }

    fn cursor(&self) -> Option<Point2> {
        self.waypoints.last().map(Waypoint::xy)
    }

    fn section(&mut self, pts: &[PlanarPoint], program: DepthProgram, profile: &RouteProfile) {
        let length = planar_length(pts);
        let vertices = match program {
            DepthProgram::Sawtooth { z_max } => sawtooth_vertices(length, profile, z_max),
            DepthProgram::Level { z } => level_vertices(length, profile, z),
        };
        for w in merge_profile(pts, &vertices, self.speed) {
            self.push(w);
        }
    }

    fn surface_section(&mut self, pts: &[PlanarPoint]) {
        for p in pts {
            let mut w = Waypoint {
                x: p.p.x,
                y: p.p.y,
                z: 0.0,
                kind: p.kind,
                speed: self.speed,
            };
            if w.kind == WaypointKind::ArcTransition {
                w.kind = WaypointKind::Track;
            }
            self.push(w);
        }
    }
}

fn line_points(from: Point2, to: Point2) -> Vec<PlanarPoint> {
    vec![
        PlanarPoint {
            p: from,
            kind: WaypointKind::Track,
            s: 0.0,
        },
        PlanarPoint {
            p: to,
            kind: WaypointKind::Track,
            s: from.dist(to),
        },
    ]
}

/// Expands a whole plan into one route.
///
/// Transits between elements run on the surface. Waypoint, line and arc
/// elements with `z > 0` are flown level at `z` with vertical entry/exit
/// through `z_min`; they do not consume the `d_dive` budget.
pub fn generate_route(plan: &MissionPlan, profile: &RouteProfile) -> Result<Route, RouteError> {
    let violations = validate_plan(plan);
    if !violations.is_empty() {
        return Err(RouteError::InvalidPlan(violations));
    }
    profile.validate()?;

    let mut b = RouteBuilder {
        waypoints: Vec::new(),
        speed: profile.cruise_speed,
    };
    let check_level = |element: usize, z: f64| -> Result<(), RouteError> {
        if z > 0.0 && z < profile.z_min {
            Err(RouteError::DepthAboveHandover {
                element,
                z,
                z_min: profile.z_min,
            })
        } else {
            Ok(())
        }
    };

    for (idx, el) in plan.elements.iter().enumerate() {
        let element = idx + 1;
        match *el {
            MissionElement::Initial { x, y } | MissionElement::Final { x, y } => {
                b.surface(Point2::new(x, y))
            }
            MissionElement::Waypoint { x, y, z } => {
                check_level(element, z)?;
                let target = Point2::new(x, y);
                let from = b.cursor().unwrap_or(target);
                if z == 0.0 {
                    b.surface(target);
                } else if from.dist(target) <= S_EPS {
                    return Err(RouteError::Degenerate {
                        element,
                        message: "submerged waypoint coincides with the previous position".into(),
                    });
                } else {
                    b.section(
                        &line_points(from, target),
                        DepthProgram::Level { z },
                        profile,
                    );
                }
            }
            MissionElement::Line { x1, y1, x2, y2, z } => {
                check_level(element, z)?;
                let (from, to) = (Point2::new(x1, y1), Point2::new(x2, y2));
                b.surface(from);
                let pts = line_points(from, to);
                if z == 0.0 {
                    b.surface_section(&pts);
                } else {
                    b.section(&pts, DepthProgram::Level { z }, profile);
                }
            }
            MissionElement::Arc {
                cx,
                cy,
                radius,
                start_angle,
                end_angle,
                z,
            } => {
                check_level(element, z)?;
                let center = Point2::new(cx, cy);
                let (a0, a1) = (start_angle.to_radians(), end_angle.to_radians());
                let path = HorizontalPath {
                    start: polar(center, radius, a0),
                    segments: vec![PathSegment {
                        shape: SegmentShape::Arc {
                            center,
                            radius,
                            start_angle: a0,
                            sweep: a1 - a0,
                        },
                        end_kind: WaypointKind::ArcPoint,
                        end: polar(center, radius, a1),
                    }],
                };
                let mut pts = flatten_path(&path, profile.alpha_arc)?;
                pts[0].kind = WaypointKind::ArcPoint;
                b.surface(path.start);
                if z == 0.0 {
                    b.surface_section(&pts);
                } else {
                    b.section(&pts, DepthProgram::Level { z }, profile);
                }
            }
            MissionElement::Meander(m) => {
                profile.validate_for_depth(m.z_max)?;
                let path = insert_arc_transitions(&expand_meander(&m)?, profile.d_arc)?;
                let pts = flatten_path(&path, profile.alpha_arc)?;
                b.surface(path.start);
                b.section(&pts, DepthProgram::Sawtooth { z_max: m.z_max }, profile);
            }
        }
    }
    Ok(Route::from_waypoints(b.waypoints))
}

/// Sum of 3D segment lengths; vertical transitions count as `|dz|`.
pub fn route_track_length(route: &Route) -> f64 {
    route.waypoints.windows(2).map(|w| w[0].dist3(&w[1])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RouteSummary {
    pub waypoints: usize,
    pub horizontal_length: f64,
    pub track_length: f64,
    pub surfacings: usize,
    pub max_depth: f64,
}

pub fn summarize(route: &Route) -> RouteSummary {
    RouteSummary {
        waypoints: route.waypoints.len(),
        horizontal_length: route.horizontal_length,
        track_length: route_track_length(route),
        surfacings: route.surfacing_count(),
        max_depth: route.max_depth(),
    }
}

/// Checks the geometric route invariants for a sawtooth route whose deepest
/// element reaches `z_max`. Returns one message per violation.
pub fn audit_route(route: &Route, profile: &RouteProfile, z_max: f64) -> Vec<String> {
    let mut out = Vec::new();
    let wps = &route.waypoints;
    let slope = profile.dive_slope();
    for (i, w) in wps.iter().enumerate() {
        if !(w.z >= 0.0 && w.z <= z_max) {
            out.push(format!("waypoint {i}: depth {} outside [0, {z_max}]", w.z));
        }
        match w.kind {
            WaypointKind::SurfaceStart | WaypointKind::SurfaceEnd if w.z != 0.0 => {
                out.push(format!("waypoint {i}: {} at depth {}", w.kind, w.z));
            }
            WaypointKind::SubmergePivot if w.z != profile.z_min => {
                out.push(format!("waypoint {i}: pivot at depth {} != z_min", w.z));
            }
            _ => {}
        }
    }
    for (i, pair) in wps.windows(2).enumerate() {
        let dh = pair[0].horizontal_dist(&pair[1]);
        let dz = (pair[1].z - pair[0].z).abs();
        if dh <= S_EPS {
            if dz == 0.0 {
                out.push(format!("waypoints {i}/{}: coincident", i + 1));
            }
        } else if dz > slope * dh * (1.0 + 1e-9) + 1e-12 {
            out.push(format!(
                "segment {i}: slope {:.6} exceeds tan(alpha_dive) {slope:.6}",
                dz / dh
            ));
        }
    }
    let half_track = profile.half_cycle_track(z_max);
    let mut submerged_since: Option<(usize, f64)> = None;
    let mut surface_from: Option<(usize, f64)> = None;
    for i in 0..wps.len() {
        if i > 0 {
            let d3 = wps[i - 1].dist3(&wps[i]);
            let dh = wps[i - 1].horizontal_dist(&wps[i]);
            if let Some((_, acc)) = submerged_since.as_mut() {
                *acc += d3;
            }
            if let Some((_, acc)) = surface_from.as_mut() {
                *acc += dh;
            }
        }
        let w = wps[i];
        if w.z == 0.0 && i + 1 < wps.len() && wps[i + 1].z > 0.0 {
            submerged_since = Some((i, 0.0));
        }
        if w.kind == WaypointKind::SurfaceStart {
            if let Some((start, acc)) = submerged_since.take() {
                if acc > profile.d_dive + half_track + 1e-9 {
                    out.push(format!(
                        "waypoints {start}..{i}: submerged {acc:.3} m exceeds d_dive + half cycle ({:.3} m)",
                        profile.d_dive + half_track
                    ));
                }
            }
            surface_from = Some((i, 0.0));
        }
        if w.kind == WaypointKind::SurfaceEnd {
            match surface_from.take() {
                Some((start, acc)) if acc < profile.l_gps - 1e-9 => {
                    out.push(format!(
                        "waypoints {start}..{i}: surface run {acc:.3} m shorter than l_gps"
                    ));
                }
                Some(_) => {}
                None => out.push(format!("waypoint {i}: surface end without surface start")),
            }
        }
        if w.z > 0.0 {
            surface_from = None;
        }
    }
    if (route.horizontal_length
        - wps
            .windows(2)
            .map(|w| w[0].horizontal_dist(&w[1]))
            .sum::<f64>())
    .abs()
        > 1e-9 * route.horizontal_length.max(1.0)
    {
        out.push("horizontal_length does not match the waypoint chords".into());
    }
    out
}

pub const ROUTE_CSV_HEADER: [&str; 6] = ["index", "x", "y", "z", "kind", "speed"];

/// Writes `index,x,y,z,kind,speed` rows; floats use shortest round-trip form.
pub fn write_route_csv<W: Write>(route: &Route, w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(ROUTE_CSV_HEADER)?;
    for (i, p) in route.waypoints.iter().enumerate() {
        wr.write_record([
            i.to_string(),
            p.x.to_string(),
            p.y.to_string(),
            p.z.to_string(),
            p.kind.to_string(),
            p.speed.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_route_csv<R: Read>(r: R) -> Result<Route, RouteError> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd
        .headers()
        .map_err(|e| RouteError::Format(e.to_string()))?
        .clone();
    if header.iter().ne(ROUTE_CSV_HEADER) {
        return Err(RouteError::Format(format!("unexpected header {header:?}")));
    }
    let mut waypoints = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| RouteError::Format(e.to_string()))?;
        let num = |i: usize| -> Result<f64, RouteError> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| RouteError::Format(format!("row {}: {e}", row + 1)))
        };
        if rec[0].parse::<usize>().ok() != Some(row) {
            return Err(RouteError::Format(format!(
                "row {}: index out of sequence",
                row + 1
            )));
        }
        waypoints.push(Waypoint {
            x: num(1)?,
            y: num(2)?,
            z: num(3)?,
            kind: rec[4].parse().map_err(RouteError::Format)?,
            speed: num(5)?,
        });
    }
    Ok(Route::from_waypoints(waypoints))
}

/// Surface projection as a GeoJSON `Feature` with a `LineString`.
pub fn route_geojson(route: &Route, origin: GeoOrigin, name: &str) -> serde_json::Value {
    let mut coords: Vec<[f64; 2]> = Vec::new();
    for w in &route.waypoints {
        let (lat, lon) = origin.to_lat_lon(w.x, w.y);
        if coords.last() != Some(&[lon, lat]) {
            coords.push([lon, lat]);
        }
    }
    serde_json::json!({
        "type": "Feature",
        "properties": {
            "name": name,
            "waypoints": route.waypoints.len(),
            "horizontal_length_m": route.horizontal_length,
            "surfacings": route.surfacing_count(),
        },
        "geometry": { "type": "LineString", "coordinates": coords },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn meander(n_legs: u32, l_leg: f64, d_leg: f64, theta: f64) -> MeanderElement {
        MeanderElement {
            x_meander: 0.0,
            y_meander: 0.0,
            z_max: 20.0,
            theta_meander: theta,
            l_leg,
            d_leg,
            n_legs,
        }
    }

    fn close(a: Point2, b: Point2, tol: f64) -> bool {
        a.dist(b) <= tol
    }

    #[test]
    fn single_leg_has_no_arcs() {
        let p = expand_meander(&meander(1, 150.0, 20.0, 0.0)).unwrap();
        assert_eq!(p.segments.len(), 1);
        assert_eq!(
            p.segments[0].shape,
            SegmentShape::Line {
                from: Point2::new(0.0, 0.0),
                to: Point2::new(150.0, 0.0)
            }
        );
    }

    #[test]
    fn two_leg_geometry_by_hand() {
        let p = expand_meander(&meander(2, 100.0, 20.0, 0.0)).unwrap();
        assert_eq!(p.segments.len(), 3);
        assert_eq!(
            p.segments[0].shape,
            SegmentShape::Line {
                from: Point2::new(0.0, 0.0),
                to: Point2::new(100.0, 0.0)
            }
        );
        match p.segments[1].shape {
            SegmentShape::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                assert_eq!(center, Point2::new(100.0, 10.0));
                assert_eq!(radius, 10.0);
                assert!(close(
                    p.segments[1].shape.start(),
                    Point2::new(100.0, 0.0),
                    1e-12
                ));
                assert!(close(
                    p.segments[1].shape.end(),
                    Point2::new(100.0, 20.0),
                    1e-12
                ));
                // Turn bulges away from the legs.
                assert!(close(
                    polar(center, radius, start_angle + sweep / 2.0),
                    Point2::new(110.0, 10.0),
                    1e-12
                ));
            }
            other => panic!("expected arc, got {other:?}"),
        }
        assert_eq!(
            p.segments[2].shape,
            SegmentShape::Line {
                from: Point2::new(100.0, 20.0),
                to: Point2::new(0.0, 20.0)
            }
        );
    }

    #[test]
    fn rotation_by_90_matches_rotated_points() {
        let mut m = meander(3, 80.0, 16.0, 0.0);
        m.x_meander = 12.0;
        m.y_meander = -7.0;
        let base = flatten_path(&expand_meander(&m).unwrap(), 30.0).unwrap();
        m.theta_meander = 90.0;
        let rot = flatten_path(&expand_meander(&m).unwrap(), 30.0).unwrap();
        let pivot = Point2::new(12.0, -7.0);
        assert_eq!(base.len(), rot.len());
        for (a, b) in base.iter().zip(&rot) {
            assert!(
                close(a.p.rotate_about(pivot, PI / 2.0), b.p, 1e-9),
                "{a:?} vs {b:?}"
            );
        }
        // theta = 90 turns the first leg East.
        assert!(close(rot[1].p, Point2::new(12.0, 73.0), 1e-9));
    }

    #[test]
    fn arc_exact_steps() {
        let pts = discretize_arc(Point2::new(0.0, 0.0), 1.0, 0.0, PI, PI / 4.0).unwrap();
        assert_eq!(pts.len(), 5);
    }

    #[test]
    fn arc_ceil_rounding() {
        let c = Point2::new(3.0, -2.0);
        let pts = discretize_arc(c, 2.0, 0.0, PI, 50f64.to_radians()).unwrap();
        assert_eq!(pts.len(), 5);
        for (i, p) in pts.iter().enumerate() {
            let a = (i as f64) * PI / 4.0;
            assert!(close(
                *p,
                Point2::new(3.0 + 2.0 * a.cos(), -2.0 + 2.0 * a.sin()),
                1e-12
            ));
            assert!(((p.x - c.x).powi(2) + (p.y - c.y).powi(2) - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn arc_points_lie_on_circle() {
        let c = Point2::new(100.0, 10.0);
        let pts = discretize_arc(c, 10.0, -PI / 2.0, PI / 2.0, 7f64.to_radians()).unwrap();
        for p in &pts {
            assert!((p.dist(c) - 10.0).abs() < 1e-9);
        }
        assert!(close(pts[0], Point2::new(100.0, 0.0), 1e-12));
        assert!(close(*pts.last().unwrap(), Point2::new(100.0, 20.0), 1e-12));
    }

    #[test]
    fn arc_degenerate_inputs() {
        let c = Point2::new(0.0, 0.0);
        assert!(matches!(
            discretize_arc(c, 1.0, 0.3, 0.3, 0.1),
            Err(RouteError::DegenerateArc(_))
        ));
        assert!(discretize_arc(c, 0.0, 0.0, 1.0, 0.1).is_err());
        assert!(discretize_arc(c, 1.0, 0.0, 1.0, 0.0).is_err());
    }

    fn transitions(p: &HorizontalPath) -> Vec<Point2> {
        p.segments
            .iter()
            .filter(|s| s.end_kind == WaypointKind::ArcTransition)
            .map(|s| s.end)
            .collect()
    }

    #[test]
    fn transition_points_by_hand() {
        let p = expand_meander(&meander(2, 100.0, 20.0, 0.0)).unwrap();
        let t = transitions(&insert_arc_transitions(&p, 5.0).unwrap());
        assert_eq!(t.len(), 2);
        assert!(close(t[0], Point2::new(95.0, 0.0), 1e-12));
        assert!(close(t[1], Point2::new(95.0, 20.0), 1e-12));
    }

    #[test]
    fn zero_transition_offset_hits_arc_endpoints() {
        let p = expand_meander(&meander(2, 100.0, 20.0, 0.0)).unwrap();
        let t = transitions(&insert_arc_transitions(&p, 0.0).unwrap());
        assert_eq!(t, vec![Point2::new(100.0, 0.0), Point2::new(100.0, 20.0)]);
    }

    #[test]
    fn transition_too_long() {
        let p = expand_meander(&meander(2, 100.0, 20.0, 0.0)).unwrap();
        assert!(matches!(
            insert_arc_transitions(&p, 50.0),
            Err(RouteError::TransitionTooLong { .. })
        ));
        // Middle legs adjoin two turns; they still only need d_arc < l_leg / 2.
        let p = expand_meander(&meander(3, 100.0, 20.0, 0.0)).unwrap();
        assert!(insert_arc_transitions(&p, 49.0).is_ok());
    }

    fn straight_path(len: f64) -> Vec<PlanarPoint> {
        line_points(Point2::new(0.0, 0.0), Point2::new(len, 0.0))
    }

    #[test]
    fn sawtooth_cycle_length_matches_closed_form() {
        let profile = RouteProfile {
            d_dive: 1000.0,
            ..RouteProfile::default()
        };
        let route = apply_dive_profile(&straight_path(300.0), &profile, 20.0).unwrap();
        let bottoms: Vec<_> = route.waypoints.iter().filter(|w| w.z == 20.0).collect();
        let cycle = bottoms[1].x - bottoms[0].x;
        let expected = 2.0 * 19.0 / 20f64.to_radians().tan();
        assert!((cycle - expected).abs() < 1e-9);
        assert!((expected - 104.4).abs() < 0.05);
    }

    #[test]
    fn z_min_must_be_positive() {
        let profile = RouteProfile {
            z_min: 0.0,
            alpha_dive: 45.0,
            ..RouteProfile::default()
        };
        assert!(matches!(
            apply_dive_profile(&straight_path(300.0), &profile, 20.0),
            Err(RouteError::InvalidProfile(_))
        ));
    }

    #[test]
    fn depth_reaches_but_never_exceeds_z_max() {
        let profile = RouteProfile::default();
        let route = apply_dive_profile(&straight_path(600.0), &profile, 20.0).unwrap();
        assert_eq!(route.max_depth(), 20.0);
        assert!(
            audit_route(&route, &profile, 20.0).is_empty(),
            "{:?}",
            audit_route(&route, &profile, 20.0)
        );
    }

    #[test]
    fn straight_leg_without_events_has_no_interior_track_points() {
        // Transit between two surface points: only the endpoints.
        let plan = MissionPlan {
            name: "t".into(),
            origin_lat: 0.0,
            origin_lon: 0.0,
            elements: vec![
                MissionElement::Initial { x: 0.0, y: 0.0 },
                MissionElement::Final { x: 500.0, y: 0.0 },
            ],
        };
        let route = generate_route(&plan, &RouteProfile::default()).unwrap();
        assert_eq!(route.waypoints.len(), 2);
    }

    #[test]
    fn initial_final_only() {
        let plan = MissionPlan {
            name: "t".into(),
            origin_lat: 0.0,
            origin_lon: 0.0,
            elements: vec![
                MissionElement::Initial { x: 0.0, y: 0.0 },
                MissionElement::Final { x: 10.0, y: 0.0 },
            ],
        };
        let route = generate_route(&plan, &RouteProfile::default()).unwrap();
        assert_eq!(route.waypoints.len(), 2);
        assert!(route
            .waypoints
            .iter()
            .all(|w| w.z == 0.0 && w.kind == WaypointKind::Track));
        assert_eq!(route.horizontal_length, 10.0);
    }

    #[test]
    fn short_path_gives_single_partial_dive() {
        let profile = RouteProfile::default();
        let route = apply_dive_profile(&straight_path(30.0), &profile, 20.0).unwrap();
        let depths: Vec<f64> = route.waypoints.iter().map(|w| w.z).collect();
        let peak = 1.0 + 15.0 * profile.dive_slope();
        assert_eq!(depths.len(), 5);
        assert!((depths[2] - peak).abs() < 1e-12);
        assert_eq!(route.surfacing_count(), 1);
    }

    #[test]
    fn vertical_transitions_are_coincident_pairs() {
        let profile = RouteProfile {
            d_dive: 150.0,
            ..RouteProfile::default()
        };
        let route = apply_dive_profile(&straight_path(500.0), &profile, 20.0).unwrap();
        let w = &route.waypoints;
        for i in 0..w.len() - 1 {
            if w[i + 1].kind == WaypointKind::SurfaceStart {
                assert_eq!(w[i].kind, WaypointKind::SubmergePivot);
                assert!(w[i].is_vertical_to(&w[i + 1]));
            }
            if w[i].kind == WaypointKind::SurfaceEnd {
                assert_eq!(w[i + 1].kind, WaypointKind::SubmergePivot);
                assert!(w[i].is_vertical_to(&w[i + 1]));
            }
        }
        assert!(route.surfacing_count() >= 2);
        assert!(audit_route(&route, &profile, 20.0).is_empty());
        assert_eq!(route.submerged_segments.len(), route.surfacing_count());
    }

    #[test]
    fn track_length_simple_cases() {
        let w = |x: f64, y: f64, z: f64| Waypoint {
            x,
            y,
            z,
            kind: WaypointKind::Track,
            speed: 1.0,
        };
        assert_eq!(
            route_track_length(&Route::from_waypoints(vec![
                w(0.0, 0.0, 0.0),
                w(3.0, 4.0, 0.0)
            ])),
            5.0
        );
        assert_eq!(
            route_track_length(&Route::from_waypoints(vec![
                w(1.0, 1.0, 0.0),
                w(1.0, 1.0, 1.0)
            ])),
            1.0
        );
    }

    #[test]
    fn level_element_route() {
        let plan = MissionPlan {
            name: "lvl".into(),
            origin_lat: 0.0,
            origin_lon: 0.0,
            elements: vec![
                MissionElement::Initial { x: 0.0, y: 0.0 },
                MissionElement::Line {
                    x1: 0.0,
                    y1: 0.0,
                    x2: 200.0,
                    y2: 0.0,
                    z: 5.0,
                },
                MissionElement::Final { x: 200.0, y: 0.0 },
            ],
        };
        let profile = RouteProfile::default();
        let route = generate_route(&plan, &profile).unwrap();
        assert_eq!(route.max_depth(), 5.0);
        assert!(audit_route(&route, &profile, 5.0).is_empty());
        assert_eq!(route.waypoints.last().unwrap().z, 0.0);

        let mut shallow = plan.clone();
        shallow.elements[1] = MissionElement::Line {
            x1: 0.0,
            y1: 0.0,
            x2: 200.0,
            y2: 0.0,
            z: 0.5,
        };
        assert!(matches!(
            generate_route(&shallow, &profile),
            Err(RouteError::DepthAboveHandover { .. })
        ));
    }

    #[test]
    fn route_csv_round_trip() {
        let profile = RouteProfile::default();
        let route = apply_dive_profile(&straight_path(400.0), &profile, 20.0).unwrap();
        let mut buf = Vec::new();
        write_route_csv(&route, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("index,x,y,z,kind,speed\n"));
        assert_eq!(read_route_csv(buf.as_slice()).unwrap(), route);
    }

    #[test]
    fn geojson_is_a_linestring() {
        let profile = RouteProfile::default();
        let route = apply_dive_profile(&straight_path(400.0), &profile, 20.0).unwrap();
        let g = route_geojson(&route, GeoOrigin::new(60.0, 5.0), "x");
        assert_eq!(g["geometry"]["type"], "LineString");
        assert_eq!(g["geometry"]["coordinates"][0][1], 60.0);
    }
}
