//! Mission plan data model and the `.mis` plan-file format.
//!
//! A plan is an ordered list of elements framed by an `Initial` and a `Final`
//! element. The file format is a key-value file with a `[mission]` header
//! section followed by `[element.N]` sections, `N` counting from 1:
//!
//! ```text
//! [mission]
//! name = fjord
//! origin_lat = 60.3
//! origin_lon = 5.25
//!
//! [element.1]
//! type = initial
//! x = 0
//! y = 0
//! ```
//!
//! Coordinates are local meters (x North, y East, z depth positive down).
//! Angles are degrees in the file and in these types; route generation
//! converts to radians.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyfile::{KeyFile, KeyFileError, KeyFileWriter, Section};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionPlan {
    pub name: String,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub elements: Vec<MissionElement>,
}

/// Boustrophedon survey pattern: `n_legs` parallel legs of `l_leg` meters
/// spaced `d_leg` apart, rotated by `theta_meander` about the start point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanderElement {
    pub x_meander: f64,
    pub y_meander: f64,
    pub z_max: f64,
    pub theta_meander: f64,
    pub l_leg: f64,
    pub d_leg: f64,
    pub n_legs: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MissionElement {
    Initial {
        x: f64,
        y: f64,
    },
    Final {
        x: f64,
        y: f64,
    },
    Waypoint {
        x: f64,
        y: f64,
        z: f64,
    },
    Line {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        z: f64,
    },
    Arc {
        cx: f64,
        cy: f64,
        radius: f64,
        start_angle: f64,
        end_angle: f64,
        z: f64,
    },
    Meander(MeanderElement),
}

impl MissionElement {
    pub fn type_name(&self) -> &'static str {
        match self {
            MissionElement::Initial { .. } => "initial",
            MissionElement::Final { .. } => "final",
            MissionElement::Waypoint { .. } => "waypoint",
            MissionElement::Line { .. } => "line",
            MissionElement::Arc { .. } => "arc",
            MissionElement::Meander(_) => "meander",
        }
    }

    fn numeric_fields(&self) -> Vec<(&'static str, f64)> {
        match *self {
            MissionElement::Initial { x, y } | MissionElement::Final { x, y } => {
                vec![("x", x), ("y", y)]
            }
            MissionElement::Waypoint { x, y, z } => vec![("x", x), ("y", y), ("z", z)],
            MissionElement::Line { x1, y1, x2, y2, z } => {
                vec![("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2), ("z", z)]
            }
            MissionElement::Arc {
                cx,
                cy,
                radius,
                start_angle,
                end_angle,
                z,
            } => vec![
                ("cx", cx),
                ("cy", cy),
                ("radius", radius),
                ("start_deg", start_angle),
                ("end_deg", end_angle),
                ("z", z),
            ],
            MissionElement::Meander(m) => vec![
                ("x", m.x_meander),
                ("y", m.y_meander),
                ("z_max", m.z_max),
                ("rotation_deg", m.theta_meander),
                ("leg_length", m.l_leg),
                ("leg_distance", m.d_leg),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error(transparent)]
    Format(#[from] KeyFileError),
    #[error("line {line}: unknown element type `{kind}`")]
    UnknownElementType { line: usize, kind: String },
    #[error("line {line}: unexpected section [{name}]")]
    UnexpectedSection { line: usize, name: String },
    #[error("element sections must be numbered consecutively from 1 (found {found:?})")]
    ElementIndex { found: Vec<usize> },
    #[error("missing [mission] section")]
    MissingMission,
    #[error("element order: {0}")]
    Ordering(String),
}

impl PlanError {
    /// Source line the error points at, when there is one.
    pub fn line(&self) -> Option<usize> {
        match self {
            PlanError::Format(
                KeyFileError::Syntax { line, .. }
                | KeyFileError::DuplicateSection { line, .. }
                | KeyFileError::DuplicateKey { line, .. }
                | KeyFileError::InvalidValue { line, .. }
                | KeyFileError::UnknownKey { line, .. },
            ) => Some(*line),
            PlanError::UnknownElementType { line, .. }
            | PlanError::UnexpectedSection { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// A broken plan invariant. `element` is the 1-based element index, `None`
/// for mission-level fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub element: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.element {
            Some(i) => write!(f, "element {i}: {}: {}", self.field, self.message),
            None => write!(f, "mission: {}: {}", self.field, self.message),
        }
    }
}

const ELEMENT_PREFIX: &str = "element.";

pub fn parse_plan(text: &str) -> Result<MissionPlan, PlanError> {
    let kf = KeyFile::parse(text)?;

    let mut mission = None;
    let mut indexed: Vec<(usize, &Section)> = Vec::new();
    for s in &kf.sections {
        if s.name == "mission" {
            mission = Some(s);
        } else if let Some(idx) = s
            .name
            .strip_prefix(ELEMENT_PREFIX)
            .and_then(|n| n.parse::<usize>().ok())
        {
            indexed.push((idx, s));
        } else {
            return Err(PlanError::UnexpectedSection {
                line: s.line,
                name: s.name.clone(),
            });
        }
    }
    let mission = mission.ok_or(PlanError::MissingMission)?;
    mission.deny_unknown(&["name", "origin_lat", "origin_lon"])?;

    indexed.sort_by_key(|(i, _)| *i);
    if indexed
        .iter()
        .enumerate()
        .any(|(pos, (i, _))| *i != pos + 1)
    {
        return Err(PlanError::ElementIndex {
            found: indexed.iter().map(|(i, _)| *i).collect(),
        });
    }

    let elements = indexed
        .iter()
        .map(|(_, s)| parse_element(s))
        .collect::<Result<Vec<_>, _>>()?;
    check_order(&elements).map_err(PlanError::Ordering)?;

    Ok(MissionPlan {
        name: mission.require("name")?.value.clone(),
        origin_lat: mission.finite("origin_lat")?,
        origin_lon: mission.finite("origin_lon")?,
        elements,
    })
}

fn parse_element(s: &Section) -> Result<MissionElement, PlanError> {
    let kind = s.require("type")?;
    let el = match kind.value.as_str() {
        "initial" | "final" => {
            s.deny_unknown(&["type", "x", "y"])?;
            let (x, y) = (s.finite("x")?, s.finite("y")?);
            if kind.value == "initial" {
                MissionElement::Initial { x, y }
            } else {
                MissionElement::Final { x, y }
            }
        }
        "waypoint" => {
            s.deny_unknown(&["type", "x", "y", "z"])?;
            MissionElement::Waypoint {
                x: s.finite("x")?,
                y: s.finite("y")?,
                z: s.finite("z")?,
            }
        }
        "line" => {
            s.deny_unknown(&["type", "x1", "y1", "x2", "y2", "z"])?;
            MissionElement::Line {
                x1: s.finite("x1")?,
                y1: s.finite("y1")?,
                x2: s.finite("x2")?,
                y2: s.finite("y2")?,
                z: s.finite("z")?,
            }
        }
        "arc" => {
            s.deny_unknown(&["type", "cx", "cy", "radius", "start_deg", "end_deg", "z"])?;
            MissionElement::Arc {
                cx: s.finite("cx")?,
                cy: s.finite("cy")?,
                radius: s.finite("radius")?,
                start_angle: s.finite("start_deg")?,
                end_angle: s.finite("end_deg")?,
                z: s.finite("z")?,
            }
        }
        "meander" => {
            s.deny_unknown(&[
                "type",
                "x",
                "y",
                "z_max",
                "rotation_deg",
                "leg_length",
                "leg_distance",
                "n_legs",
            ])?;
            MissionElement::Meander(MeanderElement {
                x_meander: s.finite("x")?,
                y_meander: s.finite("y")?,
                z_max: s.finite("z_max")?,
                theta_meander: s.finite("rotation_deg")?,
                l_leg: s.finite("leg_length")?,
                d_leg: s.finite("leg_distance")?,
                n_legs: s.parse("n_legs")?,
            })
        }
        other => {
            return Err(PlanError::UnknownElementType {
                line: kind.line,
                kind: other.to_string(),
            });
        }
    };
    Ok(el)
}

fn check_order(elements: &[MissionElement]) -> Result<(), String> {
    match (elements.first(), elements.last()) {
        (Some(MissionElement::Initial { .. }), Some(MissionElement::Final { .. }))
            if elements.len() >= 2 => {}
        (Some(MissionElement::Initial { .. }), _) => {
            return Err("last element must be `final`".into())
        }
        (Some(_), _) => return Err("first element must be `initial`".into()),
        (None, _) => return Err("plan has no elements; `initial` and `final` are required".into()),
    }
    let inner = &elements[1..elements.len() - 1];
    if let Some(pos) = inner.iter().position(|e| {
        matches!(
            e,
            MissionElement::Initial { .. } | MissionElement::Final { .. }
        )
    }) {
        return Err(format!(
            "element {} is `{}`; only the first and last elements may be initial/final",
            pos + 2,
            inner[pos].type_name()
        ));
    }
    Ok(())
}

pub fn serialize_plan(plan: &MissionPlan) -> String {
    let mut w = KeyFileWriter::new();
    w.section("mission")
        .kv("name", &plan.name)
        .kv("origin_lat", plan.origin_lat)
        .kv("origin_lon", plan.origin_lon);
    for (i, el) in plan.elements.iter().enumerate() {
        w.section(&format!("{ELEMENT_PREFIX}{}", i + 1))
            .kv("type", el.type_name());
        for (key, value) in el.numeric_fields() {
            w.kv(key, value);
        }
        if let MissionElement::Meander(m) = el {
            w.kv("n_legs", m.n_legs);
        }
    }
    w.finish()
}

pub fn validate_plan(plan: &MissionPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |element: Option<usize>, field: &str, message: String| {
        out.push(Violation {
            element,
            field: field.to_string(),
            message,
        });
    };

    if !(-90.0..=90.0).contains(&plan.origin_lat) {
        push(
            None,
            "origin_lat",
            format!("must be within [-90, 90] (got {})", plan.origin_lat),
        );
    }
    if !(-180.0..180.0).contains(&plan.origin_lon) {
        push(
            None,
            "origin_lon",
            format!("must be within [-180, 180) (got {})", plan.origin_lon),
        );
    }
    if let Err(msg) = check_order(&plan.elements) {
        push(None, "elements", msg);
    }

    for (i, el) in plan.elements.iter().enumerate() {
        let idx = Some(i + 1);
        for (field, v) in el.numeric_fields() {
            if !v.is_finite() {
                push(idx, field, format!("must be finite (got {v})"));
            }
        }
        match *el {
            MissionElement::Waypoint { z, .. }
            | MissionElement::Line { z, .. }
            | MissionElement::Arc { z, .. }
                if z < 0.0 =>
            {
                push(idx, "z", format!("depth must be >= 0 (got {z})"));
            }
            _ => {}
        }
        match *el {
            MissionElement::Line { x1, y1, x2, y2, .. } if x1 == x2 && y1 == y2 => {
                push(idx, "x2", "line endpoints must be distinct".into());
            }
            MissionElement::Arc {
                radius,
                start_angle,
                end_angle,
                ..
            } => {
                if radius <= 0.0 {
                    push(idx, "radius", format!("must be > 0 (got {radius})"));
                }
                if start_angle == end_angle {
                    push(idx, "end_deg", "arc sweep must be non-zero".into());
                }
            }
            MissionElement::Meander(m) => {
                if m.z_max <= 0.0 {
                    push(idx, "z_max", format!("must be > 0 (got {})", m.z_max));
                }
                if m.l_leg <= 0.0 {
                    push(idx, "leg_length", format!("must be > 0 (got {})", m.l_leg));
                }
                if m.d_leg <= 0.0 {
                    push(
                        idx,
                        "leg_distance",
                        format!("must be > 0 (got {})", m.d_leg),
                    );
                }
                if m.n_legs < 1 {
                    push(idx, "n_legs", format!("must be >= 1 (got {})", m.n_legs));
                }
            }
            _ => {}
        }
    }
    out
}
