//! Desk-scale software stack for a modular water-quality AUV.
//!
//! The crate covers the full chain from a declarative mission file to a
//! closed-loop run against a simulated vehicle:
//!
//! * [`mission_plan`] parses and writes `.mis` plan files.
//! * [`route_gen`] expands meanders into 3D waypoint routes with sawtooth
//!   dive profiles and GPS surfacing legs.
//! * [`trajectory`] fits natural cubic splines through the route.
//! * [`protocol`] holds the binary telegram codec and the port abstraction
//!   (UDP or in-process loopback).
//! * [`guidance`] is the Scientific Computer: mode machine, LOS steering and
//!   PID autopilot emitting direct-mode motor setpoints.
//! * [`simulator`] is the Control Computer stand-in with reduced vehicle
//!   dynamics and a synthetic nitrate plume.
//! * [`measurement`] is the Measurement Computer: sensor cadence, sample
//!   fusion with navigation and CSV logging.
//! * [`harness`] wires the three programs together and [`analysis`] checks
//!   run logs against the system invariants.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod geo;
pub mod guidance;
pub mod harness;
pub mod keyfile;
pub mod measurement;
pub mod mission_plan;
pub mod protocol;
pub mod route_gen;
pub mod simulator;
pub mod trajectory;

pub use mission_plan::{MeanderElement, MissionElement, MissionPlan};

pub use route_gen::{Route, RouteProfile, Waypoint, WaypointKind};

pub use guidance::{ControlGains, Guidance, GuidanceConfig, GuidanceMode};
pub use protocol::Telegram;
pub use trajectory::SplineTrajectory;
