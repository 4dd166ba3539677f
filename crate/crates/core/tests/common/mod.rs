//! Shared fixtures and independent oracles for the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use salmon_core::harness::{NetworkConfig, StackConfig, CC_TELEGRAMS};
use salmon_core::mission_plan::{MeanderElement, MissionElement, MissionPlan};
use salmon_core::protocol::{
    decode, read_telegram_log, Direction, LlcCommand, LlcError, LlcMode, LlcSetpoint,
    LlcSetpointsCWolf, LlcStatus, MotorStatus, NavData, Telegram,
};
use salmon_core::route_gen::{Route, RouteProfile, WaypointKind};
use salmon_core::trajectory::SplineTrajectory;

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

pub fn fjord_path() -> PathBuf {
    repo_path("missions/fjord.mis")
}

pub fn fjord_config() -> StackConfig {
    // Ephemeral ports on distinct loopback addresses, so parallel tests
    // never collide.
    let network = NetworkConfig {
        cc: "127.0.0.1:0".into(),
        sc: "127.0.0.2:0".into(),
        mc: "127.0.0.3:0".into(),
    };
    StackConfig {
        mission_file: Some(fjord_path()),
        network,
        ..StackConfig::default()
    }
}

/// NavData as the MC received it, rebuilt from the CC's send log. The CC
/// sends every fix twice (SC, then MC).
pub fn nav_stream(dir: &Path) -> Vec<NavData> {
    let frames = read_telegram_log(std::fs::File::open(dir.join(CC_TELEGRAMS)).unwrap()).unwrap();
    let mut out: Vec<NavData> = Vec::new();
    for f in frames.iter().filter(|f| f.direction == Direction::Sent) {
        if let Ok(Telegram::NavData(n)) = decode(&f.bytes) {
            if out.last().is_none_or(|l| l.timestamp != n.timestamp) {
                out.push(n);
            }
        }
    }
    out
}

pub fn vector(name: &str) -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/vectors")
        .join(name);
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn status(motors: [(f32, bool); 6], mode_echo: LlcMode) -> LlcStatus {
    LlcStatus {
        motors: motors.map(|(rpm, enabled)| MotorStatus { rpm, enabled }),
        mode_echo,
    }
}

/// Golden files (packed with Python's `struct`) and the values they encode.
pub fn golden_cases() -> Vec<(&'static str, Telegram)> {
    vec![
        (
            "llc_command_nocontrol.bin",
            Telegram::LlcCommand(LlcCommand {
                mode: LlcMode::NoControl,
            }),
        ),
        (
            "llc_command_direct.bin",
            Telegram::LlcCommand(LlcCommand {
                mode: LlcMode::Direct,
            }),
        ),
        (
            "nav_data.bin",
            Telegram::NavData(NavData {
                timestamp: 12.5,
                latitude: 60.3,
                longitude: 5.25,
                depth: 3.75,
                roll: 0.0,
                pitch: -0.125,
                yaw: 1.5,
                speed: 1.5,
                height_over_ground: 56.25,
                gps_fix: false,
            }),
        ),
        (
            "nav_data_surface.bin",
            Telegram::NavData(NavData {
                timestamp: 0.0,
                latitude: 60.3,
                longitude: 5.25,
                depth: 0.0,
                roll: 0.0,
                pitch: 0.0,
                yaw: -3.0,
                speed: 0.0,
                height_over_ground: 60.0,
                gps_fix: true,
            }),
        ),
        (
            "llc_setpoint.bin",
            Telegram::LlcSetpoint(LlcSetpoint {
                heading: 0.5,
                depth: 10.0,
                speed: 1.5,
            }),
        ),
        (
            "llc_setpoints_cwolf.bin",
            Telegram::LlcSetpointsCWolf(LlcSetpointsCWolf {
                pwm: [1000, -1000, 250, -250, 0, 7],
            }),
        ),
        (
            "llc_status.bin",
            Telegram::LlcStatus(status(
                [
                    (1200.0, true),
                    (-1200.0, true),
                    (0.0, false),
                    (0.0, false),
                    (300.5, true),
                    (-300.5, true),
                ],
                LlcMode::Direct,
            )),
        ),
        (
            "llc_error.bin",
            Telegram::LlcError(LlcError {
                code: 3,
                message: "controlled mode: n/a".into(),
            }),
        ),
    ]
}

fn any_f64(rng: &mut impl Rng) -> f64 {
    // Mix raw bit patterns with ordinary magnitudes; keep only finite values.
    loop {
        let v = if rng.random_bool(0.5) {
            f64::from_bits(rng.random())
        } else {
            rng.random_range(-1e6..1e6)
        };
        if v.is_finite() {
            return v;
        }
    }
}

fn mode(rng: &mut impl Rng) -> LlcMode {
    [LlcMode::NoControl, LlcMode::Controlled, LlcMode::Direct][rng.random_range(0..3)]
}

/// A random telegram satisfying the field invariants.
pub fn random_telegram(rng: &mut impl Rng) -> Telegram {
    match rng.random_range(0..6) {
        0 => Telegram::NavData(NavData {
            timestamp: any_f64(rng),
            latitude: rng.random_range(-90.0..=90.0),
            longitude: rng.random_range(-180.0..180.0),
            depth: any_f64(rng).abs(),
            roll: any_f64(rng),
            pitch: any_f64(rng),
            yaw: rng.random_range(-PI..PI),
            speed: any_f64(rng),
            height_over_ground: if rng.random_bool(0.2) {
                f64::NAN
            } else {
                any_f64(rng)
            },
            gps_fix: rng.random(),
        }),
        1 => Telegram::LlcCommand(LlcCommand { mode: mode(rng) }),
        2 => Telegram::LlcSetpoint(LlcSetpoint {
            heading: any_f64(rng),
            depth: any_f64(rng).abs(),
            speed: any_f64(rng).abs(),
        }),
        3 => Telegram::LlcSetpointsCWolf(LlcSetpointsCWolf {
            pwm: std::array::from_fn(|_| rng.random_range(-1000..=1000)),
        }),
        4 => Telegram::LlcStatus(LlcStatus {
            motors: std::array::from_fn(|_| MotorStatus {
                rpm: rng.random_range(-1e5f32..1e5),
                enabled: rng.random(),
            }),
            mode_echo: mode(rng),
        }),
        _ => {
            let n = rng.random_range(0..=80);
            let message: String = (0..n)
                .map(|_| match rng.random_range(0..4) {
                    0 => 'ø',
                    1 => '⚓',
                    _ => rng.random_range(' '..='~'),
                })
                .collect();
            let message = truncate_utf8(message, 255);
            Telegram::LlcError(LlcError {
                code: rng.random(),
                message,
            })
        }
    }
}

fn truncate_utf8(mut s: String, max: usize) -> String {
    while s.len() > max {
        s.pop();
    }
    s
}

/// Random but valid meander survey plus profile. Parameters are drawn so
/// the profile's dive budget covers at least one cycle.
pub fn random_survey(rng: &mut impl Rng) -> (MissionPlan, RouteProfile, f64) {
    let z_max = rng.random_range(4.0..40.0);
    let d_leg = rng.random_range(6.0..60.0);
    let m = MeanderElement {
        x_meander: rng.random_range(-200.0..200.0),
        y_meander: rng.random_range(-200.0..200.0),
        z_max,
        theta_meander: rng.random_range(-180.0..180.0),
        l_leg: rng.random_range(40.0..300.0),
        d_leg,
        n_legs: rng.random_range(1..=6),
    };
    let alpha_dive: f64 = rng.random_range(8.0..35.0);
    let z_min = rng.random_range(0.5..2.0);
    let half_track = (z_max - z_min) / alpha_dive.to_radians().sin();
    let profile = RouteProfile {
        alpha_arc: rng.random_range(3.0..45.0),
        d_arc: rng.random_range(0.0..(0.3 * d_leg).min(10.0)),
        z_min,
        alpha_dive,
        d_dive: 2.0 * z_min + 2.0 * half_track + rng.random_range(0.0..300.0),
        l_gps: rng.random_range(5.0..50.0),
        cruise_speed: 1.5,
    };
    let plan = MissionPlan {
        name: "random".into(),
        origin_lat: 60.3,
        origin_lon: 5.25,
        elements: vec![
            MissionElement::Initial { x: 0.0, y: 0.0 },
            MissionElement::Meander(m),
            MissionElement::Final {
                x: rng.random_range(-50.0..50.0),
                y: rng.random_range(-50.0..50.0),
            },
        ],
    };
    (plan, profile, z_max)
}

/// Dive-profile law checked from the waypoints alone: depth bounds, dive
/// slope, submerged along-track distance between surfacings and the length
/// of every surface run that is followed by another dive. Returns one line
/// per violation.
pub fn dive_law_violations(route: &Route, p: &RouteProfile, z_max: f64) -> Vec<String> {
    let w = &route.waypoints;
    let mut bad = Vec::new();
    let tan = p.alpha_dive.to_radians().tan();
    let half_cycle = (z_max - p.z_min) / p.alpha_dive.to_radians().sin();
    for (i, wp) in w.iter().enumerate() {
        if wp.z < 0.0 || wp.z > z_max + 1e-9 {
            bad.push(format!("wp {i}: depth {}", wp.z));
        }
    }
    for i in 1..w.len() {
        let h = (w[i].x - w[i - 1].x).hypot(w[i].y - w[i - 1].y);
        let dz = (w[i].z - w[i - 1].z).abs();
        if h > 1e-9 && dz > tan * h * (1.0 + 1e-9) + 1e-12 {
            bad.push(format!("seg {i}: slope {} > {tan}", dz / h));
        }
    }
    // Walk the route as alternating submerged and surfaced stretches.
    let mut submerged = 0.0;
    let mut under = false;
    let mut surface_run: Option<f64> = None;
    for i in 1..w.len() {
        let d3 = ((w[i].x - w[i - 1].x).powi(2)
            + (w[i].y - w[i - 1].y).powi(2)
            + (w[i].z - w[i - 1].z).powi(2))
        .sqrt();
        let h = (w[i].x - w[i - 1].x).hypot(w[i].y - w[i - 1].y);
        let seg_under = w[i].z > 0.0 || w[i - 1].z > 0.0;
        if seg_under {
            if let Some(run) = surface_run.take() {
                if run < p.l_gps - 1e-9 {
                    bad.push(format!("surface run of {run:.3} m ending at wp {i}"));
                }
            }
            if !under {
                under = true;
                submerged = 0.0;
            }
            submerged += d3;
        } else {
            if under {
                under = false;
                if submerged > p.d_dive + half_cycle + 1e-9 {
                    bad.push(format!("submerged {submerged:.3} m before wp {i}"));
                }
            }
            if w[i - 1].kind == WaypointKind::SurfaceStart {
                surface_run = Some(0.0);
            }
            if let Some(run) = surface_run.as_mut() {
                *run += h;
            }
        }
    }
    // A surface stretch that runs into the end of the route needs no length:
    // the mission ends there and the fix can be taken at rest.
    if under && submerged > p.d_dive + half_cycle + 1e-9 {
        bad.push(format!("route ends submerged after {submerged:.3} m"));
    }
    bad
}

/// Closed form for the horizontal meander length: straight legs plus
/// semicircular turns of diameter `d_leg`.
pub fn meander_closed_form(m: &MeanderElement) -> f64 {
    let n = m.n_legs as f64;
    n * m.l_leg + (n - 1.0) * PI * (m.d_leg / 2.0)
}

/// Random smooth-ish 3D point sequence with strictly positive spacing.
pub fn random_points(rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let n = rng.random_range(2..30);
    let mut p = [
        rng.random_range(-100.0..100.0),
        rng.random_range(-100.0..100.0),
        rng.random_range(0.0..30.0),
    ];
    let mut out = vec![p];
    for _ in 1..n {
        let step = rng.random_range(0.5..40.0);
        let a: f64 = rng.random_range(-PI..PI);
        let dz: f64 = rng.random_range(-5.0..5.0);
        p = [
            p[0] + step * a.cos(),
            p[1] + step * a.sin(),
            (p[2] + dz).max(0.0),
        ];
        out.push(p);
    }
    out
}

/// Natural spline second derivatives from a dense Gaussian elimination,
/// independent of the library's tridiagonal solver.
pub fn oracle_moments(knots: &[f64], y: &[f64]) -> Vec<f64> {
    let n = knots.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    a[0][0] = 1.0;
    a[n - 1][n - 1] = 1.0;
    for i in 1..n - 1 {
        let (h0, h1) = (knots[i] - knots[i - 1], knots[i + 1] - knots[i]);
        a[i][i - 1] = h0;
        a[i][i] = 2.0 * (h0 + h1);
        a[i][i + 1] = h1;
        a[i][n] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                let pivot_row = a[col].clone();
                for (x, p) in a[r][col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * p;
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

pub fn oracle_eval(knots: &[f64], y: &[f64], m: &[f64], s: f64) -> f64 {
    let i = knots
        .partition_point(|k| *k <= s)
        .saturating_sub(1)
        .min(knots.len() - 2);
    let h = knots[i + 1] - knots[i];
    let (a, b) = ((knots[i + 1] - s) / h, (s - knots[i]) / h);
    a * y[i] + b * y[i + 1] + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) * h * h / 6.0
}

pub struct Quality {
    pub knot_residual: f64,
    pub c2_mismatch: f64,
    pub c1_mismatch: f64,
    pub tangent_error: f64,
    pub oracle_error: f64,
}

/// Worst-case figures over one trajectory.
pub fn spline_quality(pts: &[[f64; 3]], rng: &mut impl Rng) -> Quality {
    let sp = SplineTrajectory::fit(pts).unwrap();
    let k = sp.knots();
    let mut q = Quality {
        knot_residual: 0.0,
        c2_mismatch: 0.0,
        c1_mismatch: 0.0,
        tangent_error: 0.0,
        oracle_error: 0.0,
    };
    for (i, p) in pts.iter().enumerate() {
        let e = sp.eval(k[i]).unwrap();
        q.knot_residual = q
            .knot_residual
            .max((0..3).map(|d| (e[d] - p[d]).abs()).fold(0.0, f64::max));
    }
    for i in 1..pts.len() - 1 {
        let (l2, r2) = (sp.second_derivative_left(i), sp.second_derivative_right(i));
        let (l1, r1) = (sp.first_derivative_left(i), sp.first_derivative_right(i));
        for d in 0..3 {
            q.c2_mismatch = q.c2_mismatch.max((l2[d] - r2[d]).abs());
            q.c1_mismatch = q.c1_mismatch.max((l1[d] - r1[d]).abs());
        }
    }
    let moments: Vec<Vec<f64>> = (0..3)
        .map(|d| oracle_moments(k, &pts.iter().map(|p| p[d]).collect::<Vec<_>>()))
        .collect();
    let len = sp.total_length();
    for _ in 0..50 {
        let h = 1e-4;
        let s = rng.random_range(h..len - h);
        let d = sp.derivative(s).unwrap();
        let (a, b) = (sp.eval(s + h).unwrap(), sp.eval(s - h).unwrap());
        let fd: Vec<f64> = (0..3).map(|i| (a[i] - b[i]) / (2.0 * h)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = (0..3).map(|i| (d[i] - fd[i]).powi(2)).sum::<f64>().sqrt() / norm;
        q.tangent_error = q.tangent_error.max(err);
        let e = sp.eval(s).unwrap();
        for dim in 0..3 {
            let y: Vec<f64> = pts.iter().map(|p| p[dim]).collect();
            let o = oracle_eval(k, &y, &moments[dim], s);
            q.oracle_error = q.oracle_error.max((o - e[dim]).abs());
        }
    }
    q
}
