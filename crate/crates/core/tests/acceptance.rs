//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on
//! any failure. Run with `cargo test --test acceptance`.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salmon_core::analysis::analyze_dir;
use salmon_core::harness::*;
use salmon_core::measurement::{Channel, MeasurementComputer, MAX_NAV_AGE};
use salmon_core::mission_plan::{MeanderElement, MissionElement, MissionPlan};
use salmon_core::protocol::{decode, encode, LlcSetpointsCWolf};
use salmon_core::route_gen::{
    expand_meander, flatten_path, generate_route, RouteError, RouteProfile,
};
use salmon_core::simulator::{step_dynamics, VehicleParams, VehicleState};
use salmon_core::GuidanceMode;
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, t: Duration) -> Result<(), String> {
    check(t < limit, || {
        format!("took {:.2} s, limit {} s", t.as_secs_f64(), limit.as_secs())
    })
}

fn protocol() -> Outcome {
    let start = Instant::now();
    for (file, t) in common::golden_cases() {
        let bytes = common::vector(file);
        check(encode(&t).map_err(|e| e.to_string())? == bytes, || {
            format!("{file}: encoder differs")
        })?;
        check(decode(&bytes).ok() == Some(t), || {
            format!("{file}: decoder differs")
        })?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    for _ in 0..100_000 {
        let t = common::random_telegram(&mut rng);
        let ok = encode(&t)
            .ok()
            .and_then(|b| decode(&b).ok())
            .is_some_and(|back| back == t);
        failures += usize::from(!ok);
    }
    check(failures == 0, || format!("{failures} round-trip failures"))?;
    // Half random byte strings, half valid telegrams with a few bytes hit.
    let mut rejected = 0;
    for i in 0..100_000 {
        let bytes = if i % 2 == 0 {
            let n = rng.random_range(0..128);
            (0..n).map(|_| rng.random()).collect::<Vec<u8>>()
        } else {
            let mut b = encode(&common::random_telegram(&mut rng)).unwrap();
            for _ in 0..rng.random_range(1..4) {
                let j = rng.random_range(0..b.len());
                b[j] = rng.random();
            }
            if rng.random_bool(0.2) {
                b.truncate(rng.random_range(0..b.len()));
            }
            b
        };
        let r = std::panic::catch_unwind(|| decode(&bytes).is_err());
        match r {
            Ok(err) => rejected += usize::from(err),
            Err(_) => return Err(format!("decoder panicked on {bytes:02x?}")),
        }
    }
    within(Duration::from_secs(30), start.elapsed())?;
    Ok(format!(
        "1e5 round trips, 8 golden vectors, 1e5 fuzzed ({rejected} rejected)"
    ))
}

fn flat_length(m: &MeanderElement, alpha_arc: f64) -> f64 {
    let pts = flatten_path(&expand_meander(m).unwrap(), alpha_arc).unwrap();
    pts.windows(2).map(|w| w[0].p.dist(w[1].p)).sum()
}

fn meander_geometry() -> Outcome {
    let start = Instant::now();
    let plan = load_plan(&common::fjord_path()).map_err(|e| e.to_string())?;
    let m = plan
        .elements
        .iter()
        .find_map(|e| match e {
            MissionElement::Meander(m) => Some(*m),
            _ => None,
        })
        .ok_or("fjord has no meander")?;
    let exact = common::meander_closed_form(&m);
    let e30 = (flat_length(&m, 30.0) - exact).abs() / exact;
    let e5 = (flat_length(&m, 5.0) - exact).abs() / exact;
    check(e30 < 0.005, || format!("alpha 30: relative error {e30}"))?;
    check(e5 < 0.0005, || format!("alpha 5: relative error {e5}"))?;

    let profile = RouteProfile {
        d_dive: 1e5,
        ..RouteProfile::default()
    };
    let plan_at = |m: MeanderElement| MissionPlan {
        name: "rot".into(),
        origin_lat: 0.0,
        origin_lon: 0.0,
        elements: vec![
            MissionElement::Initial {
                x: m.x_meander,
                y: m.y_meander,
            },
            MissionElement::Meander(m),
            MissionElement::Final {
                x: m.x_meander,
                y: m.y_meander,
            },
        ],
    };
    let base = generate_route(&plan_at(m), &profile).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let phi: f64 = rng.random_range(-180.0..180.0);
        let turned = MeanderElement {
            theta_meander: m.theta_meander + phi,
            ..m
        };
        let r = generate_route(&plan_at(turned), &profile).map_err(|e| e.to_string())?;
        check(r.waypoints.len() == base.waypoints.len(), || {
            "waypoint count changed".into()
        })?;
        let (sn, cs) = phi.to_radians().sin_cos();
        for (a, b) in base.waypoints.iter().zip(&r.waypoints) {
            let (dx, dy) = (a.x - m.x_meander, a.y - m.y_meander);
            let (x, y) = (
                m.x_meander + dx * cs - dy * sn,
                m.y_meander + dx * sn + dy * cs,
            );
            worst = worst.max((x - b.x).hypot(y - b.y)).max((a.z - b.z).abs());
        }
    }
    check(worst < 1e-9, || format!("rotation error {worst:e} m"))?;
    within(Duration::from_secs(1), start.elapsed())?;
    Ok(format!(
        "closed form {exact:.2} m, error {:.3}% at 30 deg, {:.4}% at 5 deg",
        e30 * 100.0,
        e5 * 100.0
    ))
}

fn dive_law() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut checked, mut refused) = (0, 0);
    for n in 0..500 {
        let (plan, profile, z_max) = common::random_survey(&mut rng);
        match generate_route(&plan, &profile) {
            Ok(route) => {
                let bad = common::dive_law_violations(&route, &profile, z_max);
                check(bad.is_empty(), || format!("set {n}: {bad:?}"))?;
                checked += 1;
            }
            Err(RouteError::InvalidProfile(_) | RouteError::TransitionTooLong { .. }) => {
                refused += 1
            }
            Err(e) => return Err(format!("set {n}: {e}")),
        }
    }
    check(checked >= 400, || {
        format!("only {checked} of 500 sets produced a route")
    })?;
    within(Duration::from_secs(10), start.elapsed())?;
    Ok(format!(
        "{checked} routes clean, {refused} parameter sets refused"
    ))
}

fn spline_quality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut res, mut c2, mut tan) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let pts = common::random_points(&mut rng);
        let q = common::spline_quality(&pts, &mut rng);
        res = res.max(q.knot_residual);
        c2 = c2.max(q.c2_mismatch);
        tan = tan.max(q.tangent_error);
    }
    check(res < 1e-9, || format!("knot residual {res:e}"))?;
    check(c2 < 1e-9, || format!("C2 mismatch {c2:e}"))?;
    check(tan < 1e-6, || format!("tangent error {tan:e}"))?;
    within(Duration::from_secs(5), start.elapsed())?;
    Ok(format!(
        "residual {res:.1e} m, C2 {c2:.1e}, tangent {tan:.1e}"
    ))
}

struct Run {
    _dir: TempDir,
    path: PathBuf,
    outcome: StackOutcome,
}

fn run(transport: TransportKind) -> Result<Run, String> {
    let cfg = common::fjord_config();
    let (plan, route) = prepare_mission(&cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcome =
        run_stack(&cfg, &plan, &route, transport, Some(dir.path())).map_err(|e| e.to_string())?;
    Ok(Run {
        path: dir.path().to_path_buf(),
        _dir: dir,
        outcome,
    })
}

fn closed_loop(udp: &Run) -> Outcome {
    let g = udp.outcome.guidance.as_ref().map_err(Clone::clone)?;
    check(
        udp.outcome.completed() && g.final_mode == GuidanceMode::Complete,
        || {
            format!(
                "ended in {} ({:?})",
                g.final_mode.as_str(),
                udp.outcome.sim.outcome
            )
        },
    )?;
    let a = analyze_dir(&udp.path).map_err(|e| e.to_string())?;
    check(a.ok(), || format!("{:?}", a.violations))?;
    let rms = a.cross_track_rms.ok_or("no cross-track figure")?;
    check(rms < 2.0, || format!("RMS cross-track {rms:.3} m"))?;
    let l_gps = RouteProfile::default().l_gps;
    let shortest = a
        .surfacings
        .iter()
        .map(|s| s.surfaced_length)
        .fold(f64::INFINITY, f64::min);
    check(!a.surfacings.is_empty() && shortest >= l_gps, || {
        format!("shortest surfacing {shortest:.1} m")
    })?;

    let p = VehicleParams::default();
    let full = LlcSetpointsCWolf {
        pwm: [1000, 1000, 0, 0, 0, 0],
    };
    let mut s = VehicleState::at(0.0, 0.0, 0.0);
    for _ in 0..1200 {
        s = step_dynamics(&s, &p, &full, 0.1).map_err(|e| e.to_string())?;
    }
    check((s.u - 3.09).abs() / 3.09 < 0.02, || {
        format!("full throttle {:.3} m/s", s.u)
    })?;

    let wall = udp.outcome.wall.as_secs_f64();
    let factor = udp.outcome.sim.sim_time / wall;
    within(Duration::from_secs(60), udp.outcome.wall)?;
    check(factor >= 100.0, || format!("only {factor:.0}x real time"))?;
    Ok(format!(
        "{:.0} s simulated in {wall:.2} s ({factor:.0}x), RMS {rms:.3} m, {} surfacings >= {:.1} m, full throttle {:.3} m/s",
        udp.outcome.sim.sim_time,
        a.surfacings.len(),
        shortest,
        s.u
    ))
}

fn cadence(r: &Run) -> Outcome {
    let cfg = common::fjord_config();
    let (plan, _) = prepare_mission(&cfg).map_err(|e| e.to_string())?;
    let origin = salmon_core::geo::GeoOrigin::new(plan.origin_lat, plan.origin_lon);
    let env = cfg.simulator.environment;
    let read = salmon_core::measurement::environment_reader(&env, &origin);
    let mut mc = MeasurementComputer::new(cfg.sensors).map_err(|e| e.to_string())?;
    for nav in common::nav_stream(&r.path) {
        mc.on_nav(nav);
        mc.tick(nav.timestamp, &read).map_err(|e| e.to_string())?;
    }
    let logged = std::fs::read(r.path.join(MEASUREMENTS)).map_err(|e| e.to_string())?;
    let mut replay = Vec::new();
    salmon_core::measurement::write_measurements_csv(mc.samples(), &mut replay)
        .map_err(|e| e.to_string())?;
    check(replay == logged, || {
        "replayed samples differ from the MC log".into()
    })?;

    let window = mc
        .samples()
        .iter()
        .filter(|s| (200.0..500.0).contains(&s.timestamp));
    let (mut fast, mut nitrate) = (0usize, 0usize);
    for s in window {
        fast += usize::from(s.o2.is_some());
        nitrate += usize::from(s.nano3.is_some());
    }
    check(fast.abs_diff(300) <= 1, || format!("{fast} fast samples"))?;
    check(nitrate.abs_diff(60) <= 1, || {
        format!("{nitrate} nitrate samples")
    })?;
    let mut worst_age: f64 = 0.0;
    for s in mc.samples() {
        worst_age = worst_age.max(s.timestamp - s.nav_time);
        for c in Channel::ALL {
            if let Some(v) = s.value(c) {
                let (lo, hi) = cfg.sensors.range(c);
                check((lo..=hi).contains(&v), || {
                    format!("{c:?} = {v} at {}", s.timestamp)
                })?;
            }
        }
    }
    check(worst_age <= MAX_NAV_AGE, || {
        format!("fix {worst_age:.2} s stale")
    })?;
    Ok(format!(
        "{fast} fast, {nitrate} nitrate in 300 s, oldest fix {worst_age:.2} s"
    ))
}

fn transparency(local: &Run, udp: &Run) -> Outcome {
    let g = |r: &Run| r.outcome.guidance.clone();
    let (a, b) = (g(local)?, g(udp)?);
    let modes = |g: &salmon_core::guidance::GuidanceReport| {
        g.transitions.iter().map(|t| t.to).collect::<Vec<_>>()
    };
    check(modes(&a) == modes(&b), || "mode sequences differ".into())?;
    check(a.completed_waypoints == b.completed_waypoints, || {
        "waypoint completion order differs".into()
    })?;
    Ok(format!(
        "{} mode changes, {} waypoints in the same order",
        a.transitions.len(),
        a.completed_waypoints.len()
    ))
}

fn determinism(first: &Run, second: &Run) -> Outcome {
    let mut sizes = Vec::new();
    for f in [STATE_LOG, MEASUREMENTS] {
        let (a, b) = (
            std::fs::read(first.path.join(f)),
            std::fs::read(second.path.join(f)),
        );
        let (a, b) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);
        check(a == b, || format!("{f} differs"))?;
        sizes.push(format!("{f} {} bytes", a.len()));
    }
    Ok(format!("identical {}", sizes.join(", ")))
}

fn report(n: usize, name: &str, start: Instant, r: &Outcome) {
    let t = start.elapsed().as_secs_f64();
    match r {
        Ok(d) => println!("PASS  {n}. {name:<22} {d} [{t:.2} s]"),
        Err(e) => println!("FAIL  {n}. {name:<22} {e} [{t:.2} s]"),
    }
}

fn main() -> ExitCode {
    // The test harness passes flags such as --list; nothing to list here.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results = Vec::new();
    let mut timed = |n, name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let r = f();
        report(n, name, start, &r);
        results.push(r.is_ok());
    };
    timed(1, "protocol conformance", &protocol);
    timed(2, "meander geometry", &meander_geometry);
    timed(3, "dive-profile law", &dive_law);
    timed(4, "spline quality", &spline_quality);

    let runs = (|| {
        Ok::<_, String>((
            run(TransportKind::Udp)?,
            run(TransportKind::InProcess)?,
            run(TransportKind::InProcess)?,
        ))
    })();
    match &runs {
        Ok((udp, local, again)) => {
            timed(5, "closed-loop HIL", &|| closed_loop(udp));
            timed(6, "measurement cadence", &|| cadence(local));
            timed(7, "transport transparency", &|| transparency(local, udp));
            timed(8, "determinism", &|| determinism(local, again));
        }
        Err(e) => {
            for (n, name) in [
                (5, "closed-loop HIL"),
                (6, "measurement cadence"),
                (7, "transport transparency"),
                (8, "determinism"),
            ] {
                timed(n, name, &|| Err(format!("stack run failed: {e}")));
            }
        }
    }
    let passed = results.iter().filter(|ok| **ok).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
