use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use salmon_core::analysis::{analyze_dir, AnalysisError};
use salmon_core::geo::GeoOrigin;
use salmon_core::harness::{
    load_plan, run_cc, run_sc_mc, run_stack, HarnessError, StackConfig, TransportKind,
};
use salmon_core::mission_plan::MissionPlan;
use salmon_core::route_gen::{
    audit_route, generate_route, route_geojson, summarize, write_route_csv, RouteError,
};
use salmon_core::simulator::SimOutcome;

#[derive(Parser)]
#[command(
    name = "salmon",
    version,
    about = "Meander survey planning and closed-loop vehicle runs"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Expand a mission plan into route.csv and track.geojson.
    Compile {
        mission: PathBuf,
        /// Stack config; only its [route] section is used.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = ".")]
        output: PathBuf,
    },
    /// Run the simulated Control Computer on the configured CC address.
    Sim {
        #[command(flatten)]
        common: Common,
        /// Stop after this many simulated seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Run guidance and measurement against a simulator.
    Run {
        #[command(flatten)]
        common: Common,
        /// Wire all three programs through in-process ports instead of UDP.
        #[arg(long)]
        single_process: bool,
    },
    /// Check a run's log directory against the system invariants.
    Analyze {
        dir: PathBuf,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Mission plan, overriding the config's [mission] file.
    #[arg(short, long)]
    mission: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds per wall second; 0 runs free.
    #[arg(long)]
    realtime: Option<f64>,
    /// Log directory, overriding the config's [mission] log_dir.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

enum Failure {
    Input(String),
    Runtime(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Input(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(common: &Common) -> Result<StackConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => StackConfig::load(p)?,
        None => StackConfig::default(),
    };
    if let Some(m) = &common.mission {
        cfg.mission_file = Some(m.clone());
    }
    if let Some(o) = &common.output {
        cfg.log_dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.simulator.seed = s;
    }
    if let Some(r) = common.realtime {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Failure::Input(format!("--realtime must be >= 0 (got {r})")));
        }
        cfg.simulator.realtime_factor = r;
    }
    Ok(cfg)
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn compile(mission: &Path, config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let profile = match config {
        Some(p) => StackConfig::load(p)?.profile,
        None => Default::default(),
    };
    let plan = load_plan(mission)?;
    let route = generate_route(&plan, &profile).map_err(|e| match e {
        RouteError::InvalidPlan(vs) => Failure::Input(
            vs.iter()
                .map(|v| format!("  {v}"))
                .collect::<Vec<_>>()
                .join("\n"),
        ),
        other => input(other),
    })?;
    let z_max = route.max_depth();
    let problems = audit_route(&route, &profile, z_max);
    if !problems.is_empty() {
        return Err(Failure::Invariant(problems.join("\n")));
    }
    std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    write_file(&out.join("route.csv"), |w| {
        write_route_csv(&route, w).map_err(std::io::Error::other)
    })?;
    let geo = route_geojson(
        &route,
        GeoOrigin::new(plan.origin_lat, plan.origin_lon),
        &plan.name,
    );
    write_file(&out.join("track.geojson"), |w| {
        serde_json::to_writer_pretty(&mut *w, &geo)?;
        writeln!(w)
    })?;
    let s = summarize(&route);
    println!("mission      {}", plan.name);
    println!("waypoints    {}", s.waypoints);
    println!(
        "track length {:.1} m ({:.1} m horizontal)",
        s.track_length, s.horizontal_length
    );
    println!("surfacings   {}", s.surfacings);
    println!("max depth    {:.1} m", s.max_depth);
    Ok(())
}

fn plan_origin(cfg: &StackConfig) -> Result<(Option<MissionPlan>, GeoOrigin), Failure> {
    match &cfg.mission_file {
        Some(_) => {
            let plan = load_plan(cfg.mission_path()?)?;
            let origin = GeoOrigin::new(plan.origin_lat, plan.origin_lon);
            Ok((Some(plan), origin))
        }
        None => Ok((None, cfg.simulator.origin)),
    }
}

fn sim(common: &Common, duration: Option<f64>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    if let Some(d) = duration.filter(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Failure::Input(format!("--duration must be > 0 (got {d})")));
    }
    let (_, origin) = plan_origin(&cfg)?;
    eprintln!(
        "CC listening on {} (SC {}, MC {})",
        cfg.network.cc, cfg.network.sc, cfg.network.mc
    );
    let report = run_cc(&cfg, origin, Some(&cfg.log_dir), duration)?;
    println!(
        "{:?} after {:.1} s simulated, {} steps, {} NavData sent, {} missed replies",
        report.outcome, report.sim_time, report.steps, report.nav_sent, report.missed_replies
    );
    match report.outcome {
        SimOutcome::Completed => Ok(()),
        // A requested duration ending the run is not a failure.
        SimOutcome::TimedOut if duration.is_some() => Ok(()),
        other => Err(Failure::Runtime(format!("simulation ended with {other:?}"))),
    }
}

fn run(common: &Common, single_process: bool) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let (plan, _) = plan_origin(&cfg)?;
    let plan = plan.ok_or_else(|| {
        Failure::Input("no mission file: set [mission] file or pass --mission".into())
    })?;
    let route = generate_route(&plan, &cfg.profile).map_err(input)?;
    let log_dir = cfg.log_dir.clone();

    let guidance = if single_process {
        let out = run_stack(
            &cfg,
            &plan,
            &route,
            TransportKind::InProcess,
            Some(&log_dir),
        )?;
        println!(
            "simulator: {:?} after {:.1} s simulated ({:.2} s wall)",
            out.sim.outcome,
            out.sim.sim_time,
            out.wall.as_secs_f64()
        );
        println!(
            "measurements: {} samples, {} dropped",
            out.measurement.samples, out.measurement.dropped
        );
        out.guidance
    } else {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        ctrlc::set_handler(move || flag.store(true, Ordering::Release)).map_err(runtime)?;
        let out = run_sc_mc(&cfg, &plan, &route, Some(&log_dir), stop)?;
        println!(
            "measurements: {} samples, {} dropped",
            out.measurement.samples, out.measurement.dropped
        );
        out.guidance
    };
    let g = guidance.map_err(Failure::Runtime)?;
    println!(
        "guidance: {} after {} NavData, {}/{} waypoints, logs in {}",
        g.final_mode.as_str(),
        g.nav_received,
        g.completed_waypoints.len(),
        route.waypoints.len(),
        log_dir.display()
    );
    if g.aborted {
        return Err(Failure::Runtime(format!(
            "mission aborted in {}",
            g.final_mode.as_str()
        )));
    }
    Ok(())
}

fn analyze(dir: &Path, json: bool) -> Result<(), Failure> {
    let report = analyze_dir(dir).map_err(|e| match e {
        AnalysisError::Io { .. } => runtime(e),
        _ => input(e),
    })?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(runtime)?
        );
    } else {
        println!("files: {}", report.files.join(", "));
        let modes: Vec<&str> = report.mode_sequence.iter().map(|m| m.as_str()).collect();
        println!("modes: {}", modes.join(" > "));
        match (report.cross_track_rms, report.cross_track_max) {
            (Some(rms), Some(max)) => println!("cross-track: RMS {rms:.3} m, max {max:.3} m"),
            _ => println!("cross-track: n/a (needs route.csv, state.csv and mission.jsonl)"),
        }
        for s in &report.surfacings {
            println!(
                "surfacing at waypoint {}: {:.1} m surfaced",
                s.waypoint, s.surfaced_length
            );
        }
        if let Some(c) = &report.cadence {
            println!(
                "sensors: {} fast, {} nitrate samples over {:.0} s",
                c.fast_samples,
                c.nitrate_samples,
                c.last_t - c.first_t
            );
        }
        println!("setpoints checked: {}", report.setpoints_checked);
    }
    if report.ok() {
        if !json {
            println!("all invariants hold");
        }
        Ok(())
    } else {
        let list: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("  {}: {}", v.check, v.detail))
            .collect();
        Err(Failure::Invariant(format!(
            "{} violation(s):\n{}",
            list.len(),
            list.join("\n")
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.cmd {
        Cmd::Compile {
            mission,
            config,
            output,
        } => compile(mission, config.as_deref(), output),
        Cmd::Sim { common, duration } => sim(common, *duration),
        Cmd::Run {
            common,
            single_process,
        } => run(common, *single_process),
        Cmd::Analyze { dir, json } => analyze(dir, *json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Input(m) | Failure::Runtime(m) | Failure::Invariant(m)) = &f;
            eprintln!("salmon: {m}");
            ExitCode::from(f.code())
        }
    }
}
