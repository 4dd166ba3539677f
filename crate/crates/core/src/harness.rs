//! Stack configuration and the wiring of the three programs (CC simulator,
//! SC guidance, MC measurement) over in-process or UDP ports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoOrigin;
use crate::guidance::{
    run_guidance, Guidance, GuidanceConfig, GuidanceIo, GuidanceReport, NodeTimeouts, PidGains,
};
use crate::keyfile::{KeyFile, KeyFileError, KeyFileWriter, Section};
use crate::measurement::{
    run_measurement, McReport, MeasurementComputer, MeasurementError, SensorConfig,
};
use crate::mission_plan::{parse_plan, MissionPlan, PlanError};
use crate::protocol::{
    loopback_channel, open_udp_port, TelegramLogWriter, TelegramSink, TelegramSource,
    TransportError, UdpPort,
};
use crate::route_gen::{generate_route, write_route_csv, Route, RouteError, RouteProfile};
use crate::simulator::{self, SimConfig, SimError, SimLogs, SimPorts, SimReport, Simulator};

pub const ROUTE_FILE: &str = "route.csv";
pub const STATE_LOG: &str = "state.csv";
pub const MISSION_LOG: &str = "mission.jsonl";
pub const MEASUREMENTS: &str = "measurements.csv";
pub const CC_TELEGRAMS: &str = "cc_telegrams.bin";
pub const SC_TELEGRAMS: &str = "sc_telegrams.bin";
pub const RUN_MANIFEST: &str = "run.json";
pub const SIM_MANIFEST: &str = "sim.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    KeyFile(#[from] KeyFileError),
    #[error("mission plan: {0}")]
    Plan(#[from] PlanError),
    #[error("route: {0}")]
    Route(#[from] RouteError),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("measurement: {0}")]
    Measurement(#[from] MeasurementError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0} thread panicked")]
    Panic(&'static str),
}

impl HarnessError {
    /// Whether the error stems from user input rather than the runtime
    /// environment.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::KeyFile(_)
                | HarnessError::Plan(_)
                | HarnessError::Route(_)
        ) || matches!(self, HarnessError::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub cc: String,
    pub sc: String,
    pub mc: String,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            cc: "127.0.0.1:45000".into(),
            sc: "127.0.0.1:45001".into(),
            mc: "127.0.0.1:45002".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub network: NetworkConfig,
    pub simulator: SimConfig,
    pub guidance: GuidanceConfig,
    pub watchdog: Duration,
    pub sensors: SensorConfig,
    pub profile: RouteProfile,
    pub mission_file: Option<PathBuf>,
    pub log_dir: PathBuf,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            simulator: SimConfig::default(),
            guidance: GuidanceConfig::default(),
            watchdog: Duration::from_secs(5),
            sensors: SensorConfig::default(),
            profile: RouteProfile::default(),
            mission_file: None,
            log_dir: PathBuf::from("logs"),
        }
    }
}

/// Reads optional finite floats into `fields`, then rejects unknown keys.
fn read_floats(
    sec: &Section,
    fields: &mut [(&str, &mut f64)],
    extra: &[&str],
) -> Result<(), KeyFileError> {
    for (key, slot) in fields.iter_mut() {
        **slot = sec.finite_or(key, **slot)?;
    }
    let mut allowed: Vec<&str> = fields.iter().map(|(k, _)| *k).collect();
    allowed.extend_from_slice(extra);
    sec.deny_unknown(&allowed)
}

const PID_NAMES: [&str; 5] = ["heading", "depth", "speed", "pitch", "depth_pitch"];

fn pid_keys(name: &str) -> [String; 4] {
    ["kp", "ki", "kd", "i_limit"].map(|s| format!("{name}_{s}"))
}

impl StackConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::File {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let kf = KeyFile::parse(text)?;
        let mut c = StackConfig::default();
        for sec in &kf.sections {
            match sec.name.as_str() {
                "network" => {
                    sec.deny_unknown(&["cc", "sc", "mc"])?;
                    c.network.cc = sec.parse_or("cc", c.network.cc.clone())?;
                    c.network.sc = sec.parse_or("sc", c.network.sc.clone())?;
                    c.network.mc = sec.parse_or("mc", c.network.mc.clone())?;
                }
                "simulator" => {
                    let s = &mut c.simulator;
                    let mut heading = s.start_heading.to_degrees();
                    let mut lockstep_ms = s.lockstep_timeout.as_secs_f64() * 1000.0;
                    let mut control_wait = s.control_wait.as_secs_f64();
                    let env = &mut s.environment;
                    let plume = &mut env.plume;
                    let [px, py, pz] = &mut plume.source;
                    let [sx, sy, sz] = &mut plume.sigma;
                    let [x0, y0] = &mut s.start;
                    read_floats(
                        sec,
                        &mut [
                            ("dt", &mut s.dt),
                            ("realtime_factor", &mut s.realtime_factor),
                            ("max_time", &mut s.max_time),
                            ("dr_noise", &mut s.dr_noise),
                            ("dvl_range", &mut s.dvl_range),
                            ("lockstep_timeout_ms", &mut lockstep_ms),
                            ("control_wait_s", &mut control_wait),
                            ("start_x", x0),
                            ("start_y", y0),
                            ("start_heading_deg", &mut heading),
                            ("seabed_depth", &mut env.seabed_depth),
                            ("plume_x", px),
                            ("plume_y", py),
                            ("plume_z", pz),
                            ("plume_sigma_x", sx),
                            ("plume_sigma_y", sy),
                            ("plume_sigma_z", sz),
                            ("plume_peak", &mut plume.peak),
                            ("plume_background", &mut plume.background),
                        ],
                        &["seed"],
                    )?;
                    s.seed = sec.parse_or("seed", s.seed)?;
                    s.start_heading = heading.to_radians();
                    if !(lockstep_ms > 0.0) {
                        return Err(HarnessError::Config(
                            "lockstep_timeout_ms must be > 0".into(),
                        ));
                    }
                    s.lockstep_timeout = Duration::from_secs_f64(lockstep_ms / 1000.0);
                    if control_wait < 0.0 {
                        return Err(HarnessError::Config("control_wait_s must be >= 0".into()));
                    }
                    s.control_wait = Duration::from_secs_f64(control_wait);
                }
                "gains" => {
                    let g = &mut c.guidance.gains;
                    let mut pids = [g.heading, g.depth, g.speed, g.pitch, g.depth_pitch];
                    let keys: Vec<[String; 4]> = PID_NAMES.iter().map(|n| pid_keys(n)).collect();
                    let mut fields: Vec<(&str, &mut f64)> = Vec::new();
                    for (pid, k) in pids.iter_mut().zip(&keys) {
                        let PidGains {
                            kp,
                            ki,
                            kd,
                            i_limit,
                        } = pid;
                        fields.extend([
                            (k[0].as_str(), kp),
                            (k[1].as_str(), ki),
                            (k[2].as_str(), kd),
                            (k[3].as_str(), i_limit),
                        ]);
                    }
                    fields.push(("speed_ff_quadratic", &mut g.speed_ff_quadratic));
                    fields.push(("speed_ff_linear", &mut g.speed_ff_linear));
                    fields.push(("lateral_share", &mut g.lateral_share));
                    fields.push(("lookahead_distance", &mut g.lookahead_distance));
                    read_floats(sec, &mut fields, &[])?;
                    [g.heading, g.depth, g.speed, g.pitch, g.depth_pitch] = pids;
                }
                "guidance" => {
                    let gc = &mut c.guidance;
                    let mut pitch_deg = gc.max_pitch_ref.to_degrees();
                    let mut watchdog = c.watchdog.as_secs_f64();
                    read_floats(
                        sec,
                        &mut [
                            ("capture_radius", &mut gc.capture_radius),
                            ("end_tolerance", &mut gc.end_tolerance),
                            ("depth_tolerance", &mut gc.depth_tolerance),
                            ("surfaced_depth", &mut gc.surfaced_depth),
                            ("gps_margin", &mut gc.gps_margin),
                            ("brake_gain", &mut gc.brake_gain),
                            ("approach_speed", &mut gc.approach_speed),
                            ("hold_speed", &mut gc.hold_speed),
                            ("max_pitch_ref_deg", &mut pitch_deg),
                            ("watchdog_s", &mut watchdog),
                        ],
                        &[],
                    )?;
                    gc.max_pitch_ref = pitch_deg.to_radians();
                    if !(watchdog > 0.0 && gc.capture_radius > 0.0) {
                        return Err(HarnessError::Config(
                            "watchdog_s and capture_radius must be > 0".into(),
                        ));
                    }
                    c.watchdog = Duration::from_secs_f64(watchdog);
                }
                "sensors" => {
                    read_floats(
                        sec,
                        &mut [
                            ("nitrate_period", &mut c.sensors.nitrate_period),
                            ("fast_period", &mut c.sensors.fast_period),
                        ],
                        &[],
                    )?;
                }
                "route" => {
                    let p = &mut c.profile;
                    read_floats(
                        sec,
                        &mut [
                            ("alpha_arc", &mut p.alpha_arc),
                            ("d_arc", &mut p.d_arc),
                            ("z_min", &mut p.z_min),
                            ("alpha_dive", &mut p.alpha_dive),
                            ("d_dive", &mut p.d_dive),
                            ("l_gps", &mut p.l_gps),
                            ("cruise_speed", &mut p.cruise_speed),
                        ],
                        &[],
                    )?;
                }
                "mission" => {
                    sec.deny_unknown(&["file", "log_dir"])?;
                    if let Some(e) = sec.get("file") {
                        c.mission_file = Some(base.join(&e.value));
                    }
                    if let Some(e) = sec.get("log_dir") {
                        c.log_dir = base.join(&e.value);
                    }
                }
                other => {
                    return Err(HarnessError::Config(format!(
                        "line {}: unknown section [{other}]",
                        sec.line
                    )));
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let n = &self.network;
        if n.cc == n.sc || n.cc == n.mc || n.sc == n.mc {
            return Err(HarnessError::Config(
                "CC, SC and MC addresses must be distinct".into(),
            ));
        }
        self.profile.validate()?;
        self.simulator
            .params
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.guidance
            .gains
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.sensors.validate()?;
        if !(self.simulator.dt > 0.0 && self.simulator.dt <= 1.0) {
            return Err(HarnessError::Config(format!(
                "dt must be in (0, 1] (got {})",
                self.simulator.dt
            )));
        }
        Ok(())
    }

    /// Writes the configuration back in keyfile form.
    pub fn to_keyfile(&self) -> String {
        let mut w = KeyFileWriter::new();
        let s = &self.simulator;
        let env = &s.environment;
        w.section("network")
            .kv("cc", &self.network.cc)
            .kv("sc", &self.network.sc)
            .kv("mc", &self.network.mc);
        w.section("simulator")
            .kv("seed", s.seed)
            .kv("dt", s.dt)
            .kv("realtime_factor", s.realtime_factor)
            .kv("max_time", s.max_time)
            .kv("dr_noise", s.dr_noise)
            .kv("dvl_range", s.dvl_range)
            .kv(
                "lockstep_timeout_ms",
                s.lockstep_timeout.as_secs_f64() * 1000.0,
            )
            .kv("control_wait_s", s.control_wait.as_secs_f64())
            .kv("start_x", s.start[0])
            .kv("start_y", s.start[1])
            .kv("start_heading_deg", s.start_heading.to_degrees())
            .kv("seabed_depth", env.seabed_depth)
            .kv("plume_x", env.plume.source[0])
            .kv("plume_y", env.plume.source[1])
            .kv("plume_z", env.plume.source[2])
            .kv("plume_sigma_x", env.plume.sigma[0])
            .kv("plume_sigma_y", env.plume.sigma[1])
            .kv("plume_sigma_z", env.plume.sigma[2])
            .kv("plume_peak", env.plume.peak)
            .kv("plume_background", env.plume.background);
        let g = &self.guidance.gains;
        w.section("gains");
        for (name, pid) in
            PID_NAMES
                .iter()
                .zip([g.heading, g.depth, g.speed, g.pitch, g.depth_pitch])
        {
            let k = pid_keys(name);
            w.kv(&k[0], pid.kp)
                .kv(&k[1], pid.ki)
                .kv(&k[2], pid.kd)
                .kv(&k[3], pid.i_limit);
        }
        w.kv("speed_ff_quadratic", g.speed_ff_quadratic)
            .kv("speed_ff_linear", g.speed_ff_linear)
            .kv("lateral_share", g.lateral_share)
            .kv("lookahead_distance", g.lookahead_distance);
        let gc = &self.guidance;
        w.section("guidance")
            .kv("capture_radius", gc.capture_radius)
            .kv("end_tolerance", gc.end_tolerance)
            .kv("depth_tolerance", gc.depth_tolerance)
            .kv("surfaced_depth", gc.surfaced_depth)
            .kv("gps_margin", gc.gps_margin)
            .kv("brake_gain", gc.brake_gain)
            .kv("approach_speed", gc.approach_speed)
            .kv("hold_speed", gc.hold_speed)
            .kv("max_pitch_ref_deg", gc.max_pitch_ref.to_degrees())
            .kv("watchdog_s", self.watchdog.as_secs_f64());
        w.section("sensors")
            .kv("nitrate_period", self.sensors.nitrate_period)
            .kv("fast_period", self.sensors.fast_period);
        let p = &self.profile;
        w.section("route")
            .kv("alpha_arc", p.alpha_arc)
            .kv("d_arc", p.d_arc)
            .kv("z_min", p.z_min)
            .kv("alpha_dive", p.alpha_dive)
            .kv("d_dive", p.d_dive)
            .kv("l_gps", p.l_gps)
            .kv("cruise_speed", p.cruise_speed);
        w.section("mission");
        if let Some(f) = &self.mission_file {
            w.kv("file", f.display());
        }
        w.kv("log_dir", self.log_dir.display());
        w.finish()
    }

    /// Mission file must be configured and present.
    pub fn mission_path(&self) -> Result<&Path, HarnessError> {
        let p = self
            .mission_file
            .as_deref()
            .ok_or_else(|| HarnessError::Config("[mission] file is not set".into()))?;
        if !p.exists() {
            return Err(HarnessError::File {
                path: p.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "mission file not found"),
            });
        }
        Ok(p)
    }
}

pub fn load_plan(path: &Path) -> Result<MissionPlan, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_plan(&text)?)
}

/// Loads the configured mission and generates its route.
pub fn prepare_mission(cfg: &StackConfig) -> Result<(MissionPlan, Route), HarnessError> {
    let plan = load_plan(cfg.mission_path()?)?;
    let route = generate_route(&plan, &cfg.profile)?;
    Ok((plan, route))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransportKind {
    /// In-process loopback ports.
    InProcess,
    /// UDP sockets on the configured addresses.
    Udp,
}

/// Parameters the log analysis needs besides the logs themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mission: String,
    pub transport: TransportKind,
    pub seed: u64,
    pub dt: f64,
    pub profile: RouteProfile,
    pub sensors: SensorConfig,
    pub capture_radius: f64,
    pub origin: GeoOrigin,
    pub guidance: Option<GuidanceReport>,
    pub guidance_error: Option<String>,
    pub measurement: Option<McReport>,
    pub sim: Option<SimReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackOutcome {
    pub sim: SimReport,
    pub guidance: Result<GuidanceReport, String>,
    pub measurement: McReport,
    #[serde(skip)]
    pub wall: Duration,
}

impl StackOutcome {
    pub fn completed(&self) -> bool {
        matches!(&self.guidance, Ok(g) if !g.aborted)
            && self.sim.outcome == simulator::SimOutcome::Completed
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, HarnessError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|source| HarnessError::File { path, source })
}

fn boxed(w: BufWriter<File>) -> Box<dyn Write + Send> {
    Box::new(w)
}

fn sim_logs(dir: Option<&Path>) -> Result<SimLogs, HarnessError> {
    Ok(match dir {
        Some(d) => SimLogs {
            state: Some(boxed(create(d, STATE_LOG)?)),
            telegrams: Some(TelegramLogWriter::new(boxed(create(d, CC_TELEGRAMS)?))),
        },
        None => SimLogs::default(),
    })
}

struct ScLogs {
    mission: Option<BufWriter<File>>,
    telegrams: Option<TelegramLogWriter<Box<dyn Write + Send>>>,
}

fn sc_logs(dir: Option<&Path>) -> Result<ScLogs, HarnessError> {
    Ok(match dir {
        Some(d) => ScLogs {
            mission: Some(create(d, MISSION_LOG)?),
            telegrams: Some(TelegramLogWriter::new(boxed(create(d, SC_TELEGRAMS)?))),
        },
        None => ScLogs {
            mission: None,
            telegrams: None,
        },
    })
}

fn spawn_sc(
    mut g: Guidance,
    to_cc: Box<dyn TelegramSink>,
    mut inbound: Box<dyn TelegramSource>,
    mut logs: ScLogs,
    timeouts: NodeTimeouts,
    stop: Arc<AtomicBool>,
) -> std::thread::JoinHandle<Result<GuidanceReport, String>> {
    std::thread::spawn(move || {
        let mut io = GuidanceIo {
            to_cc: &*to_cc,
            inbound: &mut *inbound,
            mission_log: logs.mission.as_mut().map(|w| w as &mut dyn Write),
            telegram_log: logs.telegrams.as_mut(),
        };
        run_guidance(&mut g, &mut io, timeouts, &stop).map_err(|e| e.to_string())
    })
}

fn spawn_mc(
    cfg: &StackConfig,
    origin: GeoOrigin,
    mut inbound: Box<dyn TelegramSource>,
    out: Option<BufWriter<File>>,
    stop: Arc<AtomicBool>,
) -> Result<std::thread::JoinHandle<Result<McReport, MeasurementError>>, HarnessError> {
    let mut mc = MeasurementComputer::new(cfg.sensors)?;
    let env = cfg.simulator.environment;
    Ok(std::thread::spawn(move || {
        let report = run_measurement(
            &mut mc,
            &mut *inbound,
            &env,
            &origin,
            Duration::from_millis(200),
            &stop,
        )?;
        if let Some(w) = out {
            mc.export_csv(w)?;
        }
        Ok(report)
    }))
}

/// Ports of the three programs for one transport.
struct Wiring {
    cc_in: Box<dyn TelegramSource>,
    cc_to_sc: Box<dyn TelegramSink>,
    cc_to_mc: Box<dyn TelegramSink>,
    sc_in: Box<dyn TelegramSource>,
    sc_to_cc: Box<dyn TelegramSink>,
    mc_in: Box<dyn TelegramSource>,
}

fn wire_in_process() -> Wiring {
    let (to_cc, cc_in) = loopback_channel();
    let (to_sc, sc_in) = loopback_channel();
    let (to_mc, mc_in) = loopback_channel();
    Wiring {
        cc_in: Box::new(cc_in),
        cc_to_sc: Box::new(to_sc),
        cc_to_mc: Box::new(to_mc),
        sc_in: Box::new(sc_in),
        sc_to_cc: Box::new(to_cc),
        mc_in: Box::new(mc_in),
    }
}

fn bind(addr: &str) -> Result<UdpPort, HarnessError> {
    // Peers are attached per sender; the port's own peer is unused.
    Ok(open_udp_port(addr, addr)?)
}

/// Binds all three sockets before any program starts, so no datagram can
/// reach an unbound port. Port 0 addresses get ephemeral ports.
fn wire_udp(net: &NetworkConfig) -> Result<Wiring, HarnessError> {
    let cc = bind(&net.cc)?;
    let sc = bind(&net.sc)?;
    let mc = bind(&net.mc)?;
    let (cc_addr, sc_addr, mc_addr) = (
        cc.local_addr()?.to_string(),
        sc.local_addr()?.to_string(),
        mc.local_addr()?.to_string(),
    );
    Ok(Wiring {
        cc_to_sc: Box::new(cc.sender_to(&sc_addr)?),
        cc_to_mc: Box::new(cc.sender_to(&mc_addr)?),
        sc_to_cc: Box::new(sc.sender_to(&cc_addr)?),
        cc_in: Box::new(cc),
        sc_in: Box::new(sc),
        mc_in: Box::new(mc),
    })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), HarnessError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn manifest(cfg: &StackConfig, plan: &MissionPlan, transport: TransportKind) -> RunManifest {
    RunManifest {
        mission: plan.name.clone(),
        transport,
        seed: cfg.simulator.seed,
        dt: cfg.simulator.dt,
        profile: cfg.profile,
        sensors: cfg.sensors,
        capture_radius: cfg.guidance.capture_radius,
        origin: GeoOrigin::new(plan.origin_lat, plan.origin_lon),
        guidance: None,
        guidance_error: None,
        measurement: None,
        sim: None,
    }
}

/// Runs CC, SC and MC together in this process until the mission completes,
/// the simulator times out, or guidance aborts. Writes all logs to
/// `log_dir` when given.
pub fn run_stack(
    cfg: &StackConfig,
    plan: &MissionPlan,
    route: &Route,
    transport: TransportKind,
    log_dir: Option<&Path>,
) -> Result<StackOutcome, HarnessError> {
    let wall = Instant::now();
    let origin = GeoOrigin::new(plan.origin_lat, plan.origin_lon);
    let mut sim_cfg = cfg.simulator.clone();
    sim_cfg.origin = origin;
    if let Some(d) = log_dir {
        std::fs::create_dir_all(d).map_err(|source| HarnessError::File {
            path: d.to_path_buf(),
            source,
        })?;
        write_route_csv(route, create(d, ROUTE_FILE)?).map_err(|e| HarnessError::Io(e.into()))?;
    }
    let guidance = Guidance::new(route.clone(), &cfg.profile, cfg.guidance, origin)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut sim = Simulator::new(sim_cfg)?;

    let w = match transport {
        TransportKind::InProcess => wire_in_process(),
        TransportKind::Udp => wire_udp(&cfg.network)?,
    };
    let sc_stop = Arc::new(AtomicBool::new(false));
    let mc_stop = Arc::new(AtomicBool::new(false));
    let timeouts = NodeTimeouts {
        watchdog: cfg.watchdog,
        ..NodeTimeouts::default()
    };

    let mc_out = log_dir.map(|d| create(d, MEASUREMENTS)).transpose()?;
    let mc = spawn_mc(cfg, origin, w.mc_in, mc_out, Arc::clone(&mc_stop))?;
    let sc = spawn_sc(
        guidance,
        w.sc_to_cc,
        w.sc_in,
        sc_logs(log_dir)?,
        timeouts,
        Arc::clone(&sc_stop),
    );

    let mut ports = SimPorts {
        to_sc: w.cc_to_sc,
        to_mc: Some(w.cc_to_mc),
        inbound: w.cc_in,
    };
    let mut logs = sim_logs(log_dir)?;
    let sim_result = simulator::run(&mut sim, &mut ports, &mut logs, None);
    drop(ports);
    sc_stop.store(true, Ordering::Release);
    mc_stop.store(true, Ordering::Release);
    let guidance = sc.join().map_err(|_| HarnessError::Panic("guidance"))?;
    let measurement = mc
        .join()
        .map_err(|_| HarnessError::Panic("measurement"))??;
    let sim_report = sim_result?;

    let outcome = StackOutcome {
        sim: sim_report,
        guidance,
        measurement,
        wall: wall.elapsed(),
    };
    if let Some(d) = log_dir {
        let mut m = manifest(cfg, plan, transport);
        m.guidance = outcome.guidance.as_ref().ok().cloned();
        m.guidance_error = outcome.guidance.as_ref().err().cloned();
        m.measurement = Some(outcome.measurement.clone());
        m.sim = Some(outcome.sim.clone());
        write_json(d, RUN_MANIFEST, &m)?;
    }
    Ok(outcome)
}

/// CC program on its own: binds the CC address and serves SC and MC over
/// UDP until released, timed out or stopped.
pub fn run_cc(
    cfg: &StackConfig,
    origin: GeoOrigin,
    log_dir: Option<&Path>,
    duration: Option<f64>,
) -> Result<SimReport, HarnessError> {
    let port = open_udp_port(&cfg.network.cc, &cfg.network.sc)?;
    let to_mc = port.sender_to(&cfg.network.mc)?;
    let mut sim_cfg = cfg.simulator.clone();
    sim_cfg.origin = origin;
    let mut sim = Simulator::new(sim_cfg)?;
    if let Some(d) = log_dir {
        std::fs::create_dir_all(d).map_err(|source| HarnessError::File {
            path: d.to_path_buf(),
            source,
        })?;
    }
    let mut ports = SimPorts {
        to_sc: Box::new(port.sender()),
        to_mc: Some(Box::new(to_mc)),
        inbound: Box::new(port),
    };
    let mut logs = sim_logs(log_dir)?;
    let report = simulator::run(&mut sim, &mut ports, &mut logs, duration)?;
    if let Some(d) = log_dir {
        write_json(d, SIM_MANIFEST, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScMcOutcome {
    pub guidance: Result<GuidanceReport, String>,
    pub measurement: McReport,
}

/// SC and MC programs against an external CC over UDP. `stop` triggers a
/// graceful release (NoControl).
pub fn run_sc_mc(
    cfg: &StackConfig,
    plan: &MissionPlan,
    route: &Route,
    log_dir: Option<&Path>,
    stop: Arc<AtomicBool>,
) -> Result<ScMcOutcome, HarnessError> {
    let origin = GeoOrigin::new(plan.origin_lat, plan.origin_lon);
    if let Some(d) = log_dir {
        std::fs::create_dir_all(d).map_err(|source| HarnessError::File {
            path: d.to_path_buf(),
            source,
        })?;
        write_route_csv(route, create(d, ROUTE_FILE)?).map_err(|e| HarnessError::Io(e.into()))?;
    }
    let sc = open_udp_port(&cfg.network.sc, &cfg.network.cc)?;
    let mc = open_udp_port(&cfg.network.mc, &cfg.network.cc)?;
    let guidance = Guidance::new(route.clone(), &cfg.profile, cfg.guidance, origin)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mc_stop = Arc::new(AtomicBool::new(false));
    let mc_out = log_dir.map(|d| create(d, MEASUREMENTS)).transpose()?;
    let mc = spawn_mc(cfg, origin, Box::new(mc), mc_out, Arc::clone(&mc_stop))?;
    let timeouts = NodeTimeouts {
        watchdog: cfg.watchdog,
        ..NodeTimeouts::default()
    };
    let sc = spawn_sc(
        guidance,
        Box::new(sc.sender()),
        Box::new(sc),
        sc_logs(log_dir)?,
        timeouts,
        stop,
    );
    let guidance = sc.join().map_err(|_| HarnessError::Panic("guidance"))?;
    mc_stop.store(true, Ordering::Release);
    let measurement = mc
        .join()
        .map_err(|_| HarnessError::Panic("measurement"))??;
    if let Some(d) = log_dir {
        let mut m = manifest(cfg, plan, TransportKind::Udp);
        m.guidance = guidance.as_ref().ok().cloned();
        m.guidance_error = guidance.as_ref().err().cloned();
        m.measurement = Some(measurement.clone());
        write_json(d, RUN_MANIFEST, &m)?;
    }
    Ok(ScMcOutcome {
        guidance,
        measurement,
    })
}
