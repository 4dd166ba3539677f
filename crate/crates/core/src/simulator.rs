//! Control Computer stand-in: reduced vehicle dynamics, navigation output and
//! the synthetic water column.
//!
//! The model has four degrees of freedom (surge, yaw, heave, pitch; roll is
//! frozen at zero). Motor commands pass through a first-order lag. Main
//! thrust is calibrated so that both mains at full PWM balance drag exactly at
//! the vehicle's maximum speed.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{wrap_angle, GeoOrigin};
use crate::protocol::{
    encode, Direction, LlcError, LlcMode, LlcSetpointsCWolf, LlcStatus, MotorStatus, NavData,
    Telegram, TelegramLogWriter, TelegramSink, TelegramSource, TransportError, MOTOR_COUNT,
};

/// Depth below which the antenna is clear and GPS fixes are available.
pub const GPS_DEPTH: f64 = 0.3;

/// LLC_Error code sent when a Controlled-mode command arrives.
pub const ERR_MODE_UNSUPPORTED: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub length: f64,
    pub diameter: f64,
    pub mass: f64,
    pub max_speed: f64,
    pub endurance_hours: f64,
    pub payload_kg: f64,
    /// Surge added mass.
    pub added_mass_surge: f64,
    /// Quadratic surge drag, N s²/m².
    pub drag_quadratic: f64,
    /// Linear surge drag, N s/m.
    pub drag_linear: f64,
    /// Lateral thruster force at full PWM, N.
    pub lateral_thrust: f64,
    /// Vertical thruster force at full PWM, N. Positive PWM pushes down.
    pub vertical_thrust: f64,
    /// Motor time constant, s.
    pub motor_tau: f64,
    /// Lever arm of the mains about the yaw axis.
    pub main_lever: f64,
    /// Lever arm of bow/stern thrusters about the centre.
    pub thruster_lever: f64,
    pub yaw_inertia: f64,
    pub yaw_damping: f64,
    pub pitch_inertia: f64,
    pub pitch_damping: f64,
    /// Hydrostatic restoring moment coefficient, N m (times sin pitch).
    pub pitch_restoring: f64,
    pub heave_mass: f64,
    pub heave_drag_quadratic: f64,
    pub heave_drag_linear: f64,
    /// Net upward force, N. Zero is neutral trim.
    pub buoyancy: f64,
    /// Speed above which lateral and vertical thrusters start to lose
    /// authority; zero authority at `max_speed`.
    pub fade_start: f64,
    pub max_pitch: f64,
    pub min_speed: f64,
    pub max_rpm: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            length: 2.20,
            diameter: 0.30,
            mass: 135.0,
            max_speed: 3.09,
            endurance_hours: 3.0,
            payload_kg: 15.0,
            added_mass_surge: 13.5,
            drag_quadratic: 25.0,
            drag_linear: 5.0,
            lateral_thrust: 30.0,
            vertical_thrust: 40.0,
            motor_tau: 0.2,
            main_lever: 0.15,
            thruster_lever: 0.8,
            yaw_inertia: 55.0,
            yaw_damping: 60.0,
            pitch_inertia: 55.0,
            pitch_damping: 70.0,
            pitch_restoring: 30.0,
            heave_mass: 250.0,
            heave_drag_quadratic: 60.0,
            heave_drag_linear: 20.0,
            buoyancy: 0.0,
            fade_start: 1.0,
            max_pitch: 45f64.to_radians(),
            min_speed: -0.5,
            max_rpm: 3000.0,
        }
    }
}

impl VehicleParams {
    /// Force of one main at full PWM, such that two mains balance drag at
    /// `max_speed`.
    pub fn main_thrust(&self) -> f64 {
        let u = self.max_speed;
        (self.drag_quadratic * u * u + self.drag_linear * u) / 2.0
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("length", self.length),
            ("diameter", self.diameter),
            ("mass", self.mass),
            ("max_speed", self.max_speed),
            ("drag_quadratic", self.drag_quadratic),
            ("motor_tau", self.motor_tau),
            ("yaw_inertia", self.yaw_inertia),
            ("pitch_inertia", self.pitch_inertia),
            ("heave_mass", self.heave_mass),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::Config(format!("{name} must be > 0 (got {v})")));
            }
        }
        if !(self.fade_start >= 0.0 && self.fade_start < self.max_speed) {
            return Err(SimError::Config(
                "fade_start must lie in [0, max_speed)".into(),
            ));
        }
        Ok(())
    }

    /// Lateral/vertical thruster effectiveness at surge speed `u`.
    pub fn authority(&self, u: f64) -> f64 {
        let u = u.abs();
        if u <= self.fade_start {
            1.0
        } else {
            (1.0 - (u - self.fade_start) / (self.max_speed - self.fade_start)).max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub pitch: f64,
    pub yaw: f64,
    /// Surge speed, m/s.
    pub u: f64,
    /// Heave speed (positive down), m/s.
    pub w: f64,
    pub pitch_rate: f64,
    pub yaw_rate: f64,
    /// Normalized motor outputs in [-1, 1], same order as the PWM array.
    pub motors: [f64; MOTOR_COUNT],
}

impl VehicleState {
    pub fn at(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
            ..Default::default()
        }
    }

    pub fn depth_rate(&self) -> f64 {
        -self.u * self.pitch.sin() + self.w
    }

    fn is_finite(&self) -> bool {
        [
            self.x,
            self.y,
            self.z,
            self.pitch,
            self.yaw,
            self.u,
            self.w,
            self.pitch_rate,
            self.yaw_rate,
        ]
        .iter()
        .chain(self.motors.iter())
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite vehicle state")]
    NonFinite,
    #[error("time step {0} outside (0, 1]")]
    BadStep(f64),
    #[error("simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("log output: {0}")]
    Io(#[from] std::io::Error),
}

/// Internal integration step.
const SUBSTEP: f64 = 0.01;

/// Advances the vehicle by `dt` seconds under constant PWM commands.
pub fn step_dynamics(
    state: &VehicleState,
    params: &VehicleParams,
    setpoints: &LlcSetpointsCWolf,
    dt: f64,
) -> Result<VehicleState, SimError> {
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(SimError::BadStep(dt));
    }
    if !state.is_finite() {
        return Err(SimError::NonFinite);
    }
    let cmd = setpoints
        .pwm
        .map(|p| f64::from(p.clamp(-1000, 1000)) / 1000.0);
    let n = (dt / SUBSTEP).ceil() as usize;
    let h = dt / n as f64;
    let lag = 1.0 - (-h / params.motor_tau).exp();
    let main = params.main_thrust();
    let mut s = *state;
    for _ in 0..n {
        for (m, c) in s.motors.iter_mut().zip(cmd) {
            *m += (c - *m) * lag;
        }
        let [port, stbd, lat_bow, lat_stern, vert_bow, vert_stern] = s.motors;
        let auth = params.authority(s.u);

        let thrust = main * (port + stbd);
        let drag = params.drag_quadratic * s.u * s.u.abs() + params.drag_linear * s.u;
        let du = (thrust - drag) / (params.mass + params.added_mass_surge);

        let yaw_moment = main * (port - stbd) * params.main_lever
            + params.lateral_thrust * auth * (lat_bow - lat_stern) * params.thruster_lever;
        let dr = (yaw_moment - params.yaw_damping * s.yaw_rate) / params.yaw_inertia;

        let vertical = params.vertical_thrust * auth;
        let heave_force = vertical * (vert_bow + vert_stern) - params.buoyancy;
        let heave_drag =
            params.heave_drag_quadratic * s.w * s.w.abs() + params.heave_drag_linear * s.w;
        let dw = (heave_force - heave_drag) / params.heave_mass;

        // Bow thruster pushing down lowers the nose.
        let pitch_moment = vertical * (vert_stern - vert_bow) * params.thruster_lever
            - params.pitch_restoring * s.pitch.sin()
            - params.pitch_damping * s.pitch_rate;
        let dq = pitch_moment / params.pitch_inertia;

        s.u = (s.u + du * h).clamp(params.min_speed, params.max_speed);
        s.yaw_rate += dr * h;
        s.w += dw * h;
        s.pitch_rate += dq * h;

        s.pitch += s.pitch_rate * h;
        if s.pitch.abs() > params.max_pitch {
            s.pitch = s.pitch.clamp(-params.max_pitch, params.max_pitch);
            s.pitch_rate = 0.0;
        }
        s.yaw = wrap_angle(s.yaw + s.yaw_rate * h);
        let horizontal = s.u * s.pitch.cos();
        s.x += horizontal * s.yaw.cos() * h;
        s.y += horizontal * s.yaw.sin() * h;
        s.z += s.depth_rate() * h;
        if s.z <= 0.0 {
            s.z = 0.0;
            s.w = s.w.max(0.0);
        }
    }
    if !s.is_finite() {
        return Err(SimError::NonFinite);
    }
    Ok(s)
}

/// Gaussian nitrate plume around a discharge point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlumeField {
    pub source: [f64; 3],
    /// Peak concentration above background, µg/l.
    pub peak: f64,
    pub sigma: [f64; 3],
    pub background: f64,
}

impl Default for PlumeField {
    fn default() -> Self {
        Self {
            source: [120.0, 110.0, 8.0],
            peak: 600.0,
            sigma: [60.0, 40.0, 6.0],
            background: 20.0,
        }
    }
}

pub const NITRATE_RANGE: (f64, f64) = (0.0, 1000.0);

impl PlumeField {
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let e: f64 = (0..3)
            .map(|i| (p[i] - self.source[i]).powi(2) / (2.0 * self.sigma[i].powi(2)))
            .sum();
        (self.background + self.peak * (-e).exp()).clamp(NITRATE_RANGE.0, NITRATE_RANGE.1)
    }
}

/// Water column seen by the sensors: the plume plus simple depth profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub plume: PlumeField,
    pub seabed_depth: f64,
    pub surface_o2: f64,
    pub o2_gradient: f64,
    pub surface_conductivity: f64,
    pub conductivity_gradient: f64,
    pub surface_temperature: f64,
    pub temperature_gradient: f64,
}

impl Default for Environment {
    fn default() -> Self {
        Self {
            plume: PlumeField::default(),
            seabed_depth: 60.0,
            surface_o2: 320.0,
            o2_gradient: -2.5,
            surface_conductivity: 30.0,
            conductivity_gradient: 0.08,
            surface_temperature: 11.0,
            temperature_gradient: -0.12,
        }
    }
}

/// One reading of every environmental channel, unclamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterSample {
    pub nitrate: f64,
    pub oxygen: f64,
    pub conductivity: f64,
    pub temperature: f64,
}

impl Environment {
    pub fn sample(&self, p: [f64; 3]) -> WaterSample {
        let z = p[2].max(0.0);
        let nitrate = self.plume.sample(p);
        // Discharge water carries less oxygen.
        let oxygen =
            self.surface_o2 + self.o2_gradient * z - 0.05 * (nitrate - self.plume.background);
        WaterSample {
            nitrate,
            oxygen,
            conductivity: self.surface_conductivity + self.conductivity_gradient * z,
            temperature: self.surface_temperature + self.temperature_gradient * z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub dt: f64,
    pub origin: GeoOrigin,
    pub start: [f64; 2],
    pub start_heading: f64,
    /// Dead-reckoning random walk, m/√s per horizontal axis.
    pub dr_noise: f64,
    pub dvl_range: f64,
    /// Simulated seconds per wall second; 0 runs free.
    pub realtime_factor: f64,
    /// Wall time to wait for the setpoint reply to one NavData.
    pub lockstep_timeout: Duration,
    /// Wall time to wait for the first LLC command before the first step,
    /// so runs start in the same mode however the programs were launched.
    /// Zero starts at once.
    pub control_wait: Duration,
    /// Consecutive missed replies after which the motors are stopped and the
    /// vehicle falls back to NoControl.
    pub max_missed: u32,
    pub max_time: f64,
    /// Steps between LLC_Status telegrams.
    pub status_every: u32,
    pub params: VehicleParams,
    pub environment: Environment,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dt: 0.1,
            origin: GeoOrigin::new(60.3, 5.25),
            start: [0.0, 0.0],
            start_heading: 0.0,
            dr_noise: 0.02,
            dvl_range: 80.0,
            realtime_factor: 0.0,
            lockstep_timeout: Duration::from_millis(200),
            control_wait: Duration::from_secs(30),
            max_missed: 25,
            max_time: 7200.0,
            status_every: 10,
            params: VehicleParams::default(),
            environment: Environment::default(),
        }
    }
}

/// Position estimate: exact at the surface, seeded random walk below.
#[derive(Debug, Clone)]
pub struct NavModel {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    pub error: [f64; 2],
}

impl NavModel {
    pub fn new(seed: u64, sigma: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise: Normal::new(0.0, sigma.max(0.0)).expect("finite sigma"),
            error: [0.0; 2],
        }
    }

    /// Accumulates drift over `dt` while submerged; resets on a GPS fix.
    pub fn propagate(&mut self, depth: f64, dt: f64) {
        if depth < GPS_DEPTH {
            self.error = [0.0; 2];
        } else {
            let scale = dt.sqrt();
            for e in &mut self.error {
                *e += self.noise.sample(&mut self.rng) * scale;
            }
        }
    }
}

pub fn emit_nav(
    state: &VehicleState,
    t: f64,
    origin: &GeoOrigin,
    error: [f64; 2],
    seabed_depth: f64,
    dvl_range: f64,
) -> NavData {
    let gps_fix = state.z < GPS_DEPTH;
    let (n, e) = if gps_fix {
        (state.x, state.y)
    } else {
        (state.x + error[0], state.y + error[1])
    };
    let (latitude, longitude) = origin.to_lat_lon(n, e);
    let hog = seabed_depth - state.z;
    NavData {
        timestamp: t,
        latitude,
        longitude,
        depth: state.z.max(0.0),
        roll: 0.0,
        pitch: state.pitch,
        yaw: wrap_angle(state.yaw),
        speed: state.u,
        height_over_ground: if hog <= dvl_range { hog } else { f64::NAN },
        gps_fix,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimOutcome {
    /// Direct control ended with a NoControl command.
    Completed,
    /// `max_time` (or the requested duration) elapsed first.
    TimedOut,
    /// The guidance stopped answering while in Direct mode.
    GuidanceLost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub outcome: SimOutcome,
    pub sim_time: f64,
    pub steps: u64,
    pub nav_sent: u64,
    pub missed_replies: u64,
    pub malformed: u64,
    pub final_state: VehicleState,
}

/// Stateful simulator core, independent of transport.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: SimConfig,
    pub state: VehicleState,
    pub nav: NavModel,
    pub mode: LlcMode,
    pub setpoints: LlcSetpointsCWolf,
    step: u64,
    was_direct: bool,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.params.validate()?;
        if !(config.dt > 0.0 && config.dt <= 1.0) {
            return Err(SimError::BadStep(config.dt));
        }
        let state = VehicleState::at(config.start[0], config.start[1], config.start_heading);
        let nav = NavModel::new(config.seed, config.dr_noise);
        Ok(Self {
            config,
            state,
            nav,
            mode: LlcMode::NoControl,
            setpoints: LlcSetpointsCWolf::default(),
            step: 0,
            was_direct: false,
        })
    }

    /// Simulation time of the current step; computed from the step count so
    /// it never accumulates rounding drift.
    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.dt
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn nav_data(&self) -> NavData {
        emit_nav(
            &self.state,
            self.time(),
            &self.config.origin,
            self.nav.error,
            self.config.environment.seabed_depth,
            self.config.dvl_range,
        )
    }

    /// Applies an inbound telegram. Returns a reply to send back, if any.
    pub fn apply(&mut self, t: &Telegram) -> Option<Telegram> {
        match t {
            Telegram::LlcCommand(c) => match c.mode {
                LlcMode::Controlled => Some(Telegram::LlcError(LlcError {
                    code: ERR_MODE_UNSUPPORTED,
                    message: "controlled mode is not supported; use direct".into(),
                })),
                mode => {
                    if mode == LlcMode::Direct {
                        self.was_direct = true;
                    } else {
                        self.setpoints = LlcSetpointsCWolf::default();
                    }
                    self.mode = mode;
                    None
                }
            },
            Telegram::LlcSetpointsCWolf(s) if self.mode == LlcMode::Direct => {
                self.setpoints = *s;
                None
            }
            _ => None,
        }
    }

    /// Direct control was active and has been released.
    pub fn finished(&self) -> bool {
        self.was_direct && self.mode == LlcMode::NoControl
    }

    pub fn advance(&mut self) -> Result<(), SimError> {
        let sp = if self.mode == LlcMode::Direct {
            self.setpoints
        } else {
            LlcSetpointsCWolf::default()
        };
        self.state = step_dynamics(&self.state, &self.config.params, &sp, self.config.dt)?;
        self.nav.propagate(self.state.z, self.config.dt);
        self.step += 1;
        Ok(())
    }

    pub fn status(&self) -> LlcStatus {
        let mut motors = [MotorStatus::default(); MOTOR_COUNT];
        for (m, out) in motors.iter_mut().zip(self.state.motors) {
            m.rpm = (out * self.config.params.max_rpm) as f32;
            m.enabled = self.mode == LlcMode::Direct;
        }
        LlcStatus {
            motors,
            mode_echo: self.mode,
        }
    }
}

pub const STATE_LOG_HEADER: &str = "t,x,y,z,yaw,pitch,u";

pub fn write_state_row<W: Write>(w: &mut W, t: f64, s: &VehicleState) -> std::io::Result<()> {
    writeln!(
        w,
        "{t:.1},{:.4},{:.4},{:.4},{:.6},{:.6},{:.4}",
        s.x, s.y, s.z, s.yaw, s.pitch, s.u
    )
}

/// Outbound links of the Control Computer.
pub struct SimPorts {
    pub to_sc: Box<dyn TelegramSink>,
    pub to_mc: Option<Box<dyn TelegramSink>>,
    pub inbound: Box<dyn TelegramSource>,
}

#[derive(Default)]
pub struct SimLogs {
    pub state: Option<Box<dyn Write + Send>>,
    pub telegrams: Option<TelegramLogWriter<Box<dyn Write + Send>>>,
}

struct Io<'a> {
    ports: &'a mut SimPorts,
    logs: &'a mut SimLogs,
    malformed: u64,
}

impl Io<'_> {
    fn send(&mut self, to_mc: bool, t: &Telegram, time: f64) -> Result<(), SimError> {
        if let Some(log) = self.logs.telegrams.as_mut() {
            log.record(
                time,
                Direction::Sent,
                &encode(t).map_err(TransportError::from)?,
            )?;
        }
        if to_mc {
            if let Some(mc) = self.ports.to_mc.as_ref() {
                mc.send(t)?;
            }
            Ok(())
        } else {
            Ok(self.ports.to_sc.send(t)?)
        }
    }

    /// Receives one telegram. `Ok(None)` on timeout or a malformed datagram.
    fn recv(&mut self, timeout: Duration, time: f64) -> Result<Option<Telegram>, SimError> {
        match self.ports.inbound.receive(timeout) {
            Ok(Some(Ok(t))) => {
                if let Some(log) = self.logs.telegrams.as_mut() {
                    log.record(
                        time,
                        Direction::Received,
                        &encode(&t).map_err(TransportError::from)?,
                    )?;
                }
                Ok(Some(t))
            }
            Ok(Some(Err(e))) => {
                log::warn!("simulator dropped malformed datagram: {e}");
                self.malformed += 1;
                Ok(None)
            }
            Ok(None) => Ok(None),
            // A vanished peer is handled by the lockstep timeout.
            Err(TransportError::Closed) => {
                std::thread::sleep(timeout.min(Duration::from_millis(5)));
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// Runs the fixed-step loop: publish NavData, wait for the setpoint reply
/// while in Direct mode, integrate, log.
///
/// `duration` caps the run in simulated seconds (defaults to
/// `config.max_time`).
pub fn run(
    sim: &mut Simulator,
    ports: &mut SimPorts,
    logs: &mut SimLogs,
    duration: Option<f64>,
) -> Result<SimReport, SimError> {
    let limit = duration.unwrap_or(sim.config.max_time);
    let dt = sim.config.dt;
    let steps_limit = (limit / dt).round() as u64;
    let mut io = Io {
        ports,
        logs,
        malformed: 0,
    };
    let wait_until = Instant::now() + sim.config.control_wait;
    loop {
        let left = wait_until.saturating_duration_since(Instant::now());
        if left.is_zero() {
            if !sim.config.control_wait.is_zero() {
                log::warn!(
                    "no LLC command within {:?}; starting uncontrolled",
                    sim.config.control_wait
                );
            }
            break;
        }
        if let Some(tg) = io.recv(left, 0.0)? {
            if let Some(reply) = sim.apply(&tg) {
                io.send(false, &reply, 0.0)?;
            }
            if matches!(tg, Telegram::LlcCommand(_)) {
                break;
            }
        }
    }
    let wall_start = Instant::now();
    if let Some(w) = io.logs.state.as_mut() {
        writeln!(w, "{STATE_LOG_HEADER}")?;
    }
    let (mut nav_sent, mut missed_total, mut missed_run) = (0u64, 0u64, 0u32);
    let mut outcome = SimOutcome::TimedOut;

    while sim.steps() < steps_limit {
        let t = sim.time();
        if sim.config.realtime_factor > 0.0 {
            let due = wall_start + Duration::from_secs_f64(t / sim.config.realtime_factor);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        while let Some(tg) = io.recv(Duration::ZERO, t)? {
            if let Some(reply) = sim.apply(&tg) {
                io.send(false, &reply, t)?;
            }
        }
        if sim.finished() {
            outcome = SimOutcome::Completed;
            break;
        }

        let nav = Telegram::NavData(sim.nav_data());
        io.send(false, &nav, t)?;
        io.send(true, &nav, t)?;
        nav_sent += 1;
        if sim.config.status_every > 0
            && sim
                .steps()
                .is_multiple_of(u64::from(sim.config.status_every))
        {
            io.send(false, &Telegram::LlcStatus(sim.status()), t)?;
        }

        if sim.mode == LlcMode::Direct {
            let deadline = Instant::now() + sim.config.lockstep_timeout;
            let mut answered = false;
            while !answered {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    break;
                }
                match io.recv(left, t)? {
                    Some(tg) => {
                        answered = matches!(tg, Telegram::LlcSetpointsCWolf(_))
                            || matches!(tg, Telegram::LlcCommand(c) if c.mode != LlcMode::Direct);
                        if let Some(reply) = sim.apply(&tg) {
                            io.send(false, &reply, t)?;
                        }
                    }
                    None => continue,
                }
            }
            if answered {
                missed_run = 0;
            } else {
                missed_total += 1;
                missed_run += 1;
                if missed_run >= sim.config.max_missed {
                    log::error!("no setpoints for {missed_run} steps; stopping motors");
                    sim.mode = LlcMode::NoControl;
                    sim.setpoints = LlcSetpointsCWolf::default();
                    outcome = SimOutcome::GuidanceLost;
                }
            }
        }
        if sim.finished() && outcome != SimOutcome::GuidanceLost {
            outcome = SimOutcome::Completed;
            break;
        }

        sim.advance()?;
        if let Some(w) = io.logs.state.as_mut() {
            write_state_row(w, sim.time(), &sim.state)?;
        }
        if outcome == SimOutcome::GuidanceLost {
            break;
        }
    }
    if let Some(w) = io.logs.state.as_mut() {
        w.flush()?;
    }
    if let Some(l) = io.logs.telegrams.as_mut() {
        l.flush()?;
    }
    Ok(SimReport {
        outcome,
        sim_time: sim.time(),
        steps: sim.steps(),
        nav_sent,
        missed_replies: missed_total,
        malformed: io.malformed,
        final_state: sim.state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::loopback_channel;

    fn pwm(v: [i16; 6]) -> LlcSetpointsCWolf {
        LlcSetpointsCWolf { pwm: v }
    }

    fn run_for(state: VehicleState, sp: LlcSetpointsCWolf, seconds: f64) -> VehicleState {
        let p = VehicleParams::default();
        let mut s = state;
        for _ in 0..(seconds / 0.1).round() as usize {
            s = step_dynamics(&s, &p, &sp, 0.1).unwrap();
        }
        s
    }

    #[test]
    fn zero_pwm_from_rest_is_equilibrium() {
        let start = VehicleState {
            z: 5.0,
            ..VehicleState::at(3.0, 4.0, 0.5)
        };
        assert_eq!(run_for(start, pwm([0; 6]), 10.0), start);
    }

    #[test]
    fn full_throttle_reaches_max_speed() {
        let s = run_for(
            VehicleState::default(),
            pwm([1000, 1000, 0, 0, 0, 0]),
            200.0,
        );
        assert!((s.u - 3.09).abs() / 3.09 < 0.02, "u = {}", s.u);
        assert!(s.yaw.abs() < 1e-12);
    }

    #[test]
    fn constant_speed_kinematics() {
        // Thrust that exactly balances drag at 1.5 m/s.
        let p = VehicleParams::default();
        let mut s = VehicleState {
            u: 1.5,
            ..Default::default()
        };
        let f = (p.drag_quadratic * 2.25 + p.drag_linear * 1.5) / 2.0 / p.main_thrust();
        s.motors[0] = f;
        s.motors[1] = f;
        let level = (f * 1000.0).round() as i16;
        let end = run_for(s, pwm([level, level, 0, 0, 0, 0]), 10.0);
        assert!((end.x - 15.0).abs() < 0.05, "x = {}", end.x);
        assert!(end.y.abs() < 1e-9);
    }

    #[test]
    fn speed_decays_monotonically_without_thrust() {
        let p = VehicleParams::default();
        let mut s = VehicleState {
            u: 2.5,
            ..Default::default()
        };
        for _ in 0..200 {
            let next = step_dynamics(&s, &p, &pwm([0; 6]), 0.1).unwrap();
            assert!(next.u <= s.u && next.u >= 0.0);
            s = next;
        }
    }

    #[test]
    fn vertical_thrusters_dive_and_surface_clamps() {
        let down = run_for(VehicleState::default(), pwm([0, 0, 0, 0, 1000, 1000]), 10.0);
        assert!(down.z > 3.0 && down.pitch.abs() < 1e-9);
        let up = run_for(down, pwm([0, 0, 0, 0, -1000, -1000]), 60.0);
        assert_eq!(up.z, 0.0);
    }

    #[test]
    fn pitch_is_bounded() {
        let s = run_for(
            VehicleState {
                u: 0.5,
                ..Default::default()
            },
            pwm([0, 0, 0, 0, 1000, -1000]),
            30.0,
        );
        assert!(s.pitch.abs() <= 45f64.to_radians() + 1e-12);
        assert!(s.pitch < 0.0, "bow down thrust lowers the nose");
    }

    #[test]
    fn port_thrust_turns_to_starboard() {
        let s = run_for(VehicleState::default(), pwm([600, 200, 0, 0, 0, 0]), 2.0);
        assert!(s.yaw > 0.0);
        let s = run_for(VehicleState::default(), pwm([0, 0, 800, -800, 0, 0]), 2.0);
        assert!(s.yaw > 0.0);
    }

    #[test]
    fn authority_fades_linearly() {
        let p = VehicleParams::default();
        assert_eq!(p.authority(0.8), 1.0);
        assert!((p.authority((1.0 + 3.09) / 2.0) - 0.5).abs() < 1e-12);
        assert_eq!(p.authority(3.09), 0.0);
    }

    #[test]
    fn bad_inputs_rejected() {
        let p = VehicleParams::default();
        assert!(matches!(
            step_dynamics(&VehicleState::default(), &p, &pwm([0; 6]), 0.0),
            Err(SimError::BadStep(_))
        ));
        let nan = VehicleState {
            x: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(
            step_dynamics(&nan, &p, &pwm([0; 6]), 0.1),
            Err(SimError::NonFinite)
        ));
    }

    #[test]
    fn plume_closed_form() {
        let f = PlumeField {
            source: [0.0, 0.0, 5.0],
            peak: 500.0,
            sigma: [10.0, 20.0, 3.0],
            background: 10.0,
        };
        assert_eq!(f.sample([0.0, 0.0, 5.0]), 510.0);
        assert!((f.sample([10.0, 0.0, 5.0]) - (10.0 + 500.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((f.sample([100.0, 0.0, 5.0]) - 10.0).abs() < 1e-6);
        let hot = PlumeField { peak: 1200.0, ..f };
        assert_eq!(hot.sample([0.0, 0.0, 5.0]), 1000.0);
    }

    #[test]
    fn nav_at_origin_and_height_over_ground() {
        let o = GeoOrigin::new(60.3, 5.25);
        let n = emit_nav(&VehicleState::default(), 0.0, &o, [0.0; 2], 60.0, 80.0);
        assert_eq!((n.latitude, n.longitude), (60.3, 5.25));
        assert!(n.gps_fix);
        let deep = VehicleState {
            z: 20.0,
            ..Default::default()
        };
        let n = emit_nav(&deep, 0.0, &o, [0.0; 2], 50.0, 80.0);
        assert_eq!(n.height_over_ground, 30.0);
        assert!(!n.gps_fix);
        assert!(emit_nav(&deep, 0.0, &o, [0.0; 2], 500.0, 80.0)
            .height_over_ground
            .is_nan());
    }

    #[test]
    fn drift_resets_at_surface() {
        let mut m = NavModel::new(7, 0.5);
        for _ in 0..100 {
            m.propagate(5.0, 0.1);
        }
        assert!(m.error != [0.0; 2]);
        m.propagate(0.1, 0.1);
        assert_eq!(m.error, [0.0; 2]);
    }

    #[test]
    fn idle_run_publishes_ten_hertz() {
        let (sc_tx, _sc_rx) = loopback_channel();
        let (_in_tx, in_rx) = loopback_channel();
        let mut ports = SimPorts {
            to_sc: Box::new(sc_tx),
            to_mc: None,
            inbound: Box::new(in_rx),
        };
        let cfg = SimConfig {
            control_wait: Duration::ZERO,
            ..SimConfig::default()
        };
        let mut sim = Simulator::new(cfg).unwrap();
        let start = sim.state;
        let report = run(&mut sim, &mut ports, &mut SimLogs::default(), Some(60.0)).unwrap();
        assert_eq!(report.nav_sent, 600);
        assert_eq!(report.outcome, SimOutcome::TimedOut);
        assert_eq!(sim.state, start);
    }

    #[test]
    fn controlled_mode_is_refused() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        let reply = sim.apply(&Telegram::LlcCommand(crate::protocol::LlcCommand {
            mode: LlcMode::Controlled,
        }));
        assert!(matches!(reply, Some(Telegram::LlcError(_))));
        assert_eq!(sim.mode, LlcMode::NoControl);
    }

    #[test]
    fn setpoints_ignored_outside_direct() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        sim.apply(&Telegram::LlcSetpointsCWolf(pwm([500; 6])));
        assert_eq!(sim.setpoints, LlcSetpointsCWolf::default());
        sim.apply(&Telegram::LlcCommand(crate::protocol::LlcCommand {
            mode: LlcMode::Direct,
        }));
        sim.apply(&Telegram::LlcSetpointsCWolf(pwm([500; 6])));
        assert_eq!(sim.setpoints, pwm([500; 6]));
        sim.apply(&Telegram::LlcCommand(crate::protocol::LlcCommand {
            mode: LlcMode::NoControl,
        }));
        assert!(sim.finished());
    }
}
