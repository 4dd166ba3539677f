//! Measurement Computer: sensor cadence, fusion with navigation fixes and the
//! water-quality CSV.
//!
//! Sampling rides on simulation time taken from NavData timestamps. Fast
//! channels (oxygen, conductivity, temperature) share one cadence; nitrate
//! runs on its own slower one. Rows are merged per fast tick.

use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoOrigin;
use crate::protocol::{NavData, Telegram, TelegramSource, TransportError};
use crate::simulator::{Environment, WaterSample};

/// Tolerance for "t has reached a due time" against float rounding of
/// `step * dt` timestamps.
const DUE_EPS: f64 = 1e-9;

/// Oldest navigation fix a sample may carry, s.
pub const MAX_NAV_AGE: f64 = 1.0;

pub const MEASUREMENT_CSV_HEADER: [&str; 9] = [
    "t",
    "lat",
    "lon",
    "depth",
    "nano3_ugl",
    "o2_umoll",
    "cond_mscm",
    "temp_c",
    "flags",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    Nitrate,
    Oxygen,
    Conductivity,
    Temperature,
}

impl Channel {
    pub const ALL: [Channel; 4] = [
        Channel::Nitrate,
        Channel::Oxygen,
        Channel::Conductivity,
        Channel::Temperature,
    ];

    pub fn flag_name(self) -> &'static str {
        match self {
            Channel::Nitrate => "nano3",
            Channel::Oxygen => "o2",
            Channel::Conductivity => "cond",
            Channel::Temperature => "temp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub nitrate_range: (f64, f64),
    pub nitrate_period: f64,
    pub oxygen_range: (f64, f64),
    pub conductivity_range: (f64, f64),
    pub temperature_range: (f64, f64),
    /// Shared period of oxygen, conductivity and temperature.
    pub fast_period: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            nitrate_range: (0.0, 1000.0),
            nitrate_period: 5.0,
            oxygen_range: (0.0, 500.0),
            conductivity_range: (0.0, 75.0),
            temperature_range: (-5.0, 40.0),
            fast_period: 1.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), MeasurementError> {
        for (name, p) in [
            ("nitrate_period", self.nitrate_period),
            ("fast_period", self.fast_period),
        ] {
            if !(p.is_finite() && p > 0.0) {
                return Err(MeasurementError::Config(format!(
                    "{name} must be > 0 (got {p})"
                )));
            }
        }
        Ok(())
    }

    pub fn range(&self, c: Channel) -> (f64, f64) {
        match c {
            Channel::Nitrate => self.nitrate_range,
            Channel::Oxygen => self.oxygen_range,
            Channel::Conductivity => self.conductivity_range,
            Channel::Temperature => self.temperature_range,
        }
    }

    pub fn period(&self, c: Channel) -> f64 {
        match c {
            Channel::Nitrate => self.nitrate_period,
            _ => self.fast_period,
        }
    }
}

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("time went backwards: {now} after {last}")]
    TimeReversed { last: f64, now: f64 },
    #[error("sensor config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Due-time bookkeeping per cadence. Due times are `k * period`, computed
/// from the counter so they never drift.
#[derive(Debug, Clone)]
pub struct Schedule {
    fast_period: f64,
    nitrate_period: f64,
    next_fast: u64,
    next_nitrate: u64,
    last_t: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Due {
    pub fast: bool,
    pub nitrate: bool,
}

impl Due {
    pub fn any(self) -> bool {
        self.fast || self.nitrate
    }

    pub fn channels(self) -> Vec<Channel> {
        Channel::ALL
            .into_iter()
            .filter(|c| {
                if *c == Channel::Nitrate {
                    self.nitrate
                } else {
                    self.fast
                }
            })
            .collect()
    }
}

impl Schedule {
    pub fn new(cfg: &SensorConfig) -> Self {
        Self {
            fast_period: cfg.fast_period,
            nitrate_period: cfg.nitrate_period,
            next_fast: 0,
            next_nitrate: 0,
            last_t: None,
        }
    }

    /// Channels due at `t`. After a gap longer than one period only one
    /// sample is taken and the cadence resumes at the next multiple.
    pub fn tick(&mut self, t: f64) -> Result<Due, MeasurementError> {
        if let Some(last) = self.last_t {
            if t < last {
                return Err(MeasurementError::TimeReversed { last, now: t });
            }
        }
        self.last_t = Some(t);
        let fast = advance(&mut self.next_fast, self.fast_period, t);
        let nitrate = advance(&mut self.next_nitrate, self.nitrate_period, t);
        Ok(Due { fast, nitrate })
    }
}

fn advance(next: &mut u64, period: f64, t: f64) -> bool {
    if t + DUE_EPS < *next as f64 * period {
        return false;
    }
    *next = ((t + DUE_EPS) / period).floor() as u64 + 1;
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub timestamp: f64,
    pub latitude: f64,
    pub longitude: f64,
    pub depth: f64,
    /// Timestamp of the navigation fix the position came from.
    pub nav_time: f64,
    pub nano3: Option<f64>,
    pub o2: Option<f64>,
    pub conductivity: Option<f64>,
    pub temperature: Option<f64>,
    /// Channels whose raw value hit a range limit.
    pub clamped: Vec<Channel>,
}

impl MeasurementSample {
    pub fn value(&self, c: Channel) -> Option<f64> {
        match c {
            Channel::Nitrate => self.nano3,
            Channel::Oxygen => self.o2,
            Channel::Conductivity => self.conductivity,
            Channel::Temperature => self.temperature,
        }
    }

    fn slot(&mut self, c: Channel) -> &mut Option<f64> {
        match c {
            Channel::Nitrate => &mut self.nano3,
            Channel::Oxygen => &mut self.o2,
            Channel::Conductivity => &mut self.conductivity,
            Channel::Temperature => &mut self.temperature,
        }
    }

    pub fn flags(&self) -> String {
        self.clamped
            .iter()
            .map(|c| format!("clamp_{}", c.flag_name()))
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn raw(ws: &WaterSample, c: Channel) -> f64 {
    match c {
        Channel::Nitrate => ws.nitrate,
        Channel::Oxygen => ws.oxygen,
        Channel::Conductivity => ws.conductivity,
        Channel::Temperature => ws.temperature,
    }
}

/// The MC core: owns the schedule, the latest fix and the sample list.
#[derive(Debug, Clone)]
pub struct MeasurementComputer {
    pub config: SensorConfig,
    schedule: Schedule,
    last_nav: Option<NavData>,
    samples: Vec<MeasurementSample>,
    dropped: u64,
}

impl MeasurementComputer {
    pub fn new(config: SensorConfig) -> Result<Self, MeasurementError> {
        config.validate()?;
        Ok(Self {
            schedule: Schedule::new(&config),
            config,
            last_nav: None,
            samples: Vec::new(),
            dropped: 0,
        })
    }

    pub fn on_nav(&mut self, nav: NavData) {
        self.last_nav = Some(nav);
    }

    /// Samples every due channel at `t` from `read`, which maps a position
    /// (local NED) to raw channel values.
    pub fn tick(
        &mut self,
        t: f64,
        read: impl FnOnce(&NavData) -> WaterSample,
    ) -> Result<Option<&MeasurementSample>, MeasurementError> {
        let due = self.schedule.tick(t)?;
        if !due.any() {
            return Ok(None);
        }
        let nav = match self.last_nav {
            Some(n) if t - n.timestamp <= MAX_NAV_AGE => n,
            _ => {
                self.dropped += 1;
                return Ok(None);
            }
        };
        let ws = read(&nav);
        self.samples.push(self.record(t, &nav, &ws, due));
        Ok(self.samples.last())
    }

    /// Builds one clamped sample row from raw values.
    pub fn record(&self, t: f64, nav: &NavData, ws: &WaterSample, due: Due) -> MeasurementSample {
        let mut s = MeasurementSample {
            timestamp: t,
            latitude: nav.latitude,
            longitude: nav.longitude,
            depth: nav.depth,
            nav_time: nav.timestamp,
            nano3: None,
            o2: None,
            conductivity: None,
            temperature: None,
            clamped: Vec::new(),
        };
        for c in due.channels() {
            let (lo, hi) = self.config.range(c);
            let v = raw(ws, c);
            let clamped = v.clamp(lo, hi);
            if v <= lo || v >= hi {
                s.clamped.push(c);
            }
            *s.slot(c) = Some(clamped);
        }
        s
    }

    pub fn samples(&self) -> &[MeasurementSample] {
        &self.samples
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn export_csv<W: Write>(&self, w: W) -> Result<(), MeasurementError> {
        write_measurements_csv(&self.samples, w)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

pub fn write_measurements_csv<W: Write>(
    samples: &[MeasurementSample],
    w: W,
) -> Result<(), MeasurementError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(MEASUREMENT_CSV_HEADER)?;
    for s in samples {
        out.write_record([
            format!("{:.3}", s.timestamp),
            format!("{:.7}", s.latitude),
            format!("{:.7}", s.longitude),
            format!("{:.3}", s.depth),
            opt(s.nano3),
            opt(s.o2),
            opt(s.conductivity),
            opt(s.temperature),
            s.flags(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the environment at the navigated position.
pub fn environment_reader<'a>(
    env: &'a Environment,
    origin: &'a GeoOrigin,
) -> impl Fn(&NavData) -> WaterSample + 'a {
    move |nav| {
        let (x, y) = origin.to_local(nav.latitude, nav.longitude);
        env.sample([x, y, nav.depth])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub samples: usize,
    pub dropped: u64,
    pub malformed: u64,
}

/// MC event loop: every NavData updates the fix and drives the sampling
/// clock. Returns once the source closes or `idle` passes without traffic
/// after at least one fix.
pub fn run_measurement<S: TelegramSource + ?Sized>(
    mc: &mut MeasurementComputer,
    source: &mut S,
    env: &Environment,
    origin: &GeoOrigin,
    idle: Duration,
    stop: &std::sync::atomic::AtomicBool,
) -> Result<McReport, MeasurementError> {
    use std::sync::atomic::Ordering;
    let read = environment_reader(env, origin);
    let mut malformed = 0;
    let mut last_rx = std::time::Instant::now();
    loop {
        match source.receive(Duration::from_millis(20)) {
            Ok(Some(Ok(Telegram::NavData(nav)))) => {
                last_rx = std::time::Instant::now();
                mc.on_nav(nav);
                mc.tick(nav.timestamp, &read)?;
            }
            Ok(Some(Ok(_))) => {}
            Ok(Some(Err(e))) => {
                log::warn!("MC dropped malformed datagram: {e}");
                malformed += 1;
            }
            Ok(None) => {
                if stop.load(Ordering::Acquire) && last_rx.elapsed() >= idle {
                    break;
                }
            }
            Err(TransportError::Closed) => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(McReport {
        samples: mc.samples().len(),
        dropped: mc.dropped(),
        malformed,
    })
}
