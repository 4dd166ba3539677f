//! Telegram set exchanged between the control, scientific and measurement
//! computers.
//!
//! Every datagram carries exactly one telegram: a 4-byte header
//! (`message_id: u16`, `payload_length: u16`, little-endian) followed by a
//! fixed-layout packed payload. Layouts are listed in `docs/wire-format.md`.

mod dispatch;
mod telegram_log;
mod transport;

pub use dispatch::{DispatchHandle, DispatchStats, Dispatcher};
pub use telegram_log::{read_telegram_log, Direction, LoggedFrame, TelegramLogWriter};
pub use transport::{
    loopback_channel, open_udp_port, LoopbackReceiver, LoopbackSender, TelegramSink,
    TelegramSource, TransportError, UdpPort, UdpSender, MAX_DATAGRAM,
};

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_LEN: usize = 4;

pub const ID_NAV_DATA: u16 = 0x0001;
pub const ID_LLC_COMMAND: u16 = 0x0002;
pub const ID_LLC_SETPOINT: u16 = 0x0003;
pub const ID_LLC_SETPOINTS_CWOLF: u16 = 0x0004;
pub const ID_LLC_STATUS: u16 = 0x0005;
pub const ID_LLC_ERROR: u16 = 0x0006;

pub const NAV_DATA_LEN: usize = 80;
pub const LLC_COMMAND_LEN: usize = 2;
pub const LLC_SETPOINT_LEN: usize = 24;
pub const LLC_SETPOINTS_CWOLF_LEN: usize = 12;
pub const LLC_STATUS_LEN: usize = 6 * 5 + 2;

pub const PWM_LIMIT: i16 = 1000;
pub const MOTOR_COUNT: usize = 6;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NavData {
    /// Seconds since simulation start.
    pub timestamp: f64,
    pub latitude: f64,
    pub longitude: f64,
    pub depth: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub speed: f64,
    /// NaN when the seabed is out of DVL range.
    pub height_over_ground: f64,
    /// Position comes from a GPS fix rather than dead reckoning.
    pub gps_fix: bool,
}

impl PartialEq for NavData {
    /// NaN `height_over_ground` equals NaN; every other field compares as f64.
    fn eq(&self, o: &Self) -> bool {
        let hog = (self.height_over_ground.is_nan() && o.height_over_ground.is_nan())
            || self.height_over_ground == o.height_over_ground;
        hog && self.timestamp == o.timestamp
            && self.latitude == o.latitude
            && self.longitude == o.longitude
            && self.depth == o.depth
            && self.roll == o.roll
            && self.pitch == o.pitch
            && self.yaw == o.yaw
            && self.speed == o.speed
            && self.gps_fix == o.gps_fix
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u16)]
pub enum LlcMode {
    NoControl = 0,
    Controlled = 1,
    Direct = 2,
}

impl TryFrom<u16> for LlcMode {
    type Error = DecodeError;

    fn try_from(v: u16) -> Result<Self, DecodeError> {
        match v {
            0 => Ok(LlcMode::NoControl),
            1 => Ok(LlcMode::Controlled),
            2 => Ok(LlcMode::Direct),
            other => Err(DecodeError::InvalidField {
                field: "mode",
                reason: format!("unknown discriminant {other}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlcCommand {
    pub mode: LlcMode,
}

/// Controlled-mode command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlcSetpoint {
    pub heading: f64,
    pub depth: f64,
    pub speed: f64,
}

/// Motor order inside [`LlcSetpointsCWolf::pwm`] and [`LlcStatus::motors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Motor {
    MainPort = 0,
    MainStbd = 1,
    LateralBow = 2,
    LateralStern = 3,
    VerticalBow = 4,
    VerticalStern = 5,
}

/// Direct-mode per-motor PWM, normalized to `[-1000, 1000]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LlcSetpointsCWolf {
    pub pwm: [i16; MOTOR_COUNT],
}

impl LlcSetpointsCWolf {
    pub fn get(&self, m: Motor) -> i16 {
        self.pwm[m as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotorStatus {
    pub rpm: f32,
    pub enabled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LlcStatus {
    pub motors: [MotorStatus; MOTOR_COUNT],
    pub mode_echo: LlcMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlcError {
    pub code: u16,
    /// At most 255 bytes of UTF-8.
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Telegram {
    NavData(NavData),
    LlcCommand(LlcCommand),
    LlcSetpoint(LlcSetpoint),
    LlcSetpointsCWolf(LlcSetpointsCWolf),
    LlcStatus(LlcStatus),
    LlcError(LlcError),
}

impl Telegram {
    pub fn message_id(&self) -> u16 {
        match self {
            Telegram::NavData(_) => ID_NAV_DATA,
            Telegram::LlcCommand(_) => ID_LLC_COMMAND,
            Telegram::LlcSetpoint(_) => ID_LLC_SETPOINT,
            Telegram::LlcSetpointsCWolf(_) => ID_LLC_SETPOINTS_CWOLF,
            Telegram::LlcStatus(_) => ID_LLC_STATUS,
            Telegram::LlcError(_) => ID_LLC_ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        message_name(self.message_id()).expect("known id")
    }

    /// Checks the field invariants that `encode` and `decode` enforce.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Telegram::NavData(n) => validate_nav(n),
            Telegram::LlcCommand(_) => Ok(()),
            Telegram::LlcSetpoint(s) => {
                if !(s.heading.is_finite() && s.depth.is_finite() && s.speed.is_finite()) {
                    Err("setpoint fields must be finite".into())
                } else if s.depth < 0.0 || s.speed < 0.0 {
                    Err("setpoint depth and speed must be >= 0".into())
                } else {
                    Ok(())
                }
            }
            Telegram::LlcSetpointsCWolf(s) => {
                match s.pwm.iter().position(|p| p.abs() > PWM_LIMIT) {
                    Some(i) => Err(format!(
                        "pwm[{i}] = {} outside [-{PWM_LIMIT}, {PWM_LIMIT}]",
                        s.pwm[i]
                    )),
                    None => Ok(()),
                }
            }
            Telegram::LlcStatus(s) => {
                if s.motors.iter().all(|m| m.rpm.is_finite()) {
                    Ok(())
                } else {
                    Err("motor rpm must be finite".into())
                }
            }
            Telegram::LlcError(e) => {
                if e.message.len() > 255 {
                    Err(format!(
                        "error message is {} bytes, limit 255",
                        e.message.len()
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for Telegram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

pub fn message_name(id: u16) -> Option<&'static str> {
    Some(match id {
        ID_NAV_DATA => "NAV_Data",
        ID_LLC_COMMAND => "LLC_Command",
        ID_LLC_SETPOINT => "LLC_Setpoint",
        ID_LLC_SETPOINTS_CWOLF => "LLC_Setpoints_CWolf",
        ID_LLC_STATUS => "LLC_Status",
        ID_LLC_ERROR => "LLC_Error",
        _ => return None,
    })
}

fn validate_nav(n: &NavData) -> Result<(), String> {
    let finite = [
        n.timestamp,
        n.latitude,
        n.longitude,
        n.depth,
        n.roll,
        n.pitch,
        n.yaw,
        n.speed,
    ];
    if finite.iter().any(|v| !v.is_finite()) {
        return Err("navigation fields other than height_over_ground must be finite".into());
    }
    if n.depth < 0.0 {
        return Err(format!("depth {} < 0", n.depth));
    }
    if !(-PI..PI).contains(&n.yaw) {
        return Err(format!("yaw {} outside [-pi, pi)", n.yaw));
    }
    if !(-90.0..=90.0).contains(&n.latitude) {
        return Err(format!("latitude {} outside [-90, 90]", n.latitude));
    }
    if !(-180.0..180.0).contains(&n.longitude) {
        return Err(format!("longitude {} outside [-180, 180)", n.longitude));
    }
    if n.height_over_ground.is_infinite() {
        return Err("height_over_ground must be finite or NaN".into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot encode {name}: {reason}")]
pub struct EncodeError {
    pub name: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("datagram of {0} bytes is shorter than the 4-byte header")]
    TruncatedHeader(usize),
    #[error("unknown message id {0:#06x}")]
    UnknownId(u16),
    #[error("header declares {declared} payload bytes but only {actual} arrived")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("{extra} trailing bytes after a {declared}-byte payload")]
    TrailingBytes { declared: usize, extra: usize },
    #[error("{name} payload must be {expected} bytes, header declares {declared}")]
    PayloadSize {
        name: &'static str,
        expected: usize,
        declared: usize,
    },
    #[error("LLC_Error message is not valid UTF-8")]
    InvalidUtf8,
    #[error("invalid {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

struct Writer(Vec<u8>);

impl Writer {
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i16(&mut self, v: i16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N]
            .try_into()
            .expect("length checked");
        self.pos += N;
        out
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn i16(&mut self) -> i16 {
        i16::from_le_bytes(self.take())
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn bool(&mut self, field: &'static str) -> Result<bool, DecodeError> {
        match self.u8() {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(DecodeError::InvalidField {
                field,
                reason: format!("boolean byte {b}"),
            }),
        }
    }
}

/// Serializes one telegram to a datagram.
pub fn encode(t: &Telegram) -> Result<Vec<u8>, EncodeError> {
    t.validate().map_err(|reason| EncodeError {
        name: t.name(),
        reason,
    })?;
    let mut w = Writer(Vec::with_capacity(HEADER_LEN + NAV_DATA_LEN));
    w.u16(t.message_id());
    w.u16(0);
    match t {
        Telegram::NavData(n) => {
            for v in [
                n.timestamp,
                n.latitude,
                n.longitude,
                n.depth,
                n.roll,
                n.pitch,
                n.yaw,
                n.speed,
                n.height_over_ground,
            ] {
                w.f64(v);
            }
            w.f64(if n.gps_fix { 1.0 } else { 0.0 });
        }
        Telegram::LlcCommand(c) => w.u16(c.mode as u16),
        Telegram::LlcSetpoint(s) => {
            w.f64(s.heading);
            w.f64(s.depth);
            w.f64(s.speed);
        }
        Telegram::LlcSetpointsCWolf(s) => s.pwm.iter().for_each(|p| w.i16(*p)),
        Telegram::LlcStatus(s) => {
            for m in &s.motors {
                w.f32(m.rpm);
                w.u8(u8::from(m.enabled));
            }
            w.u16(s.mode_echo as u16);
        }
        Telegram::LlcError(e) => {
            w.u16(e.code);
            w.u8(e.message.len() as u8);
            w.0.extend_from_slice(e.message.as_bytes());
        }
    }
    let payload = (w.0.len() - HEADER_LEN) as u16;
    w.0[2..4].copy_from_slice(&payload.to_le_bytes());
    Ok(w.0)
}

fn fixed_len(id: u16) -> Option<(&'static str, usize)> {
    Some(match id {
        ID_NAV_DATA => ("NAV_Data", NAV_DATA_LEN),
        ID_LLC_COMMAND => ("LLC_Command", LLC_COMMAND_LEN),
        ID_LLC_SETPOINT => ("LLC_Setpoint", LLC_SETPOINT_LEN),
        ID_LLC_SETPOINTS_CWOLF => ("LLC_Setpoints_CWolf", LLC_SETPOINTS_CWOLF_LEN),
        ID_LLC_STATUS => ("LLC_Status", LLC_STATUS_LEN),
        _ => return None,
    })
}

/// Parses one datagram. Never panics; every malformed input maps to a
/// [`DecodeError`] kind.
pub fn decode(bytes: &[u8]) -> Result<Telegram, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::TruncatedHeader(bytes.len()));
    }
    let id = u16::from_le_bytes([bytes[0], bytes[1]]);
    let declared = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
    let payload = &bytes[HEADER_LEN..];
    if message_name(id).is_none() {
        return Err(DecodeError::UnknownId(id));
    }
    if payload.len() < declared {
        return Err(DecodeError::LengthMismatch {
            declared,
            actual: payload.len(),
        });
    }
    if payload.len() > declared {
        return Err(DecodeError::TrailingBytes {
            declared,
            extra: payload.len() - declared,
        });
    }
    if let Some((name, expected)) = fixed_len(id) {
        if declared != expected {
            return Err(DecodeError::PayloadSize {
                name,
                expected,
                declared,
            });
        }
    }
    let mut r = Reader {
        buf: payload,
        pos: 0,
    };
    let t = match id {
        ID_NAV_DATA => {
            let mut v = [0.0; 10];
            v.iter_mut().for_each(|x| *x = r.f64());
            let gps_fix = if v[9] == 0.0 {
                false
            } else if v[9] == 1.0 {
                true
            } else {
                return Err(DecodeError::InvalidField {
                    field: "gps_fix",
                    reason: format!("{} is not 0 or 1", v[9]),
                });
            };
            Telegram::NavData(NavData {
                timestamp: v[0],
                latitude: v[1],
                longitude: v[2],
                depth: v[3],
                roll: v[4],
                pitch: v[5],
                yaw: v[6],
                speed: v[7],
                height_over_ground: v[8],
                gps_fix,
            })
        }
        ID_LLC_COMMAND => Telegram::LlcCommand(LlcCommand {
            mode: LlcMode::try_from(r.u16())?,
        }),
        ID_LLC_SETPOINT => Telegram::LlcSetpoint(LlcSetpoint {
            heading: r.f64(),
            depth: r.f64(),
            speed: r.f64(),
        }),
        ID_LLC_SETPOINTS_CWOLF => {
            let mut pwm = [0i16; MOTOR_COUNT];
            pwm.iter_mut().for_each(|p| *p = r.i16());
            Telegram::LlcSetpointsCWolf(LlcSetpointsCWolf { pwm })
        }
        ID_LLC_STATUS => {
            let mut motors = [MotorStatus::default(); MOTOR_COUNT];
            for m in motors.iter_mut() {
                m.rpm = r.f32();
                m.enabled = r.bool("enabled")?;
            }
            Telegram::LlcStatus(LlcStatus {
                motors,
                mode_echo: LlcMode::try_from(r.u16())?,
            })
        }
        ID_LLC_ERROR => {
            if declared < 3 {
                return Err(DecodeError::PayloadSize {
                    name: "LLC_Error",
                    expected: 3,
                    declared,
                });
            }
            let code = r.u16();
            let len = r.u8() as usize;
            if declared != 3 + len {
                return Err(DecodeError::PayloadSize {
                    name: "LLC_Error",
                    expected: 3 + len,
                    declared,
                });
            }
            let message = std::str::from_utf8(&payload[3..])
                .map_err(|_| DecodeError::InvalidUtf8)?
                .to_string();
            Telegram::LlcError(LlcError { code, message })
        }
        _ => unreachable!("id checked above"),
    };
    t.validate().map_err(|reason| DecodeError::InvalidField {
        field: "payload",
        reason,
    })?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn nav() -> NavData {
        NavData {
            timestamp: 12.5,
            latitude: 60.3,
            longitude: 5.25,
            depth: 3.0,
            roll: 0.0,
            pitch: -0.1,
            yaw: 1.0,
            speed: 1.5,
            height_over_ground: f64::NAN,
            gps_fix: false,
        }
    }

    #[test]
    fn llc_command_golden_bytes() {
        let b = encode(&Telegram::LlcCommand(LlcCommand {
            mode: LlcMode::NoControl,
        }))
        .unwrap();
        assert_eq!(b, [0x02, 0x00, 0x02, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn nav_data_is_80_bytes() {
        let b = encode(&Telegram::NavData(nav())).unwrap();
        assert_eq!(b.len(), 84);
        assert_eq!(u16::from_le_bytes([b[2], b[3]]), 80);
    }

    #[test]
    fn nan_height_survives() {
        let t = Telegram::NavData(nav());
        assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn truncated_nav_is_length_mismatch() {
        let b = encode(&Telegram::NavData(nav())).unwrap();
        assert_eq!(
            decode(&b[..44]),
            Err(DecodeError::LengthMismatch {
                declared: 80,
                actual: 40
            })
        );
    }

    #[test]
    fn unknown_id() {
        assert_eq!(
            decode(&[0xFF, 0x00, 0x00, 0x00]),
            Err(DecodeError::UnknownId(0x00FF))
        );
    }

    #[test]
    fn trailing_bytes() {
        let mut b = encode(&Telegram::LlcCommand(LlcCommand {
            mode: LlcMode::Direct,
        }))
        .unwrap();
        b.push(0);
        assert_eq!(
            decode(&b),
            Err(DecodeError::TrailingBytes {
                declared: 2,
                extra: 1
            })
        );
    }

    #[test]
    fn bad_utf8_in_error_message() {
        let b = [0x06, 0x00, 0x05, 0x00, 0x01, 0x00, 0x02, 0xC3, 0x28];
        assert_eq!(decode(&b), Err(DecodeError::InvalidUtf8));
    }

    #[test]
    fn error_length_prefix_must_match() {
        let b = [0x06, 0x00, 0x05, 0x00, 0x01, 0x00, 0x03, b'a', b'b'];
        assert!(matches!(decode(&b), Err(DecodeError::PayloadSize { .. })));
    }

    #[test]
    fn pwm_out_of_range_refused() {
        let t = Telegram::LlcSetpointsCWolf(LlcSetpointsCWolf {
            pwm: [0, 0, 1001, 0, 0, 0],
        });
        assert!(encode(&t).is_err());
        let mut raw = encode(&Telegram::LlcSetpointsCWolf(LlcSetpointsCWolf::default())).unwrap();
        raw[4..6].copy_from_slice(&1500i16.to_le_bytes());
        assert!(matches!(
            decode(&raw),
            Err(DecodeError::InvalidField { .. })
        ));
    }

    #[test]
    fn invalid_mode_discriminant() {
        assert!(matches!(
            decode(&[0x02, 0x00, 0x02, 0x00, 0x03, 0x00]),
            Err(DecodeError::InvalidField { field: "mode", .. })
        ));
    }

    #[test]
    fn long_error_message_refused() {
        let t = Telegram::LlcError(LlcError {
            code: 1,
            message: "x".repeat(256),
        });
        assert!(encode(&t).is_err());
    }

    #[test]
    fn header_length_matches_payload() {
        let t = Telegram::LlcError(LlcError {
            code: 7,
            message: "thruster fault".into(),
        });
        let b = encode(&t).unwrap();
        assert_eq!(
            u16::from_le_bytes([b[2], b[3]]) as usize,
            b.len() - HEADER_LEN
        );
        assert_eq!(decode(&b).unwrap(), t);
    }
}
