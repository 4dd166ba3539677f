//! Binary telegram log: one frame per datagram seen by a program.
//!
//! Frame layout (little-endian): `time: f64`, `direction: u8` (0 received,
//! 1 sent), `length: u16`, then `length` raw datagram bytes.

use std::io::{self, Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Received = 0,
    Sent = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedFrame {
    pub time: f64,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

pub struct TelegramLogWriter<W: Write> {
    out: W,
}

impl<W: Write> TelegramLogWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, time: f64, direction: Direction, bytes: &[u8]) -> io::Result<()> {
        let len = u16::try_from(bytes.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too long"))?;
        self.out.write_all(&time.to_le_bytes())?;
        self.out.write_all(&[direction as u8])?;
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(bytes)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_telegram_log<R: Read>(mut r: R) -> io::Result<Vec<LoggedFrame>> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut frames = Vec::new();
    let mut pos = 0;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    while pos < data.len() {
        if data.len() - pos < 11 {
            return Err(bad("truncated frame header"));
        }
        let time = f64::from_le_bytes(data[pos..pos + 8].try_into().expect("8 bytes"));
        let direction = match data[pos + 8] {
            0 => Direction::Received,
            1 => Direction::Sent,
            _ => return Err(bad("invalid direction byte")),
        };
        let len = u16::from_le_bytes([data[pos + 9], data[pos + 10]]) as usize;
        pos += 11;
        if data.len() - pos < len {
            return Err(bad("truncated frame body"));
        }
        frames.push(LoggedFrame {
            time,
            direction,
            bytes: data[pos..pos + len].to_vec(),
        });
        pos += len;
    }
    Ok(frames)
}
