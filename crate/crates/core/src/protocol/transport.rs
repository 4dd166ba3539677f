//! Port abstraction: the same program code talks to a UDP socket or to an
//! in-process queue.
//!
//! Loopback ports carry encoded datagrams, so both transports exercise the
//! codec identically.

use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::{decode, encode, DecodeError, EncodeError, Telegram};

/// Largest UDP payload over IPv4.
pub const MAX_DATAGRAM: usize = 65_507;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("invalid address `{0}`")]
    Address(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("datagram of {0} bytes exceeds the UDP limit")]
    Oversized(usize),
    #[error("port is closed")]
    Closed,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Output side of a program interface.
pub trait TelegramSink: Send {
    fn send(&self, t: &Telegram) -> Result<(), TransportError>;
}

/// Input side of a program interface. `Ok(None)` means the timeout expired;
/// `Ok(Some(Err(_)))` is a datagram that failed to decode.
pub trait TelegramSource: Send {
    fn receive(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<Result<Telegram, DecodeError>>, TransportError>;
}

impl<T: TelegramSink + Sync + ?Sized> TelegramSink for Arc<T> {
    fn send(&self, t: &Telegram) -> Result<(), TransportError> {
        (**self).send(t)
    }
}

impl<T: TelegramSink + ?Sized> TelegramSink for Box<T> {
    fn send(&self, t: &Telegram) -> Result<(), TransportError> {
        (**self).send(t)
    }
}

impl<T: TelegramSource + ?Sized> TelegramSource for Box<T> {
    fn receive(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<Result<Telegram, DecodeError>>, TransportError> {
        (**self).receive(timeout)
    }
}

fn resolve(addr: &str) -> Result<SocketAddr, TransportError> {
    addr.to_socket_addrs()
        .map_err(|_| TransportError::Address(addr.to_string()))?
        .next()
        .ok_or_else(|| TransportError::Address(addr.to_string()))
}

/// UDP endpoint bound to one local address, sending to one peer.
#[derive(Debug)]
pub struct UdpPort {
    socket: Arc<UdpSocket>,
    peer: SocketAddr,
    closed: Arc<AtomicBool>,
    timeout: Option<Duration>,
    nonblocking: bool,
    buf: Vec<u8>,
}

/// Additional send-only handle sharing a [`UdpPort`] socket.
#[derive(Debug, Clone)]
pub struct UdpSender {
    socket: Arc<UdpSocket>,
    peer: SocketAddr,
    closed: Arc<AtomicBool>,
}

pub fn open_udp_port(bind_addr: &str, peer_addr: &str) -> Result<UdpPort, TransportError> {
    let peer = resolve(peer_addr)?;
    let bind = resolve(bind_addr)?;
    let socket = UdpSocket::bind(bind).map_err(|source| TransportError::Bind {
        addr: bind_addr.to_string(),
        source,
    })?;
    Ok(UdpPort {
        socket: Arc::new(socket),
        peer,
        closed: Arc::new(AtomicBool::new(false)),
        timeout: None,
        nonblocking: false,
        buf: vec![0; MAX_DATAGRAM + 1],
    })
}

fn send_datagram(
    socket: &UdpSocket,
    peer: SocketAddr,
    closed: &AtomicBool,
    bytes: &[u8],
) -> Result<(), TransportError> {
    if closed.load(Ordering::Acquire) {
        return Err(TransportError::Closed);
    }
    if bytes.len() > MAX_DATAGRAM {
        return Err(TransportError::Oversized(bytes.len()));
    }
    socket.send_to(bytes, peer)?;
    Ok(())
}

impl UdpPort {
    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.socket.local_addr()?)
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    /// Send-only handle to another peer over the same socket.
    pub fn sender_to(&self, peer_addr: &str) -> Result<UdpSender, TransportError> {
        Ok(UdpSender {
            socket: Arc::clone(&self.socket),
            peer: resolve(peer_addr)?,
            closed: Arc::clone(&self.closed),
        })
    }

    pub fn sender(&self) -> UdpSender {
        UdpSender {
            socket: Arc::clone(&self.socket),
            peer: self.peer,
            closed: Arc::clone(&self.closed),
        }
    }

    pub fn send_raw(&self, bytes: &[u8]) -> Result<(), TransportError> {
        send_datagram(&self.socket, self.peer, &self.closed, bytes)
    }

    /// Further sends on this port and its senders fail with `Closed`.
    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }
}

impl TelegramSink for UdpPort {
    fn send(&self, t: &Telegram) -> Result<(), TransportError> {
        self.send_raw(&encode(t)?)
    }
}

impl TelegramSink for UdpSender {
    fn send(&self, t: &Telegram) -> Result<(), TransportError> {
        send_datagram(&self.socket, self.peer, &self.closed, &encode(t)?)
    }
}

impl UdpSender {
    pub fn send_raw(&self, bytes: &[u8]) -> Result<(), TransportError> {
        send_datagram(&self.socket, self.peer, &self.closed, bytes)
    }
}

impl TelegramSource for UdpPort {
    fn receive(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<Result<Telegram, DecodeError>>, TransportError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(TransportError::Closed);
        }
        // A zero timeout polls without blocking. Kernel read timeouts round
        // up to a scheduler tick, which would throttle lockstep runs.
        let nonblocking = timeout.is_zero();
        if nonblocking != self.nonblocking {
            self.socket.set_nonblocking(nonblocking)?;
            self.nonblocking = nonblocking;
        }
        if !nonblocking && self.timeout != Some(timeout) {
            self.socket.set_read_timeout(Some(timeout))?;
            self.timeout = Some(timeout);
        }
        match self.socket.recv_from(&mut self.buf) {
            Ok((n, _)) => Ok(Some(decode(&self.buf[..n]))),
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                Ok(None)
            }
            // Windows reports ICMP port-unreachable from an earlier send here.
            Err(e) if e.kind() == std::io::ErrorKind::ConnectionReset => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

/// Sending half of an in-process port.
#[derive(Debug, Clone)]
pub struct LoopbackSender {
    tx: mpsc::Sender<Vec<u8>>,
}

/// Receiving half of an in-process port; preserves send order.
#[derive(Debug)]
pub struct LoopbackReceiver {
    rx: mpsc::Receiver<Vec<u8>>,
}

pub fn loopback_channel() -> (LoopbackSender, LoopbackReceiver) {
    let (tx, rx) = mpsc::channel();
    (LoopbackSender { tx }, LoopbackReceiver { rx })
}

impl LoopbackSender {
    pub fn send_raw(&self, bytes: Vec<u8>) -> Result<(), TransportError> {
        if bytes.len() > MAX_DATAGRAM {
            return Err(TransportError::Oversized(bytes.len()));
        }
        self.tx.send(bytes).map_err(|_| TransportError::Closed)
    }
}

impl TelegramSink for LoopbackSender {
    fn send(&self, t: &Telegram) -> Result<(), TransportError> {
        self.send_raw(encode(t)?)
    }
}

impl TelegramSource for LoopbackReceiver {
    fn receive(
        &mut self,
        timeout: Duration,
    ) -> Result<Option<Result<Telegram, DecodeError>>, TransportError> {
        let got = if timeout.is_zero() {
            match self.rx.try_recv() {
                Ok(b) => Some(b),
                Err(mpsc::TryRecvError::Empty) => None,
                Err(mpsc::TryRecvError::Disconnected) => return Err(TransportError::Closed),
            }
        } else {
            match self.rx.recv_timeout(timeout) {
                Ok(b) => Some(b),
                Err(mpsc::RecvTimeoutError::Timeout) => None,
                Err(mpsc::RecvTimeoutError::Disconnected) => return Err(TransportError::Closed),
            }
        };
        Ok(got.map(|b| decode(&b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{LlcMode, LlcStatus, MotorStatus};

    fn status() -> Telegram {
        let mut motors = [MotorStatus::default(); 6];
        motors[0] = MotorStatus {
            rpm: 1200.5,
            enabled: true,
        };
        Telegram::LlcStatus(LlcStatus {
            motors,
            mode_echo: LlcMode::Direct,
        })
    }

    #[test]
    fn udp_pair_transfers_telegram() {
        let mut a = open_udp_port("127.0.0.1:0", "127.0.0.1:9").unwrap();
        let mut b = open_udp_port("127.0.0.1:0", &a.local_addr().unwrap().to_string()).unwrap();
        let to_b = a.sender_to(&b.local_addr().unwrap().to_string()).unwrap();
        to_b.send(&status()).unwrap();
        let got = b.receive(Duration::from_secs(2)).unwrap().unwrap().unwrap();
        assert_eq!(got, status());
        b.send(&status()).unwrap();
        assert_eq!(
            a.receive(Duration::from_secs(2)).unwrap().unwrap().unwrap(),
            status()
        );
    }

    #[test]
    fn udp_timeout_returns_none() {
        let mut a = open_udp_port("127.0.0.1:0", "127.0.0.1:9").unwrap();
        assert!(a.receive(Duration::from_millis(10)).unwrap().is_none());
    }

    #[test]
    fn oversized_datagram_refused() {
        let a = open_udp_port("127.0.0.1:0", "127.0.0.1:9").unwrap();
        assert!(matches!(
            a.send_raw(&vec![0; MAX_DATAGRAM + 1]),
            Err(TransportError::Oversized(_))
        ));
        let (tx, _rx) = loopback_channel();
        assert!(matches!(
            tx.send_raw(vec![0; MAX_DATAGRAM + 1]),
            Err(TransportError::Oversized(_))
        ));
    }

    #[test]
    fn send_after_close_fails() {
        let a = open_udp_port("127.0.0.1:0", "127.0.0.1:9").unwrap();
        let s = a.sender();
        a.close();
        assert!(matches!(a.send(&status()), Err(TransportError::Closed)));
        assert!(matches!(s.send(&status()), Err(TransportError::Closed)));
    }

    #[test]
    fn bind_conflict_is_reported() {
        let a = open_udp_port("127.0.0.1:0", "127.0.0.1:9").unwrap();
        let taken = a.local_addr().unwrap().to_string();
        assert!(matches!(
            open_udp_port(&taken, "127.0.0.1:9"),
            Err(TransportError::Bind { .. })
        ));
    }

    #[test]
    fn loopback_preserves_order_and_reports_malformed() {
        let (tx, mut rx) = loopback_channel();
        tx.send(&status()).unwrap();
        tx.send_raw(vec![0xFF, 0x00, 0x00, 0x00]).unwrap();
        tx.send(&Telegram::LlcCommand(crate::protocol::LlcCommand {
            mode: LlcMode::Direct,
        }))
        .unwrap();
        assert_eq!(
            rx.receive(Duration::ZERO).unwrap().unwrap().unwrap(),
            status()
        );
        assert!(rx.receive(Duration::ZERO).unwrap().unwrap().is_err());
        assert!(matches!(
            rx.receive(Duration::ZERO).unwrap().unwrap().unwrap(),
            Telegram::LlcCommand(_)
        ));
        assert!(rx.receive(Duration::ZERO).unwrap().is_none());
        drop(tx);
        assert!(matches!(
            rx.receive(Duration::ZERO),
            Err(TransportError::Closed)
        ));
    }
}
