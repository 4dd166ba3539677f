//! Fan-out of received telegrams to per-message handlers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::{DecodeError, Telegram, TelegramSource, TransportError};

type Handler = Box<dyn FnMut(Telegram) + Send>;

#[derive(Debug, Default)]
pub struct DispatchStats {
    pub delivered: AtomicU64,
    /// Datagrams that failed to decode.
    pub malformed: AtomicU64,
    /// Valid telegrams without a registered handler.
    pub unhandled: AtomicU64,
}

impl DispatchStats {
    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Relaxed)
    }
    pub fn malformed(&self) -> u64 {
        self.malformed.load(Ordering::Relaxed)
    }
    pub fn unhandled(&self) -> u64 {
        self.unhandled.load(Ordering::Relaxed)
    }
}

#[derive(Default)]
pub struct Dispatcher {
    handlers: HashMap<u16, Handler>,
    stats: Arc<DispatchStats>,
}

impl Dispatcher {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the handler for `message_id`, replacing any previous one.
    pub fn on(mut self, message_id: u16, handler: impl FnMut(Telegram) + Send + 'static) -> Self {
        self.handlers.insert(message_id, Box::new(handler));
        self
    }

    pub fn stats(&self) -> Arc<DispatchStats> {
        Arc::clone(&self.stats)
    }

    pub fn deliver(&mut self, received: Result<Telegram, DecodeError>) {
        match received {
            Ok(t) => match self.handlers.get_mut(&t.message_id()) {
                Some(h) => {
                    h(t);
                    self.stats.delivered.fetch_add(1, Ordering::Relaxed);
                }
                None => {
                    log::debug!("no handler for {}", t.name());
                    self.stats.unhandled.fetch_add(1, Ordering::Relaxed);
                }
            },
            Err(e) => {
                log::warn!("dropping malformed datagram: {e}");
                self.stats.malformed.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Receives and delivers at most one datagram. Returns whether one arrived.
    pub fn poll<S: TelegramSource + ?Sized>(
        &mut self,
        source: &mut S,
        timeout: Duration,
    ) -> Result<bool, TransportError> {
        match source.receive(timeout)? {
            Some(r) => {
                self.deliver(r);
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Runs the receive loop on its own thread until stopped or the source
    /// closes.
    pub fn spawn<S: TelegramSource + 'static>(mut self, mut source: S) -> DispatchHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let stats = self.stats();
        let flag = Arc::clone(&stop);
        let join = std::thread::spawn(move || {
            while !flag.load(Ordering::Acquire) {
                if let Err(e) = self.poll(&mut source, Duration::from_millis(20)) {
                    log::debug!("dispatch loop ends: {e}");
                    break;
                }
            }
        });
        DispatchHandle {
            stop,
            stats,
            join: Some(join),
        }
    }
}

pub struct DispatchHandle {
    stop: Arc<AtomicBool>,
    stats: Arc<DispatchStats>,
    join: Option<JoinHandle<()>>,
}

impl DispatchHandle {
    pub fn stats(&self) -> &DispatchStats {
        &self.stats
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for DispatchHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
