//! UDP transport for heartbeats.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::codec::{decode_heartbeat, encode_heartbeat, HeartbeatMessage};
use super::monitor::{Arrival, DetectorConfig, FailureEvent, Monitor};
use crate::clock::monotonic_ns;
use crate::store::now_us;

const RECV_POLL: Duration = Duration::from_millis(10);

/// Background thread that timestamps and queues incoming heartbeats.
#[derive(Debug)]
pub struct HeartbeatReceiver {
    local_addr: SocketAddr,
    queue: Arc<Mutex<Vec<Arrival>>>,
    decode_errors: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl HeartbeatReceiver {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(RECV_POLL))?;
        let local_addr = socket.local_addr()?;
        let queue = Arc::new(Mutex::new(Vec::new()));
        let decode_errors = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let queue = Arc::clone(&queue);
            let decode_errors = Arc::clone(&decode_errors);
            let stop = Arc::clone(&stop);
            thread::Builder::new()
                .name("heartbeat-rx".into())
                .spawn(move || {
                    let mut buf = [0u8; 64];
                    while !stop.load(Ordering::Relaxed) {
                        match socket.recv_from(&mut buf) {
                            Ok((n, _)) => {
                                let received_at_ns = monotonic_ns();
                                match decode_heartbeat(&buf[..n]) {
                                    Ok(msg) => queue
                                        .lock()
                                        .unwrap_or_else(|e| e.into_inner())
                                        .push(Arrival { msg, received_at_ns }),
                                    Err(_) => {
                                        decode_errors.fetch_add(1, Ordering::Relaxed);
                                    }
                                }
                            }
                            Err(e)
                                if matches!(
                                    e.kind(),
                                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                                ) => {}
                            Err(e) => {
                                log::warn!("heartbeat receiver: {e}");
                                thread::sleep(RECV_POLL);
                            }
                        }
                    }
                })?
        };
        Ok(HeartbeatReceiver {
            local_addr,
            queue,
            decode_errors,
            stop,
            handle: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Takes every arrival queued since the last call.
    pub fn drain(&self) -> Vec<Arrival> {
        std::mem::take(&mut *self.queue.lock().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn decode_errors(&self) -> u64 {
        self.decode_errors.load(Ordering::Relaxed)
    }
}

impl Drop for HeartbeatReceiver {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Periodic heartbeat sender for one node incarnation.
#[derive(Debug)]
pub struct HeartbeatSender {
    stop: Option<mpsc::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl HeartbeatSender {
    /// Sends the first heartbeat immediately, then one every `period`.
    pub fn spawn(
        target: SocketAddr,
        node_id: u16,
        incarnation: u32,
        period: Duration,
    ) -> io::Result<Self> {
        let bind: SocketAddr = if target.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        let socket = UdpSocket::bind(bind)?;
        let (tx, rx) = mpsc::channel::<()>();
        let handle = thread::Builder::new()
            .name(format!("heartbeat-tx-{node_id}"))
            .spawn(move || {
                let mut sequence = 0u64;
                let mut next = Instant::now();
                loop {
                    sequence += 1;
                    let msg = HeartbeatMessage {
                        node_id,
                        incarnation,
                        sequence,
                        timestamp_us: now_us(),
                    };
                    if let Err(e) = socket.send_to(&encode_heartbeat(&msg), target) {
                        log::debug!("heartbeat send from node {node_id}: {e}");
                    }
                    next += period;
                    let wait = next.saturating_duration_since(Instant::now());
                    match rx.recv_timeout(wait) {
                        Err(RecvTimeoutError::Timeout) => {}
                        _ => return,
                    }
                }
            })?;
        Ok(HeartbeatSender {
            stop: Some(tx),
            handle: Some(handle),
        })
    }

    /// Stops sending; no datagram leaves after this returns.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for HeartbeatSender {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Receiver plus monitor: the coordinator-side failure detector.
#[derive(Debug)]
pub struct LiveDetector {
    receiver: HeartbeatReceiver,
    monitor: Monitor,
}

impl LiveDetector {
    pub fn start(config: &DetectorConfig, nodes: impl IntoIterator<Item = u16>) -> io::Result<Self> {
        let receiver = HeartbeatReceiver::bind(config.listen.as_str())?;
        let monitor = Monitor::new(config, nodes, monotonic_ns());
        Ok(LiveDetector { receiver, monitor })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.receiver.local_addr()
    }

    /// Feeds queued arrivals to the monitor at the current time.
    pub fn poll(&mut self) -> Vec<FailureEvent> {
        let arrivals = self.receiver.drain();
        self.monitor.observe(monotonic_ns(), &arrivals)
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn monitor_mut(&mut self) -> &mut Monitor {
        &mut self.monitor
    }

    pub fn decode_errors(&self) -> u64 {
        self.receiver.decode_errors()
    }
}
