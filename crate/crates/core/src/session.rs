//! Flat, process-wide session surface for foreign-language bindings.
//!
//! A session owns one registry, the checkpoint directory named by the config
//! file and a termination watcher. Only one session may be open per process.
//! Calls never block on each other: a call that arrives while another is in
//! progress fails with [`SessionError::Busy`].

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, TryLockError};
use std::time::Duration;

use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::detector::{HeartbeatSender, TerminationNotice, TerminationWatcher, WatchError};
use crate::registry::{
    ProtectedSectionToken, ProtectionMode, Registry, RegistryError, SegmentHandle, SegmentScope,
    SnapshotFilter,
};
use crate::store::{self, Checkpoint, StoreError};

static OPEN: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("a session is already open in this process")]
    AlreadyOpen,
    #[error("another session call is in progress")]
    Busy,
    #[error("unknown segment {0:?}")]
    UnknownSegment(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Watch(#[from] WatchError),
    #[error("heartbeat error: {0}")]
    Heartbeat(std::io::Error),
}

impl SessionError {
    pub fn name(&self) -> &'static str {
        match self {
            SessionError::AlreadyOpen => "AlreadyOpen",
            SessionError::Busy => "Busy",
            SessionError::UnknownSegment(_) => "UnknownSegment",
            SessionError::Config(e) => e.name(),
            SessionError::Registry(e) => e.name(),
            SessionError::Store(e) => e.name(),
            SessionError::Watch(_) => "WatchError",
            SessionError::Heartbeat(_) => "IoFailure",
        }
    }
}

struct State {
    handles: HashMap<String, SegmentHandle>,
    heartbeat: Option<HeartbeatSender>,
}

pub struct Session {
    registry: Arc<Registry>,
    watcher: TerminationWatcher,
    checkpoint_dir: PathBuf,
    period: Duration,
    state: Mutex<State>,
}

impl Session {
    /// Opens a session from a configuration file and binds the configured
    /// termination signal.
    pub fn open(config_path: &Path) -> Result<Self, SessionError> {
        let cfg = Config::load(config_path, &[])?;
        let signal = cfg.detector.signal()?;
        Self::open_with(&cfg, Some(TerminationWatcher::bind_os_signal(signal)?))
    }

    /// Opens a session from an already parsed configuration. Without a
    /// watcher only injected notices are observed.
    pub fn open_with(cfg: &Config, watcher: Option<TerminationWatcher>) -> Result<Self, SessionError> {
        if OPEN.swap(true, Ordering::SeqCst) {
            return Err(SessionError::AlreadyOpen);
        }
        let registry = Arc::new(Registry::new(ProtectionMode::Reject));
        let watcher = watcher.unwrap_or_else(TerminationWatcher::injected_only);
        watcher.attach_registry(Arc::clone(&registry));
        Ok(Session {
            registry,
            watcher,
            checkpoint_dir: cfg.run.checkpoint_dir.clone(),
            period: Duration::from_millis(cfg.detector.period_ms),
            state: Mutex::new(State {
                handles: HashMap::new(),
                heartbeat: None,
            }),
        })
    }

    /// Releases the session; a new one may be opened afterwards.
    pub fn close(self) {}

    pub fn checkpoint_dir(&self) -> &Path {
        &self.checkpoint_dir
    }

    fn enter(&self) -> Result<std::sync::MutexGuard<'_, State>, SessionError> {
        match self.state.try_lock() {
            Ok(g) => Ok(g),
            Err(TryLockError::WouldBlock) => Err(SessionError::Busy),
            Err(TryLockError::Poisoned(p)) => Ok(p.into_inner()),
        }
    }

    pub fn register(&self, id: &str, scope: SegmentScope, payload: &[u8]) -> Result<(), SessionError> {
        let mut st = self.enter()?;
        let handle = self.registry.register_segment(id, scope, payload)?;
        st.handles.insert(id.to_owned(), handle);
        Ok(())
    }

    /// Replaces a segment's payload and returns its new version.
    pub fn update(&self, id: &str, payload: &[u8]) -> Result<u64, SessionError> {
        let st = self.enter()?;
        let handle = st
            .handles
            .get(id)
            .ok_or_else(|| SessionError::UnknownSegment(id.to_owned()))?;
        Ok(self.registry.update_segment(handle, payload)?)
    }

    pub fn version(&self, id: &str) -> Result<u64, SessionError> {
        let st = self.enter()?;
        let handle = st
            .handles
            .get(id)
            .ok_or_else(|| SessionError::UnknownSegment(id.to_owned()))?;
        Ok(self.registry.version(handle)?)
    }

    /// Commits every registered segment as the next epoch and returns it.
    /// `created_at_us` pins the header timestamp; `None` uses the clock.
    pub fn checkpoint_now(&self, created_at_us: Option<u64>) -> Result<u64, SessionError> {
        let _st = self.enter()?;
        let snapshot = self.registry.snapshot(SnapshotFilter::All)?;
        let epoch = store::latest_epoch(&self.checkpoint_dir)?.map_or(0, |e| e + 1);
        let created = created_at_us.unwrap_or_else(store::now_us);
        store::commit_at(&self.checkpoint_dir, epoch, created, &snapshot)?;
        Ok(epoch)
    }

    pub fn restore_latest(&self) -> Result<Option<Checkpoint>, SessionError> {
        let _st = self.enter()?;
        Ok(store::restore_latest(&self.checkpoint_dir)?)
    }

    pub fn enter_protected(&self, scope: SegmentScope) -> Result<ProtectedSectionToken, SessionError> {
        let _st = self.enter()?;
        Ok(self.registry.enter_protected(scope))
    }

    pub fn exit_protected(&self, scope: SegmentScope) -> Result<ProtectedSectionToken, SessionError> {
        let _st = self.enter()?;
        Ok(self.registry.exit_protected(scope)?)
    }

    pub fn poll_termination(&self) -> Option<TerminationNotice> {
        self.watcher.poll()
    }

    pub fn inject_termination(&self, deadline_hint_ms: Option<u64>) {
        self.watcher.inject(deadline_hint_ms);
    }

    /// Starts sending heartbeats to `target` at the configured period.
    pub fn start_heartbeat(&self, target: SocketAddr, node_id: u16, incarnation: u32) -> Result<(), SessionError> {
        let mut st = self.enter()?;
        let sender = HeartbeatSender::spawn(target, node_id, incarnation, self.period)
            .map_err(SessionError::Heartbeat)?;
        if let Some(old) = st.heartbeat.replace(sender) {
            old.stop();
        }
        Ok(())
    }

    pub fn stop_heartbeat(&self) -> Result<(), SessionError> {
        let mut st = self.enter()?;
        if let Some(hb) = st.heartbeat.take() {
            hb.stop();
        }
        Ok(())
    }
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("checkpoint_dir", &self.checkpoint_dir)
            .field("segments", &self.registry.len())
            .finish_non_exhaustive()
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Ok(st) = self.state.get_mut() {
            if let Some(hb) = st.heartbeat.take() {
                hb.stop();
            }
        }
        OPEN.store(false, Ordering::SeqCst);
    }
}
