//! Termination-notice watcher: OS signals or injected notices.

use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use signal_hook::SigId;
use thiserror::Error;

use crate::registry::Registry;

static OS_BINDING: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoticeSource {
    OsSignal,
    Injected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TerminationNotice {
    pub source: NoticeSource,
    pub deadline_hint_ms: Option<u64>,
}

#[derive(Debug, Error)]
pub enum WatchError {
    #[error("an OS signal is already bound to a termination watcher in this process")]
    AlreadyBound,
    #[error("unknown termination signal {0:?}")]
    UnknownSignal(String),
    #[error("failed to install signal handler: {0}")]
    Install(#[from] std::io::Error),
}

/// Signals a watcher can bind to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminationSignal {
    #[default]
    Term,
    Int,
    Hup,
    Usr1,
    Usr2,
}

impl TerminationSignal {
    pub fn raw(self) -> i32 {
        use signal_hook::consts::*;
        match self {
            TerminationSignal::Term => SIGTERM,
            TerminationSignal::Int => SIGINT,
            TerminationSignal::Hup => SIGHUP,
            TerminationSignal::Usr1 => SIGUSR1,
            TerminationSignal::Usr2 => SIGUSR2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TerminationSignal::Term => "TERM",
            TerminationSignal::Int => "INT",
            TerminationSignal::Hup => "HUP",
            TerminationSignal::Usr1 => "USR1",
            TerminationSignal::Usr2 => "USR2",
        }
    }
}

impl FromStr for TerminationSignal {
    type Err = WatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        let bare = upper.strip_prefix("SIG").unwrap_or(&upper);
        Ok(match bare {
            "TERM" => TerminationSignal::Term,
            "INT" => TerminationSignal::Int,
            "HUP" => TerminationSignal::Hup,
            "USR1" => TerminationSignal::Usr1,
            "USR2" => TerminationSignal::Usr2,
            _ => return Err(WatchError::UnknownSignal(s.to_owned())),
        })
    }
}

#[derive(Debug)]
struct OsBinding {
    flag: Arc<AtomicBool>,
    id: SigId,
}

/// Pollable termination watcher.
///
/// Once a notice is observed, [`poll`](Self::poll) keeps returning it until
/// [`acknowledge`](Self::acknowledge). While the attached registry has any
/// protected section open, the notice is held back.
#[derive(Debug, Default)]
pub struct TerminationWatcher {
    pending: Mutex<Option<TerminationNotice>>,
    os: Option<OsBinding>,
    registry: Mutex<Option<Arc<Registry>>>,
}

impl TerminationWatcher {
    /// A watcher that only sees injected notices.
    pub fn injected_only() -> Self {
        Self::default()
    }

    /// Binds `signal` for this process. Only one binding may exist at a time.
    pub fn bind_os_signal(signal: TerminationSignal) -> Result<Self, WatchError> {
        if OS_BINDING.swap(true, Ordering::SeqCst) {
            return Err(WatchError::AlreadyBound);
        }
        let flag = Arc::new(AtomicBool::new(false));
        match signal_hook::flag::register(signal.raw(), Arc::clone(&flag)) {
            Ok(id) => Ok(TerminationWatcher {
                pending: Mutex::new(None),
                os: Some(OsBinding { flag, id }),
                registry: Mutex::new(None),
            }),
            Err(e) => {
                OS_BINDING.store(false, Ordering::SeqCst);
                Err(e.into())
            }
        }
    }

    /// Holds notices while `registry` has an open protected section.
    pub fn with_registry(self, registry: Arc<Registry>) -> Self {
        self.attach_registry(registry);
        self
    }

    /// Replaces the registry whose protected sections hold notices back.
    pub fn attach_registry(&self, registry: Arc<Registry>) {
        *self.registry.lock().unwrap_or_else(|e| e.into_inner()) = Some(registry);
    }

    pub fn is_os_bound(&self) -> bool {
        self.os.is_some()
    }

    pub fn inject(&self, deadline_hint_ms: Option<u64>) {
        let mut pending = self.pending.lock().unwrap_or_else(|e| e.into_inner());
        if pending.is_none() {
            *pending = Some(TerminationNotice {
                source: NoticeSource::Injected,
                deadline_hint_ms,
            });
        }
    }

    pub fn poll(&self) -> Option<TerminationNotice> {
        let mut pending = self.pending.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(os) = &self.os {
            if os.flag.swap(false, Ordering::SeqCst) && pending.is_none() {
                *pending = Some(TerminationNotice {
                    source: NoticeSource::OsSignal,
                    deadline_hint_ms: None,
                });
            }
        }
        let held = self
            .registry
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .as_ref()
            .is_some_and(|r| r.any_protected());
        if held {
            return None;
        }
        *pending
    }

    /// Clears the current notice; later signals or injections raise a new one.
    pub fn acknowledge(&self) {
        *self.pending.lock().unwrap_or_else(|e| e.into_inner()) = None;
    }
}

impl Drop for TerminationWatcher {
    fn drop(&mut self) {
        if let Some(os) = self.os.take() {
            signal_hook::low_level::unregister(os.id);
            OS_BINDING.store(false, Ordering::SeqCst);
        }
    }
}
