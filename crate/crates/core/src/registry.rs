//! In-process registry of checkpointable application state.
//!
//! The application declares named byte segments, scoped either to the whole
//! program ([`SegmentScope::Global`]) or to a single worker
//! ([`SegmentScope::Local`]), and pushes new payloads with
//! [`Registry::update_segment`]. A snapshot copies every matching segment at a
//! single serialization point, ordered by id bytes.
//!
//! Protected sections mark regions during which a snapshot of the affected
//! scope must not be taken and a termination-triggered shutdown must not begin.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use thiserror::Error;

/// Longest accepted segment id, in bytes.
pub const MAX_ID_LEN: usize = 255;

/// Largest accepted single-segment payload, in bytes.
pub const MAX_PAYLOAD_LEN: usize = (1 << 31) - 1;

/// Ids starting with this prefix are reserved for the harness.
pub const RESERVED_PREFIX: &str = "__";

/// Which part of the program a segment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentScope {
    Global,
    Local(u32),
}

impl SegmentScope {
    pub fn worker(self) -> Option<u32> {
        match self {
            SegmentScope::Global => None,
            SegmentScope::Local(w) => Some(w),
        }
    }
}

impl fmt::Display for SegmentScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentScope::Global => f.write_str("global"),
            SegmentScope::Local(w) => write!(f, "local({w})"),
        }
    }
}

/// Selects the segments returned by [`Registry::snapshot`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotFilter {
    All,
    GlobalOnly,
    Local(u32),
}

impl SnapshotFilter {
    fn admits(self, scope: SegmentScope) -> bool {
        match (self, scope) {
            (SnapshotFilter::All, _) => true,
            (SnapshotFilter::GlobalOnly, SegmentScope::Global) => true,
            (SnapshotFilter::Local(w), SegmentScope::Local(s)) => w == s,
            _ => false,
        }
    }
}

/// Behaviour of [`Registry::snapshot`] while a protected section is open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProtectionMode {
    /// Fail with [`RegistryError::ProtectedSectionOpen`].
    #[default]
    Reject,
    /// Block until every covering section has closed.
    Defer,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("segment id {0:?} is already registered")]
    DuplicateId(String),
    #[error("segment id is {0} bytes long, the limit is 255")]
    IdTooLong(usize),
    #[error("segment id must not be empty")]
    EmptyId,
    #[error("segment id must not contain NUL bytes")]
    InvalidId,
    #[error("segment id {0:?} uses the reserved `__` prefix")]
    ReservedId(String),
    #[error("payload of {0} bytes exceeds the 2^31-1 byte segment limit")]
    PayloadTooLarge(usize),
    #[error("segment handle refers to a registry generation that was reset")]
    StaleHandle,
    #[error("a protected section is open for a covered scope")]
    ProtectedSectionOpen,
    #[error("exit_protected called without a matching enter_protected")]
    UnbalancedExit,
}

impl RegistryError {
    /// Stable variant name, used where errors cross a language boundary.
    pub fn name(&self) -> &'static str {
        match self {
            RegistryError::DuplicateId(_) => "DuplicateId",
            RegistryError::IdTooLong(_) => "IdTooLong",
            RegistryError::EmptyId => "EmptyId",
            RegistryError::InvalidId => "InvalidId",
            RegistryError::ReservedId(_) => "ReservedId",
            RegistryError::PayloadTooLarge(_) => "PayloadTooLarge",
            RegistryError::StaleHandle => "StaleHandle",
            RegistryError::ProtectedSectionOpen => "ProtectedSectionOpen",
            RegistryError::UnbalancedExit => "UnbalancedExit",
        }
    }
}

/// Opaque reference to a registered segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentHandle {
    generation: u64,
    id: Arc<str>,
}

impl SegmentHandle {
    pub fn id(&self) -> &str {
        &self.id
    }
}

/// Nesting depth of a protected section after an enter or exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtectedSectionToken {
    pub scope: SegmentScope,
    pub depth: u32,
}

/// One segment as captured by a snapshot. Payloads are owned copies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotEntry {
    pub id: String,
    pub scope: SegmentScope,
    pub version: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug)]
struct Segment {
    scope: SegmentScope,
    payload: Vec<u8>,
    version: u64,
}

#[derive(Debug, Default)]
struct Inner {
    generation: u64,
    // BTreeMap<String, _> iterates in byte order of the ids.
    segments: BTreeMap<String, Segment>,
    protected: HashMap<SegmentScope, u32>,
}

impl Inner {
    fn covered_open(&self, filter: SnapshotFilter) -> bool {
        self.protected
            .iter()
            .any(|(scope, depth)| *depth > 0 && filter.admits(*scope))
    }
}

/// Thread-safe segment registry. All operations serialize on one lock.
#[derive(Debug, Default)]
pub struct Registry {
    mode: ProtectionMode,
    inner: Mutex<Inner>,
    released: Condvar,
}

fn validate_id(id: &str) -> Result<(), RegistryError> {
    if id.is_empty() {
        return Err(RegistryError::EmptyId);
    }
    if id.len() > MAX_ID_LEN {
        return Err(RegistryError::IdTooLong(id.len()));
    }
    if id.as_bytes().contains(&0) {
        return Err(RegistryError::InvalidId);
    }
    Ok(())
}

fn validate_payload(payload: &[u8]) -> Result<(), RegistryError> {
    if payload.len() > MAX_PAYLOAD_LEN {
        return Err(RegistryError::PayloadTooLarge(payload.len()));
    }
    Ok(())
}

impl Registry {
    pub fn new(mode: ProtectionMode) -> Self {
        Registry {
            mode,
            inner: Mutex::new(Inner::default()),
            released: Condvar::new(),
        }
    }

    pub fn mode(&self) -> ProtectionMode {
        self.mode
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // A panic while holding the lock cannot leave Inner half-updated:
        // every mutation is a single map insert or field store.
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers an application segment. Ids starting with `__` are refused.
    pub fn register_segment(
        &self,
        id: &str,
        scope: SegmentScope,
        initial_payload: &[u8],
    ) -> Result<SegmentHandle, RegistryError> {
        if id.starts_with(RESERVED_PREFIX) {
            validate_id(id)?;
            return Err(RegistryError::ReservedId(id.to_owned()));
        }
        self.insert(id, scope, initial_payload)
    }

    /// Registers a segment in the reserved `__` namespace (harness metadata).
    pub fn register_reserved(
        &self,
        id: &str,
        initial_payload: &[u8],
    ) -> Result<SegmentHandle, RegistryError> {
        if !id.starts_with(RESERVED_PREFIX) {
            return Err(RegistryError::InvalidId);
        }
        self.insert(id, SegmentScope::Global, initial_payload)
    }

    fn insert(
        &self,
        id: &str,
        scope: SegmentScope,
        payload: &[u8],
    ) -> Result<SegmentHandle, RegistryError> {
        validate_id(id)?;
        validate_payload(payload)?;
        let mut inner = self.lock();
        if inner.segments.contains_key(id) {
            return Err(RegistryError::DuplicateId(id.to_owned()));
        }
        inner.segments.insert(
            id.to_owned(),
            Segment {
                scope,
                payload: payload.to_vec(),
                version: 0,
            },
        );
        Ok(SegmentHandle {
            generation: inner.generation,
            id: Arc::from(id),
        })
    }

    /// Replaces a segment's payload and returns its new version.
    pub fn update_segment(
        &self,
        handle: &SegmentHandle,
        payload: &[u8],
    ) -> Result<u64, RegistryError> {
        validate_payload(payload)?;
        let mut inner = self.lock();
        if inner.generation != handle.generation {
            return Err(RegistryError::StaleHandle);
        }
        let segment = inner
            .segments
            .get_mut(&*handle.id)
            .ok_or(RegistryError::StaleHandle)?;
        segment.payload.clear();
        segment.payload.extend_from_slice(payload);
        segment.version += 1;
        Ok(segment.version)
    }

    /// Current version of a segment.
    pub fn version(&self, handle: &SegmentHandle) -> Result<u64, RegistryError> {
        let inner = self.lock();
        if inner.generation != handle.generation {
            return Err(RegistryError::StaleHandle);
        }
        inner
            .segments
            .get(&*handle.id)
            .map(|s| s.version)
            .ok_or(RegistryError::StaleHandle)
    }

    /// Copies every segment admitted by `filter`, ascending by id bytes.
    ///
    /// In [`ProtectionMode::Reject`] an open covering section is an error; in
    /// [`ProtectionMode::Defer`] the call waits for it to close.
    pub fn snapshot(&self, filter: SnapshotFilter) -> Result<Vec<SnapshotEntry>, RegistryError> {
        let mut inner = self.lock();
        while inner.covered_open(filter) {
            match self.mode {
                ProtectionMode::Reject => return Err(RegistryError::ProtectedSectionOpen),
                ProtectionMode::Defer => {
                    inner = self
                        .released
                        .wait(inner)
                        .unwrap_or_else(|e| e.into_inner());
                }
            }
        }
        Ok(inner
            .segments
            .iter()
            .filter(|(_, s)| filter.admits(s.scope))
            .map(|(id, s)| SnapshotEntry {
                id: id.clone(),
                scope: s.scope,
                version: s.version,
                payload: s.payload.clone(),
            })
            .collect())
    }

    pub fn enter_protected(&self, scope: SegmentScope) -> ProtectedSectionToken {
        let mut inner = self.lock();
        let depth = inner.protected.entry(scope).or_insert(0);
        *depth += 1;
        ProtectedSectionToken {
            scope,
            depth: *depth,
        }
    }

    pub fn exit_protected(
        &self,
        scope: SegmentScope,
    ) -> Result<ProtectedSectionToken, RegistryError> {
        let mut inner = self.lock();
        let depth = match inner.protected.get_mut(&scope) {
            Some(d) if *d > 0 => {
                *d -= 1;
                *d
            }
            _ => return Err(RegistryError::UnbalancedExit),
        };
        if depth == 0 {
            inner.protected.remove(&scope);
            self.released.notify_all();
        }
        Ok(ProtectedSectionToken { scope, depth })
    }

    /// Enters a protected section that is exited when the guard drops.
    pub fn protect(&self, scope: SegmentScope) -> ProtectedGuard<'_> {
        self.enter_protected(scope);
        ProtectedGuard {
            registry: self,
            scope,
        }
    }

    pub fn protected_depth(&self, scope: SegmentScope) -> u32 {
        self.lock().protected.get(&scope).copied().unwrap_or(0)
    }

    /// True while any protected section, of any scope, is open.
    pub fn any_protected(&self) -> bool {
        self.lock().protected.values().any(|d| *d > 0)
    }

    pub fn len(&self) -> usize {
        self.lock().segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every segment and invalidates all outstanding handles.
    pub fn reset(&self) {
        let mut inner = self.lock();
        inner.generation += 1;
        inner.segments.clear();
    }
}

/// RAII protected section returned by [`Registry::protect`].
#[derive(Debug)]
pub struct ProtectedGuard<'a> {
    registry: &'a Registry,
    scope: SegmentScope,
}

impl Drop for ProtectedGuard<'_> {
    fn drop(&mut self) {
        let _ = self.registry.exit_protected(self.scope);
    }
}
