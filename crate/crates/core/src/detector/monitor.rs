//! Pure heartbeat bookkeeping.
//!
//! [`Monitor::observe`] is a deterministic state transition: given the same
//! state, clock reading and arrivals it always yields the same events. The
//! network side only timestamps datagrams and hands them over.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::codec::HeartbeatMessage;
use crate::clock::NANOS_PER_MS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Heartbeat send interval.
    pub period_ms: u64,
    /// Consecutive missed periods before a node is declared failed.
    pub misses_k: u32,
    /// `host:port` the coordinator listens on; port 0 picks a free one.
    pub listen: String,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            period_ms: 500,
            misses_k: 3,
            listen: "127.0.0.1:0".to_owned(),
        }
    }
}

impl DetectorConfig {
    /// Desk-scale settings used by the test suites: 50 ms period, k = 3.
    pub fn fast() -> Self {
        DetectorConfig {
            period_ms: 50,
            ..Self::default()
        }
    }

    /// Silence longer than this declares a node failed.
    pub fn timeout_ns(&self) -> u64 {
        u64::from(self.misses_k) * self.period_ms * NANOS_PER_MS
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.period_ms == 0 {
            return Err("detector.period_ms must be positive".into());
        }
        if self.misses_k == 0 {
            return Err("detector.misses_k must be positive".into());
        }
        Ok(())
    }
}

/// A decoded datagram stamped with the monotonic time it was received.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub msg: HeartbeatMessage,
    pub received_at_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailureKind {
    HeartbeatTimeout,
    TerminationNotice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FailureEvent {
    pub node_id: u16,
    pub incarnation: u32,
    pub kind: FailureKind,
    pub detected_at_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct NodeState {
    incarnation: u32,
    last_sequence: Option<u64>,
    last_heard_ns: u64,
    failed: bool,
}

/// Per-node liveness state for a fixed set of expected nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monitor {
    timeout_ns: u64,
    nodes: BTreeMap<u16, NodeState>,
    unknown_senders: u64,
    stale_messages: u64,
}

impl Monitor {
    /// Starts monitoring `nodes` (incarnation 0) as if each was heard at `start_ns`.
    pub fn new(config: &DetectorConfig, nodes: impl IntoIterator<Item = u16>, start_ns: u64) -> Self {
        Self::with_timeout(config.timeout_ns(), nodes, start_ns)
    }

    pub fn with_timeout(timeout_ns: u64, nodes: impl IntoIterator<Item = u16>, start_ns: u64) -> Self {
        let nodes = nodes
            .into_iter()
            .map(|id| {
                (
                    id,
                    NodeState {
                        incarnation: 0,
                        last_sequence: None,
                        last_heard_ns: start_ns,
                        failed: false,
                    },
                )
            })
            .collect();
        Monitor {
            timeout_ns,
            nodes,
            unknown_senders: 0,
            stale_messages: 0,
        }
    }

    /// Applies `arrivals` in order, then reports nodes silent for longer than
    /// the timeout at `now_ns`. Each (node, incarnation) times out at most once.
    pub fn observe(&mut self, now_ns: u64, arrivals: &[Arrival]) -> Vec<FailureEvent> {
        for arrival in arrivals {
            let msg = arrival.msg;
            let Some(node) = self.nodes.get_mut(&msg.node_id) else {
                self.unknown_senders += 1;
                continue;
            };
            let fresh = if msg.incarnation > node.incarnation {
                true
            } else if msg.incarnation == node.incarnation && !node.failed {
                node.last_sequence.is_none_or(|s| msg.sequence > s)
            } else {
                false
            };
            if !fresh {
                self.stale_messages += 1;
                continue;
            }
            node.incarnation = msg.incarnation;
            node.last_sequence = Some(msg.sequence);
            node.last_heard_ns = node.last_heard_ns.max(arrival.received_at_ns);
            node.failed = false;
        }

        let mut events = Vec::new();
        for (&id, node) in &mut self.nodes {
            if !node.failed && now_ns.saturating_sub(node.last_heard_ns) > self.timeout_ns {
                node.failed = true;
                events.push(FailureEvent {
                    node_id: id,
                    incarnation: node.incarnation,
                    kind: FailureKind::HeartbeatTimeout,
                    detected_at_ns: now_ns,
                });
            }
        }
        events
    }

    /// Expects `node` to come back as `incarnation`, granting a fresh timeout window from `now_ns`.
    pub fn expect_incarnation(&mut self, node: u16, incarnation: u32, now_ns: u64) {
        if let Some(state) = self.nodes.get_mut(&node) {
            state.incarnation = incarnation;
            state.last_sequence = None;
            state.last_heard_ns = now_ns;
            state.failed = false;
        }
    }

    /// Restarts every node's timeout window at `now_ns` without changing incarnations.
    pub fn rearm_all(&mut self, now_ns: u64) {
        for state in self.nodes.values_mut() {
            if !state.failed {
                state.last_heard_ns = state.last_heard_ns.max(now_ns);
            }
        }
    }

    pub fn is_failed(&self, node: u16) -> bool {
        self.nodes.get(&node).is_some_and(|n| n.failed)
    }

    pub fn incarnation(&self, node: u16) -> Option<u32> {
        self.nodes.get(&node).map(|n| n.incarnation)
    }

    /// Datagrams dropped because the sender is not in the expected set.
    pub fn unknown_senders(&self) -> u64 {
        self.unknown_senders
    }

    pub fn stale_messages(&self) -> u64 {
        self.stale_messages
    }
}
