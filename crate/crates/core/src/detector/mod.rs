//! Liveness monitoring: UDP heartbeats and termination notices.

pub mod codec;
pub mod monitor;
pub mod net;
pub mod termination;

pub use codec::{decode_heartbeat, encode_heartbeat, DecodeError, HeartbeatMessage, HEARTBEAT_LEN};
pub use monitor::{Arrival, DetectorConfig, FailureEvent, FailureKind, Monitor};
pub use net::{HeartbeatReceiver, HeartbeatSender, LiveDetector};
pub use termination::{
    NoticeSource, TerminationNotice, TerminationSignal, TerminationWatcher, WatchError,
};
