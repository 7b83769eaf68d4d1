//! 28-byte heartbeat datagram.
//!
//! ```text
//! magic u32 = 0x44454C41 | version u8 = 1 | flags u8 = 0 | node_id u16
//! incarnation u32 | sequence u64 | timestamp_us u64
//! ```
//! All fields little-endian.

use thiserror::Error;

pub const HEARTBEAT_MAGIC: u32 = 0x4445_4C41;
pub const HEARTBEAT_VERSION: u8 = 1;
pub const HEARTBEAT_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeartbeatMessage {
    pub node_id: u16,
    pub incarnation: u32,
    pub sequence: u64,
    /// Wall clock of the sender; informational only.
    pub timestamp_us: u64,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    #[error("datagram is {0} bytes, expected 28")]
    BadLength(usize),
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported heartbeat version {0}")]
    BadVersion(u8),
    #[error("unknown flags {0:#04x}")]
    BadFlags(u8),
}

pub fn encode_heartbeat(msg: &HeartbeatMessage) -> [u8; HEARTBEAT_LEN] {
    let mut out = [0u8; HEARTBEAT_LEN];
    out[0..4].copy_from_slice(&HEARTBEAT_MAGIC.to_le_bytes());
    out[4] = HEARTBEAT_VERSION;
    out[5] = 0;
    out[6..8].copy_from_slice(&msg.node_id.to_le_bytes());
    out[8..12].copy_from_slice(&msg.incarnation.to_le_bytes());
    out[12..20].copy_from_slice(&msg.sequence.to_le_bytes());
    out[20..28].copy_from_slice(&msg.timestamp_us.to_le_bytes());
    out
}

pub fn decode_heartbeat(bytes: &[u8]) -> Result<HeartbeatMessage, DecodeError> {
    let b: &[u8; HEARTBEAT_LEN] = bytes
        .try_into()
        .map_err(|_| DecodeError::BadLength(bytes.len()))?;
    let magic = u32::from_le_bytes(b[0..4].try_into().unwrap());
    if magic != HEARTBEAT_MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if b[4] != HEARTBEAT_VERSION {
        return Err(DecodeError::BadVersion(b[4]));
    }
    if b[5] != 0 {
        return Err(DecodeError::BadFlags(b[5]));
    }
    Ok(HeartbeatMessage {
        node_id: u16::from_le_bytes(b[6..8].try_into().unwrap()),
        incarnation: u32::from_le_bytes(b[8..12].try_into().unwrap()),
        sequence: u64::from_le_bytes(b[12..20].try_into().unwrap()),
        timestamp_us: u64::from_le_bytes(b[20..28].try_into().unwrap()),
    })
}
