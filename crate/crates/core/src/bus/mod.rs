//! Hub-and-node message bus: CRC-protected framing, a typed message schema
//! with privacy taint labels, an egress guard, and an encrypted channel for
//! the only path personally identifiable data may travel.

pub mod crc;
pub mod frame;
pub mod schema;
pub mod secure;

use thiserror::Error;

pub use crc::crc16_ccitt_false;
pub use frame::{Frame, FrameScanner, ScanEvent, FLAG_PID, PROTOCOL_VERSION, SYNC_BYTE};
pub use schema::{guard_egress, DenyReason, Message, TaintLabel};
pub use secure::{PairingTable, SealedChunk, SecureChannel};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("crc mismatch: computed {computed:#06x}, frame carries {carried:#06x}")]
    CrcMismatch { computed: u16, carried: u16 },
    #[error("bad sync byte {0:#04x}")]
    BadSync(u8),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated input: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown message type {0:#04x}")]
    UnknownMessageType(u8),
    #[error("payload too large: {0} bytes")]
    TooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("peer {0:?} is not paired")]
    NotPaired(String),
    #[error("peer {0:?} is already paired")]
    AlreadyPaired(String),
    #[error("authentication failure: {0}")]
    AuthenticationFailure(String),
}
