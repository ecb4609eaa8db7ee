//! Length-prefixed binary framing shared by workers and the coordinator.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "HPIP"
//!      4     1  version (1)
//!      5     1  msg_type
//!      6     8  frame_id      u64 BE
//!     14     2  stage_id      u16 BE
//!     16     8  timestamp_ns  u64 BE, sender monotonic clock
//!     24     4  payload_len   u32 BE
//!     28     2  routed leaf   u16 BE   (FRAME only)
//!    28+        payload
//! ```

use std::io::{self, Read, Write};
use std::sync::OnceLock;
use std::time::Instant;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"HPIP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;
/// Upper bound on accepted payloads.
pub const MAX_PAYLOAD: u32 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Frame = 1,
    Result = 2,
    ProfilePing = 3,
    ProfilePong = 4,
    Shutdown = 5,
    Metrics = 6,
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;
    fn try_from(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            1 => MsgType::Frame,
            2 => MsgType::Result,
            3 => MsgType::ProfilePing,
            4 => MsgType::ProfilePong,
            5 => MsgType::Shutdown,
            6 => MsgType::Metrics,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(u64),
    #[error("FRAME message without a routed leaf")]
    MissingLeaf,
    #[error("connection closed mid-message")]
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub frame_id: u64,
    pub stage_id: u16,
    pub timestamp_ns: u64,
    /// Routed leaf; present exactly on FRAME messages.
    pub leaf: Option<u16>,
    pub payload: Vec<u8>,
}

impl WireMessage {
    fn new(msg_type: MsgType, frame_id: u64, stage_id: u16, payload: Vec<u8>) -> Self {
        WireMessage {
            msg_type,
            frame_id,
            stage_id,
            timestamp_ns: monotonic_ns(),
            leaf: None,
            payload,
        }
    }

    pub fn frame(frame_id: u64, stage_id: u16, leaf: u16, payload: Vec<u8>) -> Self {
        WireMessage {
            leaf: Some(leaf),
            ..Self::new(MsgType::Frame, frame_id, stage_id, payload)
        }
    }

    pub fn result(frame_id: u64, leaf: u16) -> Self {
        Self::new(MsgType::Result, frame_id, leaf, Vec::new())
    }

    pub fn ping(seq: u64, payload: Vec<u8>) -> Self {
        Self::new(MsgType::ProfilePing, seq, 0, payload)
    }

    pub fn pong(ping: &WireMessage) -> Self {
        Self::new(
            MsgType::ProfilePong,
            ping.frame_id,
            ping.stage_id,
            ping.payload.clone(),
        )
    }

    pub fn shutdown() -> Self {
        Self::new(MsgType::Shutdown, 0, 0, Vec::new())
    }

    pub fn metrics(device: u16, json: Vec<u8>) -> Self {
        Self::new(MsgType::Metrics, 0, device, json)
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + if self.msg_type == MsgType::Frame {
                2
            } else {
                0
            }
            + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let len = u32::try_from(self.payload.len())
            .ok()
            .filter(|&l| l <= MAX_PAYLOAD)
            .ok_or(WireError::PayloadTooLarge(self.payload.len() as u64))?;
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&MAGIC);
        buf.push(VERSION);
        buf.push(self.msg_type as u8);
        buf.extend_from_slice(&self.frame_id.to_be_bytes());
        buf.extend_from_slice(&self.stage_id.to_be_bytes());
        buf.extend_from_slice(&self.timestamp_ns.to_be_bytes());
        buf.extend_from_slice(&len.to_be_bytes());
        if self.msg_type == MsgType::Frame {
            buf.extend_from_slice(&self.leaf.ok_or(WireError::MissingLeaf)?.to_be_bytes());
        }
        buf.extend_from_slice(&self.payload);
        Ok(buf)
    }

    /// Encode and write in a single call.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), WireError> {
        w.write_all(&self.encode()?)?;
        Ok(())
    }

    /// Read one message; `Ok(None)` on a clean end of stream between messages.
    pub fn read_from(r: &mut impl Read) -> Result<Option<WireMessage>, WireError> {
        let mut header = [0u8; HEADER_LEN];
        match read_full(r, &mut header)? {
            0 => return Ok(None),
            n if n < HEADER_LEN => return Err(WireError::Truncated),
            _ => {}
        }
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        if header[4] != VERSION {
            return Err(WireError::UnsupportedVersion(header[4]));
        }
        let msg_type = MsgType::try_from(header[5])?;
        let frame_id = u64::from_be_bytes(header[6..14].try_into().unwrap());
        let stage_id = u16::from_be_bytes(header[14..16].try_into().unwrap());
        let timestamp_ns = u64::from_be_bytes(header[16..24].try_into().unwrap());
        let len = u32::from_be_bytes(header[24..28].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge(len as u64));
        }
        let leaf = if msg_type == MsgType::Frame {
            let mut b = [0u8; 2];
            if read_full(r, &mut b)? < 2 {
                return Err(WireError::Truncated);
            }
            Some(u16::from_be_bytes(b))
        } else {
            None
        };
        let mut payload = vec![0u8; len as usize];
        if read_full(r, &mut payload)? < payload.len() {
            return Err(WireError::Truncated);
        }
        Ok(Some(WireMessage {
            msg_type,
            frame_id,
            stage_id,
            timestamp_ns,
            leaf,
            payload,
        }))
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Nanoseconds since the first call in this process.
pub fn monotonic_ns() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_big_endian() {
        let mut m = WireMessage::frame(0x0102030405060708, 0x0a0b, 0x0c0d, vec![0xee; 3]);
        m.timestamp_ns = 0x1112131415161718;
        let b = m.encode().unwrap();
        assert_eq!(&b[0..4], b"HPIP");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..14], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(&b[14..16], &[0x0a, 0x0b]);
        assert_eq!(
            &b[16..24],
            &[0x11, 0x12, 0x13, 0x14, 0x15, 0x16, 0x17, 0x18]
        );
        assert_eq!(&b[24..28], &[0, 0, 0, 3]);
        assert_eq!(&b[28..30], &[0x0c, 0x0d]);
        assert_eq!(&b[30..], &[0xee; 3]);
        assert_eq!(b.len(), m.encoded_len());
    }

    #[test]
    fn rejects_unknown_version_and_type() {
        let mut b = WireMessage::shutdown().encode().unwrap();
        b[4] = 2;
        assert!(matches!(
            WireMessage::read_from(&mut &b[..]),
            Err(WireError::UnsupportedVersion(2))
        ));
        b[4] = 1;
        b[5] = 9;
        assert!(matches!(
            WireMessage::read_from(&mut &b[..]),
            Err(WireError::UnknownType(9))
        ));
        b[0] = b'X';
        assert!(matches!(
            WireMessage::read_from(&mut &b[..]),
            Err(WireError::BadMagic(_))
        ));
    }

    #[test]
    fn eof_and_truncation() {
        assert!(WireMessage::read_from(&mut &[][..]).unwrap().is_none());
        let b = WireMessage::result(1, 2).encode().unwrap();
        assert!(matches!(
            WireMessage::read_from(&mut &b[..10]),
            Err(WireError::Truncated)
        ));
        let f = WireMessage::frame(1, 2, 3, vec![1, 2, 3]).encode().unwrap();
        assert!(matches!(
            WireMessage::read_from(&mut &f[..f.len() - 1]),
            Err(WireError::Truncated)
        ));
    }

    #[test]
    fn frame_needs_a_leaf() {
        let mut m = WireMessage::frame(1, 2, 3, vec![]);
        m.leaf = None;
        assert!(matches!(m.encode(), Err(WireError::MissingLeaf)));
    }
}
