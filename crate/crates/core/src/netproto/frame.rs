//! Wire format.
//!
//! ```text
//! offset size field
//!      0    2 magic 0x43 0x56
//!      2    1 version
//!      3    1 msg_type (0 embedding, 1 heartbeat)
//!      4    2 node_id
//!      6    4 seq
//!     10    4 superframe_idx
//!     14    2 payload_len
//!     16    n payload
//!   16+n    4 CRC-32 (IEEE, reflected) over bytes [0, 16+n)
//! ```
//! All multi-byte fields are little-endian.

use std::io::{self, BufRead, Write};
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x43, 0x56];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const CRC_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 8192;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("crc mismatch: computed {computed:08x}, stored {stored:08x}")]
    BadCrc { computed: u32, stored: u32 },
    #[error("truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload length {0} exceeds {MAX_PAYLOAD}")]
    OverlongPayload(usize),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MsgType {
    Embedding = 0,
    Heartbeat = 1,
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;
    fn try_from(v: u8) -> Result<Self, FrameError> {
        match v {
            0 => Ok(MsgType::Embedding),
            1 => Ok(MsgType::Heartbeat),
            other => Err(FrameError::UnknownMsgType(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub node_id: u16,
    pub seq: u32,
    pub superframe_idx: u32,
    pub payload: Arc<[u8]>,
}

impl Frame {
    pub fn heartbeat(node_id: u16, seq: u32, superframe_idx: u32) -> Self {
        Self { msg_type: MsgType::Heartbeat, node_id, seq, superframe_idx, payload: Arc::from(&[][..]) }
    }

    pub fn embedding(node_id: u16, seq: u32, superframe_idx: u32, payload: impl Into<Arc<[u8]>>) -> Self {
        Self { msg_type: MsgType::Embedding, node_id, seq, superframe_idx, payload: payload.into() }
    }

    /// Encoded size in bytes.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CRC_LEN
    }
}

pub fn encoded_len(payload_len: usize) -> usize {
    HEADER_LEN + payload_len + CRC_LEN
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(FrameError::OverlongPayload(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(frame.wire_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.node_id.to_le_bytes());
    out.extend_from_slice(&frame.seq.to_le_bytes());
    out.extend_from_slice(&frame.superframe_idx.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u16).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Frame, FrameError> {
    let min = HEADER_LEN + CRC_LEN;
    if bytes.len() < min {
        return Err(FrameError::Truncated { needed: min, have: bytes.len() });
    }
    let magic = [bytes[0], bytes[1]];
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if bytes[2] != VERSION {
        return Err(FrameError::BadVersion(bytes[2]));
    }
    let msg_type = MsgType::try_from(bytes[3])?;
    let le16 = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let le32 = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let payload_len = le16(14) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(FrameError::OverlongPayload(payload_len));
    }
    let total = encoded_len(payload_len);
    if bytes.len() < total {
        return Err(FrameError::Truncated { needed: total, have: bytes.len() });
    }
    if bytes.len() > total {
        return Err(FrameError::TrailingBytes(bytes.len() - total));
    }
    let body = HEADER_LEN + payload_len;
    let computed = crc32fast::hash(&bytes[..body]);
    let stored = le32(body);
    if computed != stored {
        return Err(FrameError::BadCrc { computed, stored });
    }
    Ok(Frame {
        msg_type,
        node_id: le16(4),
        seq: le32(6),
        superframe_idx: le32(10),
        payload: Arc::from(&bytes[HEADER_LEN..body]),
    })
}

/// One line of a capture log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub t: f64,
    /// Base64 of the encoded frame.
    pub frame: String,
}

pub fn write_capture<W: Write>(mut w: W, t: f64, encoded: &[u8]) -> io::Result<()> {
    let rec = CaptureRecord { t, frame: base64::engine::general_purpose::STANDARD.encode(encoded) };
    serde_json::to_writer(&mut w, &rec)?;
    w.write_all(b"\n")
}

/// Reads a capture log back into `(t, decoded frame)` pairs. Lines whose frame
/// fails to decode are returned as errors in place.
pub fn read_capture<R: BufRead>(r: R) -> io::Result<Vec<(f64, Result<Frame, FrameError>)>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptureRecord = serde_json::from_str(&line).map_err(io::Error::other)?;
        let raw = base64::engine::general_purpose::STANDARD.decode(&rec.frame).map_err(io::Error::other)?;
        out.push((rec.t, decode(&raw)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_is_ieee() {
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn heartbeat_layout() {
        let f = Frame::heartbeat(0x0102, 0x0A0B0C0D, 7);
        let b = encode(&f).unwrap();
        assert_eq!(b.len(), 20);
        assert_eq!(&b[..16], &[0x43, 0x56, 1, 1, 0x02, 0x01, 0x0D, 0x0C, 0x0B, 0x0A, 7, 0, 0, 0, 0, 0]);
        assert_eq!(&b[16..], &crc32fast::hash(&b[..16]).to_le_bytes());
        assert_eq!(decode(&b).unwrap(), f);
    }

    #[test]
    fn embedding_roundtrip() {
        let payload: Vec<u8> = (0..6144u32).map(|k| (k * 31 % 251) as u8).collect();
        let f = Frame::embedding(3, 99, 12, payload);
        let b = encode(&f).unwrap();
        assert_eq!(b.len(), 6164);
        assert_eq!(decode(&b).unwrap(), f);
    }

    #[test]
    fn flipped_payload_bit_fails_crc() {
        let f = Frame::embedding(3, 1, 1, vec![0xAA; 64]);
        let mut b = encode(&f).unwrap();
        b[40] ^= 0x10;
        assert!(matches!(decode(&b), Err(FrameError::BadCrc { .. })));
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&Frame::embedding(1, 2, 3, vec![1, 2, 3])).unwrap();
        let mut m = good.clone();
        m[0] = 0;
        assert!(matches!(decode(&m), Err(FrameError::BadMagic(_))));
        let mut m = good.clone();
        m[2] = 9;
        assert!(matches!(decode(&m), Err(FrameError::BadVersion(9))));
        let mut m = good.clone();
        m[3] = 5;
        assert!(matches!(decode(&m), Err(FrameError::UnknownMsgType(5))));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(FrameError::Truncated { .. })));
        assert!(matches!(decode(&good[..5]), Err(FrameError::Truncated { .. })));
        let mut m = good.clone();
        m.push(0);
        assert!(matches!(decode(&m), Err(FrameError::TrailingBytes(1))));
        let mut m = good.clone();
        m[14..16].copy_from_slice(&9000u16.to_le_bytes());
        assert!(matches!(decode(&m), Err(FrameError::OverlongPayload(9000))));
        assert!(matches!(
            encode(&Frame::embedding(0, 0, 0, vec![0; MAX_PAYLOAD + 1])),
            Err(FrameError::OverlongPayload(_))
        ));
    }

    #[test]
    fn capture_roundtrip() {
        let frames = [Frame::heartbeat(1, 1, 0), Frame::embedding(2, 5, 0, vec![7; 10])];
        let mut log = Vec::new();
        for (k, f) in frames.iter().enumerate() {
            write_capture(&mut log, k as f64 * 0.5, &encode(f).unwrap()).unwrap();
        }
        let back = read_capture(log.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, 0.5);
        assert_eq!(back[1].1.as_ref().unwrap(), &frames[1]);
    }
}
