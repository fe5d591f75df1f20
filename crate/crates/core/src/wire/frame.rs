//! Length-prefixed frames: `u32 BE (1 + |body|) ∥ u8 type ∥ body`.

use crate::error::{Error, Result};

pub const MAX_FRAME_BYTES: usize = 16 << 20;
pub const HEADER_BYTES: usize = 5;

pub fn encode_frame(msg_type: u8, body: &[u8]) -> Result<Vec<u8>> {
    if body.len() + 1 > MAX_FRAME_BYTES {
        return Err(Error::Malformed(format!("frame body of {} bytes exceeds limit", body.len())));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + body.len());
    out.extend_from_slice(&((body.len() + 1) as u32).to_be_bytes());
    out.push(msg_type);
    out.extend_from_slice(body);
    Ok(out)
}

/// Incremental decoder for frames arriving in arbitrary chunks.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete `(type, body)`, or `None` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<(u8, Vec<u8>)>> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]) as usize;
        if len == 0 || len > MAX_FRAME_BYTES {
            return Err(Error::Malformed(format!("frame length {len} out of range")));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let msg_type = self.buf[4];
        let body = self.buf[HEADER_BYTES..4 + len].to_vec();
        self.buf.drain(..4 + len);
        Ok(Some((msg_type, body)))
    }
}
