//! The 16-byte frame header and payload codecs.
//!
//! ```text
//! offset size field
//!      0    2 magic        0x5F53 ("SF" little-endian)
//!      2    1 version      1
//!      3    1 phase        see `Phase`
//!      4    1 kind         see `PayloadKind`
//!      5    1 session id
//!      6    2 epoch        u16 LE
//!      8    4 batch        u32 LE
//!     12    4 payload len  u32 LE
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{FixedConfig, FixedTensor};

pub const MAGIC: u16 = 0x5F53;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Frames above this size are rejected as corrupt.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Setup = 0,
    Preprocessing = 1,
    Forward = 2,
    Loss = 3,
    Backward = 4,
    Test = 5,
}

impl Phase {
    pub const ALL: [Phase; 6] =
        [Phase::Setup, Phase::Preprocessing, Phase::Forward, Phase::Loss, Phase::Backward, Phase::Test];

    pub fn from_u8(v: u8) -> Result<Self> {
        Phase::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| Error::FrameCorrupt(format!("unknown phase {}", v)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadKind {
    SyncRequest = 1,
    SyncReply = 2,
    /// Plaintext activation map (public modes).
    Activation = 3,
    /// `ATm + alpha`, sent identically to both servers.
    MaskedInput = 4,
    /// A server's share (or plaintext value) of the cut-layer activation.
    CutActivation = 5,
    /// Gradient at the cut layer, client to server.
    CutGradient = 6,
    /// Gradient at the client's last front layer, server to client.
    InputGradient = 7,
    /// Class labels, one byte per sample (vanilla mode only).
    Labels = 8,
    /// Output-layer predictions (vanilla mode only).
    Prediction = 9,
    /// Masked openings exchanged between the two servers.
    Opening = 10,
    /// Initial server weights as shares, dealer to server.
    WeightShares = 11,
    /// Per-batch keys and triples, dealer to server.
    Bundle = 12,
    /// Plaintext input mask, dealer to client.
    InputMask = 13,
}

impl PayloadKind {
    pub fn from_u8(v: u8) -> Result<Self> {
        use PayloadKind::*;
        Ok(match v {
            1 => SyncRequest,
            2 => SyncReply,
            3 => Activation,
            4 => MaskedInput,
            5 => CutActivation,
            6 => CutGradient,
            7 => InputGradient,
            8 => Labels,
            9 => Prediction,
            10 => Opening,
            11 => WeightShares,
            12 => Bundle,
            13 => InputMask,
            _ => return Err(Error::FrameCorrupt(format!("unknown payload kind {}", v))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub session: u8,
    pub epoch: u16,
    pub batch: u32,
    pub phase: Phase,
    pub kind: PayloadKind,
    pub len: u32,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..2].copy_from_slice(&MAGIC.to_le_bytes());
        out[2] = VERSION;
        out[3] = self.phase as u8;
        out[4] = self.kind as u8;
        out[5] = self.session;
        out[6..8].copy_from_slice(&self.epoch.to_le_bytes());
        out[8..12].copy_from_slice(&self.batch.to_le_bytes());
        out[12..16].copy_from_slice(&self.len.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::FrameCorrupt(format!("header of {} bytes", bytes.len())));
        }
        let magic = u16::from_le_bytes([bytes[0], bytes[1]]);
        if magic != MAGIC {
            return Err(Error::FrameCorrupt(format!("bad magic {:#06x}", magic)));
        }
        if bytes[2] != VERSION {
            return Err(Error::FrameCorrupt(format!("unsupported version {}", bytes[2])));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(Error::FrameCorrupt(format!("payload length {} too large", len)));
        }
        Ok(Header {
            phase: Phase::from_u8(bytes[3])?,
            kind: PayloadKind::from_u8(bytes[4])?,
            session: bytes[5],
            epoch: u16::from_le_bytes([bytes[6], bytes[7]]),
            batch: u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
            len,
        })
    }

    /// Position used for the monotone ordering check.
    pub fn position(&self) -> (u16, u32, Phase) {
        (self.epoch, self.batch, self.phase)
    }
}

/// A header plus its payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl ProtocolMessage {
    pub fn to_frame(&self) -> Vec<u8> {
        let mut frame = Vec::with_capacity(HEADER_LEN + self.payload.len());
        frame.extend_from_slice(&self.header.encode());
        frame.extend_from_slice(&self.payload);
        frame
    }

    pub fn from_frame(frame: &[u8]) -> Result<Self> {
        let header = Header::decode(frame)?;
        let payload = &frame[HEADER_LEN..];
        if payload.len() != header.len as usize {
            return Err(Error::FrameCorrupt(format!(
                "header announces {} payload bytes, frame carries {}",
                header.len,
                payload.len()
            )));
        }
        Ok(Self { header, payload: payload.to_vec() })
    }
}

/// Little-endian payload builder.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { buf: Vec::with_capacity(n) }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// One ring element in `n/8` little-endian bytes.
    pub fn ring(&mut self, cfg: FixedConfig, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes()[..cfg.elem_bytes()]);
        self
    }

    /// Raw elements without any shape information.
    pub fn ring_slice(&mut self, cfg: FixedConfig, data: &[u64]) -> &mut Self {
        let w = cfg.elem_bytes();
        self.buf.reserve(w * data.len());
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes()[..w]);
        }
        self
    }

    /// Rank byte, u32 dimensions, then raw elements.
    pub fn tensor_with_shape(&mut self, t: &FixedTensor) -> &mut Self {
        self.u8(t.shape().len() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.ring_slice(t.cfg(), t.data())
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian payload parser.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::FrameCorrupt(format!(
                "payload ended at {} while reading {} bytes",
                self.buf.len(),
                n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn ring(&mut self, cfg: FixedConfig) -> Result<u64> {
        let w = cfg.elem_bytes();
        let mut b = [0u8; 8];
        b[..w].copy_from_slice(self.take(w)?);
        Ok(u64::from_le_bytes(b))
    }

    pub fn ring_vec(&mut self, cfg: FixedConfig, n: usize) -> Result<Vec<u64>> {
        let w = cfg.elem_bytes();
        let raw = self.take(n * w)?;
        Ok(raw
            .chunks_exact(w)
            .map(|c| {
                let mut b = [0u8; 8];
                b[..w].copy_from_slice(c);
                u64::from_le_bytes(b)
            })
            .collect())
    }

    pub fn tensor(&mut self, cfg: FixedConfig, shape: &[usize]) -> Result<FixedTensor> {
        let n = shape.iter().product();
        FixedTensor::new(cfg, shape.to_vec(), self.ring_vec(cfg, n)?)
    }

    pub fn tensor_with_shape(&mut self, cfg: FixedConfig) -> Result<FixedTensor> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        self.tensor(cfg, &shape)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::FrameCorrupt(format!("{} trailing payload bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Payload that is exactly the raw elements of `t`.
pub fn tensor_payload(t: &FixedTensor) -> Vec<u8> {
    let mut w = Writer::with_capacity(t.len() * t.cfg().elem_bytes());
    w.ring_slice(t.cfg(), t.data());
    w.finish()
}

pub fn tensor_from_payload(cfg: FixedConfig, shape: &[usize], payload: &[u8]) -> Result<FixedTensor> {
    let mut r = Reader::new(payload);
    let t = r.tensor(cfg, shape)?;
    r.finish()?;
    Ok(t)
}
