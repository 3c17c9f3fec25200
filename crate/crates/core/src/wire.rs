//! Length-prefixed binary messages between the edge runner and the cloud server.
//!
//! A frame is `[len u32][type u8][payload]`, where `len` counts the type byte
//! and the payload. All integers and floats are little-endian.

use std::io::{self, Read, Write};

use crate::checkpoint::ConfigDigest;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROTOCOL_VERSION: u16 = 1;
pub const DEFAULT_MAX_FRAME: usize = 16 * 1024 * 1024;

pub const TYPE_HELLO: u8 = 0x01;
pub const TYPE_FEATURES: u8 = 0x02;
pub const TYPE_PREDICTION: u8 = 0x03;
pub const TYPE_STATS: u8 = 0x04;
pub const TYPE_BYE: u8 = 0x05;

/// Traffic counters exchanged at the end of a session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    /// FEATURES messages.
    pub samples: u64,
    /// Total frame bytes of those FEATURES messages.
    pub feature_bytes: u64,
    /// PREDICTION messages.
    pub predictions: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        version: u16,
        digest: ConfigDigest,
    },
    Features {
        sample_id: u64,
        layer: u16,
        tensor: Tensor,
    },
    Prediction {
        sample_id: u64,
        class: u16,
        probs: Vec<f32>,
    },
    Stats(Stats),
    Bye,
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello { .. } => TYPE_HELLO,
            Message::Features { .. } => TYPE_FEATURES,
            Message::Prediction { .. } => TYPE_PREDICTION,
            Message::Stats(_) => TYPE_STATS,
            Message::Bye => TYPE_BYE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Features { .. } => "FEATURES",
            Message::Prediction { .. } => "PREDICTION",
            Message::Stats(_) => "STATS",
            Message::Bye => "BYE",
        }
    }
}

/// Frame size of a FEATURES message carrying a tensor of this shape.
pub fn features_frame_len(shape: &[usize]) -> usize {
    4 + 1 + 8 + 2 + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

fn put_f32s(b: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        b.extend(x.to_le_bytes());
    }
}

/// Serialize one message as a complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let mut body = vec![msg.type_byte()];
    match msg {
        Message::Hello { version, digest } => {
            body.extend(version.to_le_bytes());
            body.extend_from_slice(digest);
        }
        Message::Features {
            sample_id,
            layer,
            tensor,
        } => {
            body.extend(sample_id.to_le_bytes());
            body.extend(layer.to_le_bytes());
            let rank = u8::try_from(tensor.rank())
                .map_err(|_| Error::Protocol(format!("rank {} does not fit in u8", tensor.rank())))?;
            body.push(rank);
            for &d in tensor.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Protocol(format!("dim {d} does not fit in u32")))?;
                body.extend(d.to_le_bytes());
            }
            put_f32s(&mut body, tensor.data());
        }
        Message::Prediction {
            sample_id,
            class,
            probs,
        } => {
            body.extend(sample_id.to_le_bytes());
            body.extend(class.to_le_bytes());
            let n = u16::try_from(probs.len())
                .map_err(|_| Error::Protocol(format!("{} probabilities do not fit in u16", probs.len())))?;
            body.extend(n.to_le_bytes());
            put_f32s(&mut body, probs);
        }
        Message::Stats(s) => {
            for v in [s.samples, s.feature_bytes, s.predictions] {
                body.extend(v.to_le_bytes());
            }
        }
        Message::Bye => {}
    }
    let len = u32::try_from(body.len()).map_err(|_| Error::Protocol("frame exceeds u32 length".into()))?;
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend(len.to_le_bytes());
    frame.extend(body);
    Ok(frame)
}

struct Body<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Body<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Framing(format!(
                "{} payload truncated: need {n} more bytes at offset {}, have {}",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Framing(format!("{} element count overflows", self.what)))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<()> {
        let extra = self.buf.len() - self.pos;
        if extra != 0 {
            return Err(Error::Framing(format!(
                "{} payload has {extra} bytes beyond its contents",
                self.what
            )));
        }
        Ok(())
    }
}

/// Parse the type byte and payload of one frame (everything after the length).
pub fn decode_body(body: &[u8]) -> Result<Message> {
    let (&ty, payload) = body
        .split_first()
        .ok_or_else(|| Error::Framing("empty frame has no type byte".into()))?;
    let what = match ty {
        TYPE_HELLO => "HELLO",
        TYPE_FEATURES => "FEATURES",
        TYPE_PREDICTION => "PREDICTION",
        TYPE_STATS => "STATS",
        TYPE_BYE => "BYE",
        other => return Err(Error::Protocol(format!("unknown message type 0x{other:02x}"))),
    };
    let mut b = Body {
        buf: payload,
        pos: 0,
        what,
    };
    let msg = match ty {
        TYPE_HELLO => {
            let version = b.u16()?;
            let digest = b.take(32)?.try_into().unwrap();
            Message::Hello { version, digest }
        }
        TYPE_FEATURES => {
            let sample_id = b.u64()?;
            let layer = b.u16()?;
            let rank = b.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| b.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Framing("FEATURES dims overflow".into()))?;
            if rank == 0 || numel == 0 {
                return Err(Error::Framing(format!("FEATURES has empty shape {dims:?}")));
            }
            let values = b.f32s(numel)?;
            let tensor = Tensor::new(&dims, values).map_err(|e| Error::Framing(format!("FEATURES: {e}")))?;
            Message::Features {
                sample_id,
                layer,
                tensor,
            }
        }
        TYPE_PREDICTION => {
            let sample_id = b.u64()?;
            let class = b.u16()?;
            let n = b.u16()? as usize;
            let probs = b.f32s(n)?;
            Message::Prediction {
                sample_id,
                class,
                probs,
            }
        }
        TYPE_STATS => Message::Stats(Stats {
            samples: b.u64()?,
            feature_bytes: b.u64()?,
            predictions: b.u64()?,
        }),
        _ => Message::Bye,
    };
    b.finish()?;
    Ok(msg)
}

/// Decode a buffer holding exactly one frame.
pub fn decode(frame: &[u8], max_frame: usize) -> Result<Message> {
    if frame.len() < 4 {
        return Err(Error::Framing(format!("{} bytes cannot hold a length prefix", frame.len())));
    }
    let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
    check_len(len, max_frame)?;
    let body = &frame[4..];
    if body.len() != len {
        return Err(Error::Framing(format!(
            "length field says {len} bytes, frame carries {}",
            body.len()
        )));
    }
    decode_body(body)
}

fn check_len(len: usize, max_frame: usize) -> Result<()> {
    if len > max_frame {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit {max_frame}")));
    }
    Ok(())
}

/// Read one frame. `Ok(None)` on a clean end of stream before a new frame.
/// Returns the message and the frame's total byte count.
pub fn read_message(r: &mut impl Read, max_frame: usize) -> Result<Option<(Message, usize)>> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Framing(format!("stream ended inside a length prefix ({got} of 4 bytes)"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    check_len(len, max_frame)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Framing(format!("stream ended inside a {len}-byte frame")),
        _ => Error::Io(e),
    })?;
    Ok(Some((decode_body(&body)?, 4 + len)))
}

/// Write one frame, returning its byte count.
pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<usize> {
    let frame = encode(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}
