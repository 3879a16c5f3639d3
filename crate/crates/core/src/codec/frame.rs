use std::io::{Read, Write};

use crate::error::{Error, Result};

/// `"SUBP"` read as a little-endian `u32`.
pub const MAGIC: u32 = 0x5355_4250;
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 34;
/// Upper bound accepted by [`read_frame`], guarding against corrupt prefixes.
pub const MAX_FRAME_BYTES: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Forward = 1,
    Backward = 2,
    Subspace = 3,
    Control = 4,
}

impl TryFrom<u8> for MsgType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::Forward),
            2 => Ok(Self::Backward),
            3 => Ok(Self::Subspace),
            4 => Ok(Self::Control),
            other => Err(Error::Protocol(format!("unknown message type {other}"))),
        }
    }
}

/// One wire message: a fixed 34-byte header, optional token ids and an
/// `f32` payload.
///
/// `token_ids_len` and `payload_len` in the header count elements, not bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedFrame {
    pub msg_type: MsgType,
    pub layer_id: u16,
    pub microbatch_id: u16,
    pub subspace_version: u32,
    pub b: u16,
    pub n: u16,
    pub k: u16,
    pub token_ids: Vec<u32>,
    pub payload: Vec<f32>,
}

fn narrow(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Range(format!("{what} = {v} does not fit in 16 bits")))
}

impl CompressedFrame {
    /// Frame with `b x n x k` header dims; checks they fit the wire fields.
    pub fn new(
        msg_type: MsgType,
        layer_id: usize,
        microbatch_id: usize,
        subspace_version: u32,
        (b, n, k): (usize, usize, usize),
        token_ids: Vec<u32>,
        payload: Vec<f32>,
    ) -> Result<Self> {
        Ok(Self {
            msg_type,
            layer_id: narrow(layer_id, "layer_id")?,
            microbatch_id: narrow(microbatch_id, "microbatch_id")?,
            subspace_version,
            b: narrow(b, "b")?,
            n: narrow(n, "n")?,
            k: narrow(k, "k")?,
            token_ids,
            payload,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.b as usize, self.n as usize, self.k as usize)
    }

    /// Serialized size in bytes, excluding any transport length prefix.
    pub fn wire_len(&self) -> usize {
        HEADER_BYTES + 4 * self.token_ids.len() + 4 * self.payload.len()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(WIRE_VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.layer_id.to_le_bytes());
        out.extend_from_slice(&self.microbatch_id.to_le_bytes());
        out.extend_from_slice(&self.subspace_version.to_le_bytes());
        out.extend_from_slice(&self.b.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.token_ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for t in &self.token_ids {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Protocol(format!(
                "{} bytes is shorter than a header",
                bytes.len()
            )));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if u32_at(0) != MAGIC {
            return Err(Error::Protocol(format!("bad magic {:#010x}", u32_at(0))));
        }
        if bytes[4] != WIRE_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported wire version {}",
                bytes[4]
            )));
        }
        let msg_type = MsgType::try_from(bytes[5])?;
        let token_len = u32_at(22) as usize;
        let payload_len = u64::from_le_bytes(bytes[26..34].try_into().expect("8 bytes"));
        let payload_len = usize::try_from(payload_len)
            .map_err(|_| Error::Protocol("payload length overflows".into()))?;
        let expected = token_len
            .checked_mul(4)
            .and_then(|t| payload_len.checked_mul(4).and_then(|p| p.checked_add(t)))
            .and_then(|body| body.checked_add(HEADER_BYTES))
            .ok_or_else(|| Error::Protocol("frame length overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Protocol(format!(
                "frame is {} bytes, header announces {expected}",
                bytes.len()
            )));
        }
        let body = &bytes[HEADER_BYTES..];
        let (tok, pay) = body.split_at(4 * token_len);
        let token_ids = tok
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let payload = pay
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            msg_type,
            layer_id: u16_at(6),
            microbatch_id: u16_at(8),
            subspace_version: u32_at(10),
            b: u16_at(14),
            n: u16_at(16),
            k: u16_at(18),
            token_ids,
            payload,
        })
    }
}

/// Writes `u64 LE length` followed by the serialized frame.
pub fn write_frame<W: Write>(w: &mut W, frame: &CompressedFrame) -> Result<()> {
    let bytes = frame.serialize();
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads one length-prefixed frame. Returns `None` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<CompressedFrame>> {
    let mut prefix = [0u8; 8];
    match r.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u64::from_le_bytes(prefix);
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame length {len} exceeds limit")));
    }
    let mut bytes = vec![0u8; len as usize];
    r.read_exact(&mut bytes)?;
    CompressedFrame::deserialize(&bytes).map(Some)
}
