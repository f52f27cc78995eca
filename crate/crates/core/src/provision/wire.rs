//! Length-prefixed frames: `u32 len | u8 tag | fields`, little-endian,
//! strings as `u16 len | bytes`. `len` counts the tag and fields.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ProtocolMessage {
    PrepareFunction {
        function: String,
        image: String,
        memory_mb: u32,
        upstream: String,
    },
    WorkerReady {
        function: String,
        vm: u64,
    },
    CreateContainer {
        function: String,
    },
    BlockRequest {
        image_id: String,
        block_index: u64,
    },
    BlockData {
        image_id: String,
        block_index: u64,
        payload_len: u32,
    },
    ContainerCreated {
        function: String,
        vm: u64,
    },
    Ping {
        seq: u64,
    },
    Pong {
        seq: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("string is not utf-8")]
    Utf8,
    #[error("string longer than 65535 bytes")]
    StringTooLong,
    #[error("{0} trailing bytes in frame")]
    Trailing(usize),
}

impl ProtocolMessage {
    pub fn tag(&self) -> u8 {
        match self {
            ProtocolMessage::PrepareFunction { .. } => 1,
            ProtocolMessage::WorkerReady { .. } => 2,
            ProtocolMessage::CreateContainer { .. } => 3,
            ProtocolMessage::BlockRequest { .. } => 4,
            ProtocolMessage::BlockData { .. } => 5,
            ProtocolMessage::ContainerCreated { .. } => 6,
            ProtocolMessage::Ping { .. } => 7,
            ProtocolMessage::Pong { .. } => 8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolMessage::PrepareFunction { .. } => "PrepareFunction",
            ProtocolMessage::WorkerReady { .. } => "WorkerReady",
            ProtocolMessage::CreateContainer { .. } => "CreateContainer",
            ProtocolMessage::BlockRequest { .. } => "BlockRequest",
            ProtocolMessage::BlockData { .. } => "BlockData",
            ProtocolMessage::ContainerCreated { .. } => "ContainerCreated",
            ProtocolMessage::Ping { .. } => "Ping",
            ProtocolMessage::Pong { .. } => "Pong",
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut b = vec![0, 0, 0, 0, self.tag()];
        match self {
            ProtocolMessage::PrepareFunction {
                function,
                image,
                memory_mb,
                upstream,
            } => {
                put_str(&mut b, function)?;
                put_str(&mut b, image)?;
                b.extend_from_slice(&memory_mb.to_le_bytes());
                put_str(&mut b, upstream)?;
            }
            ProtocolMessage::WorkerReady { function, vm } | ProtocolMessage::ContainerCreated { function, vm } => {
                put_str(&mut b, function)?;
                b.extend_from_slice(&vm.to_le_bytes());
            }
            ProtocolMessage::CreateContainer { function } => put_str(&mut b, function)?,
            ProtocolMessage::BlockRequest { image_id, block_index } => {
                put_str(&mut b, image_id)?;
                b.extend_from_slice(&block_index.to_le_bytes());
            }
            ProtocolMessage::BlockData {
                image_id,
                block_index,
                payload_len,
            } => {
                put_str(&mut b, image_id)?;
                b.extend_from_slice(&block_index.to_le_bytes());
                b.extend_from_slice(&payload_len.to_le_bytes());
            }
            ProtocolMessage::Ping { seq } | ProtocolMessage::Pong { seq } => {
                b.extend_from_slice(&seq.to_le_bytes());
            }
        }
        let len = (b.len() - 4) as u32;
        b[..4].copy_from_slice(&len.to_le_bytes());
        Ok(b)
    }

    /// Decodes one frame from the front of `buf`, returning it and the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(ProtocolMessage, usize), WireError> {
        let mut r = Reader { b: buf, at: 0 };
        let len = r.u32()? as usize;
        let body = buf.get(4..4 + len).ok_or(WireError::Truncated)?;
        let mut r = Reader { b: body, at: 0 };
        let msg = match r.u8()? {
            1 => ProtocolMessage::PrepareFunction {
                function: r.string()?,
                image: r.string()?,
                memory_mb: r.u32()?,
                upstream: r.string()?,
            },
            2 => ProtocolMessage::WorkerReady {
                function: r.string()?,
                vm: r.u64()?,
            },
            3 => ProtocolMessage::CreateContainer { function: r.string()? },
            4 => ProtocolMessage::BlockRequest {
                image_id: r.string()?,
                block_index: r.u64()?,
            },
            5 => ProtocolMessage::BlockData {
                image_id: r.string()?,
                block_index: r.u64()?,
                payload_len: r.u32()?,
            },
            6 => ProtocolMessage::ContainerCreated {
                function: r.string()?,
                vm: r.u64()?,
            },
            7 => ProtocolMessage::Ping { seq: r.u64()? },
            8 => ProtocolMessage::Pong { seq: r.u64()? },
            t => return Err(WireError::UnknownTag(t)),
        };
        if r.at != body.len() {
            return Err(WireError::Trailing(body.len() - r.at));
        }
        Ok((msg, 4 + len))
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let n = u16::try_from(s.len()).map_err(|_| WireError::StringTooLong)?;
    b.extend_from_slice(&n.to_le_bytes());
    b.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], WireError> {
        let s = self.b.get(self.at..self.at + n).ok_or(WireError::Truncated)?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::Utf8)
    }
}

/// Encodes a message log as back-to-back frames.
pub fn encode_log(msgs: &[ProtocolMessage]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    for m in msgs {
        out.extend(m.encode()?);
    }
    Ok(out)
}

pub fn decode_log(mut buf: &[u8]) -> Result<Vec<ProtocolMessage>, WireError> {
    let mut out = Vec::new();
    while !buf.is_empty() {
        let (m, n) = ProtocolMessage::decode(buf)?;
        out.push(m);
        buf = &buf[n..];
    }
    Ok(out)
}
