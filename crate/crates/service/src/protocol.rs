//! Frame and payload layouts. All integers are little-endian.
//!
//! | opcode | request payload | response payload |
//! |---|---|---|
//! | 1 LOOKUP | name_len u16, name, count u32, keys u64[count] | dim u16, dtype u8, vectors, source counts 4 x u64 (L1, L2, L3, default) |
//! | 2 PUBLISH | one encoded `UpdateBatch` (its seq is ignored) | assigned seq u64 |
//! | 3 STATS | name_len u16, name | 7 x u64 cache counters |
//! | 4 REFRESH | name_len u16, name | replaced count u64 |
//! | 5 ERROR | (response only) | code u8, msg_len u16, msg |
//!
//! LOOKUP vectors are `count` rows of `dim` scalars in the table dtype; the
//! row count is implied by the payload length.
//!
//! Worked example, LOOKUP of key 1 in table `t` with request id 7:
//!
//! ```text
//! 14 00 00 00  01  07 00 00 00  01 00 74  01 00 00 00  01 00 00 00 00 00 00 00
//! len=20       op  id=7         name "t"  count=1      key 1
//! ```
//!
//! The reply for an F32 table of dim 1 whose value for key 1 is 1.0 and was
//! served from L1:
//!
//! ```text
//! 2c 00 00 00  01  07 00 00 00  01 00  00  00 00 80 3f
//! len=44       op  id=7         dim=1  f32 1.0
//! 01 00 00 00 00 00 00 00  00 .. (three zero u64 counts)
//! ```

use std::io::{self, Read, Write};

use hps_core::hot_cache::CacheStats;
use hps_core::model::{decode_update_batch, encode_update_batch};
use hps_core::orchestrator::SourceCounts;
use hps_core::{DType, DecodeError, EmbeddingKey, EmbeddingVector, TableName, UpdateBatch};
use thiserror::Error;

/// Bytes of opcode plus request id.
pub const HEADER_LEN: u32 = 5;
pub const DEFAULT_MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Lookup = 1,
    Publish = 2,
    Stats = 3,
    Refresh = 4,
    Error = 5,
}

impl Opcode {
    pub fn from_u8(b: u8) -> Option<Opcode> {
        Some(match b {
            1 => Opcode::Lookup,
            2 => Opcode::Publish,
            3 => Opcode::Stats,
            4 => Opcode::Refresh,
            5 => Opcode::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    UnknownOpcode = 1,
    UnknownTable = 2,
    Decode = 3,
    Internal = 4,
}

impl ErrorCode {
    pub fn from_u8(b: u8) -> Option<ErrorCode> {
        Some(match b {
            1 => ErrorCode::UnknownOpcode,
            2 => ErrorCode::UnknownTable,
            3 => ErrorCode::Decode,
            4 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("invalid value: {0}")]
    Invalid(#[from] hps_core::Error),
    #[error("server error {code}: {message}")]
    Remote { code: u8, message: String },
    #[error("unexpected response opcode {0}")]
    UnexpectedOpcode(u8),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One frame; `opcode` stays raw so unknown values can be answered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: Opcode, id: u32, payload: Vec<u8>) -> Self {
        Frame {
            opcode: opcode as u8,
            id,
            payload,
        }
    }

    pub fn error(id: u32, code: ErrorCode, message: &str) -> Self {
        let mut msg = message.as_bytes();
        if msg.len() > u16::MAX as usize {
            msg = &msg[..u16::MAX as usize];
        }
        let mut p = Vec::with_capacity(3 + msg.len());
        p.push(code as u8);
        p.extend_from_slice(&(msg.len() as u16).to_le_bytes());
        p.extend_from_slice(msg);
        Frame::new(Opcode::Error, id, p)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.payload.len());
        out.extend_from_slice(&(HEADER_LEN + self.payload.len() as u32).to_le_bytes());
        out.push(self.opcode);
        out.extend_from_slice(&self.id.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Error code and message if this is an ERROR frame.
    pub fn as_error(&self) -> Option<(u8, String)> {
        if self.opcode != Opcode::Error as u8 {
            return None;
        }
        let mut r = Reader::new(&self.payload);
        let code = r.u8().ok()?;
        let len = r.u16().ok()? as usize;
        let msg = r.take(len).ok()?;
        Some((code, String::from_utf8_lossy(msg).into_owned()))
    }
}

/// Result of reading one frame off a stream.
#[derive(Debug)]
pub enum Incoming {
    Frame(Frame),
    /// Length prefix too small to hold opcode and id; body discarded.
    Runt {
        len: u32,
    },
    /// Length over the limit; body discarded.
    Oversize {
        id: u32,
        len: u32,
    },
}

/// Reads one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read, max_len: u32) -> io::Result<Option<Incoming>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len);
    if len < HEADER_LEN {
        discard(r, len as u64)?;
        return Ok(Some(Incoming::Runt { len }));
    }
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    let id = u32::from_le_bytes(head[1..].try_into().unwrap());
    if len > max_len {
        discard(r, (len - HEADER_LEN) as u64)?;
        return Ok(Some(Incoming::Oversize { id, len }));
    }
    let mut payload = vec![0u8; (len - HEADER_LEN) as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(Incoming::Frame(Frame {
        opcode: head[0],
        id,
        payload,
    })))
}

fn discard(r: &mut impl Read, n: u64) -> io::Result<()> {
    let copied = io::copy(&mut r.take(n), &mut io::sink())?;
    if copied < n {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(())
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(ProtocolError::Malformed(format!(
                "need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn table(&mut self) -> Result<TableName, ProtocolError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        let s = std::str::from_utf8(raw)
            .map_err(|_| ProtocolError::Malformed("table name is not UTF-8".into()))?;
        Ok(TableName::new(s)?)
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(ProtocolError::Malformed(format!("{n} trailing bytes"))),
        }
    }
}

fn put_table(out: &mut Vec<u8>, table: &TableName) {
    out.extend_from_slice(&(table.as_str().len() as u16).to_le_bytes());
    out.extend_from_slice(table.as_str().as_bytes());
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Lookup {
        table: TableName,
        keys: Vec<EmbeddingKey>,
    },
    Publish(UpdateBatch),
    Stats {
        table: TableName,
    },
    Refresh {
        table: TableName,
    },
}

impl Request {
    pub fn opcode(&self) -> Opcode {
        match self {
            Request::Lookup { .. } => Opcode::Lookup,
            Request::Publish(_) => Opcode::Publish,
            Request::Stats { .. } => Opcode::Stats,
            Request::Refresh { .. } => Opcode::Refresh,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Request::Lookup { table, keys } => {
                put_table(&mut out, table);
                out.extend_from_slice(&(keys.len() as u32).to_le_bytes());
                for k in keys {
                    out.extend_from_slice(&k.0.to_le_bytes());
                }
            }
            Request::Publish(batch) => out = encode_update_batch(batch),
            Request::Stats { table } | Request::Refresh { table } => put_table(&mut out, table),
        }
        out
    }

    pub fn to_frame(&self, id: u32) -> Frame {
        Frame::new(self.opcode(), id, self.encode_payload())
    }

    /// Parses a request frame. `Ok(None)` for opcodes that are not requests.
    pub fn decode(frame: &Frame) -> Result<Option<Request>, ProtocolError> {
        let mut r = Reader::new(&frame.payload);
        let req = match Opcode::from_u8(frame.opcode) {
            Some(Opcode::Lookup) => {
                let table = r.table()?;
                let count = r.u32()? as usize;
                if count > (frame.payload.len() - r.pos) / 8 {
                    return Err(ProtocolError::Malformed(format!(
                        "key count {count} exceeds payload"
                    )));
                }
                let keys = (0..count)
                    .map(|_| r.u64().map(EmbeddingKey))
                    .collect::<Result<_, _>>()?;
                Request::Lookup { table, keys }
            }
            Some(Opcode::Publish) => {
                return Ok(Some(Request::Publish(decode_update_batch(&frame.payload)?)))
            }
            Some(Opcode::Stats) => Request::Stats { table: r.table()? },
            Some(Opcode::Refresh) => Request::Refresh { table: r.table()? },
            Some(Opcode::Error) | None => return Ok(None),
        };
        r.finish()?;
        Ok(Some(req))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupReply {
    pub dim: u16,
    pub dtype: DType,
    pub vectors: Vec<EmbeddingVector>,
    pub source_counts: SourceCounts,
}

impl LookupReply {
    pub fn encode(&self) -> Vec<u8> {
        let row = self.dim as usize * self.dtype.width();
        let mut out = Vec::with_capacity(3 + row * self.vectors.len() + 32);
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.push(self.dtype.tag());
        for v in &self.vectors {
            v.write_le(&mut out);
        }
        for c in self.source_counts.to_array() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(payload);
        let dim = r.u16()?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or(DecodeError::UnknownDType(tag))?;
        let row = dim as usize * dtype.width();
        let body = payload.len().checked_sub(3 + 32).ok_or_else(|| {
            ProtocolError::Malformed("lookup reply shorter than its fixed fields".into())
        })?;
        if row == 0 || body % row != 0 {
            return Err(ProtocolError::Malformed(format!(
                "{body} vector bytes is not a multiple of row size {row}"
            )));
        }
        let vectors = (0..body / row)
            .map(|_| Ok(EmbeddingVector::read_le(r.take(row)?, dim, dtype)?))
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        let mut counts = [0u64; 4];
        for c in &mut counts {
            *c = r.u64()?;
        }
        let source_counts = SourceCounts::from_array(counts);
        if source_counts.total() != vectors.len() as u64 {
            return Err(ProtocolError::Malformed(format!(
                "source counts sum to {} for {} vectors",
                source_counts.total(),
                vectors.len()
            )));
        }
        Ok(LookupReply {
            dim,
            dtype,
            vectors,
            source_counts,
        })
    }
}

pub fn encode_u64(v: u64) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

pub fn decode_u64(payload: &[u8]) -> Result<u64, ProtocolError> {
    let mut r = Reader::new(payload);
    let v = r.u64()?;
    r.finish()?;
    Ok(v)
}

pub fn encode_stats(s: &CacheStats) -> Vec<u8> {
    s.to_array().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_stats(payload: &[u8]) -> Result<CacheStats, ProtocolError> {
    let mut r = Reader::new(payload);
    let mut a = [0u64; 7];
    for v in &mut a {
        *v = r.u64()?;
    }
    r.finish()?;
    Ok(CacheStats::from_array(a))
}
