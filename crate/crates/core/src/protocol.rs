//! Bit-exact descriptor/chunk wire format for the offload link and the
//! transfer cost model with its small-transfer penalty.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! magic: u32 | version: u16 | count: u16 | body_len: u32 | body | crc32: u32
//! ```
//!
//! The CRC (IEEE polynomial) covers everything after the magic up to and
//! excluding the CRC itself. Request chunks carry [`Descriptor`]s, response
//! chunks echo per-descriptor outputs with the same header and CRC scheme.

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// "HPUC"
pub const CHUNK_MAGIC: u32 = 0x4850_5543;
/// "HPUR"
pub const RESPONSE_MAGIC: u32 = 0x4850_5552;
pub const WIRE_VERSION: u16 = 1;
pub const MAX_DESCRIPTORS: usize = 256;
/// magic + version + count + body_len
pub const HEADER_BYTES: usize = 12;
pub const DESC_HEADER_BYTES: usize = 24;
pub const CRC_BYTES: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("chunk must carry between 1 and {MAX_DESCRIPTORS} descriptors, got {0}")]
    ChunkTooLarge(usize),
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported wire version {0}")]
    BadVersion(u16),
    #[error("crc mismatch: stored 0x{stored:08x}, computed 0x{computed:08x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("frame truncated: need {need} bytes, have {have}")]
    TruncatedFrame { need: usize, have: usize },
    #[error("descriptor payload inconsistent with its header")]
    MalformedDescriptor,
}

/// One head-group offload request: addressing metadata plus the Q, new-K,
/// and new-V payloads in half precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub head_id: u32,
    pub batch_id: u32,
    pub kv_base_addr: u64,
    pub seq_len: u32,
    pub head_dim: u16,
    pub group_size: u16,
    /// g x d values.
    pub q: Vec<f16>,
    pub k_new: Vec<f16>,
    pub v_new: Vec<f16>,
}

impl Descriptor {
    pub fn payload_bytes(&self) -> usize {
        (self.group_size as usize + 2) * self.head_dim as usize * 2
    }

    pub fn wire_bytes(&self) -> usize {
        DESC_HEADER_BYTES + self.payload_bytes()
    }

    fn shape_ok(&self) -> bool {
        let d = self.head_dim as usize;
        self.q.len() == self.group_size as usize * d
            && self.k_new.len() == d
            && self.v_new.len() == d
    }
}

/// Up to 256 descriptors framed for one bulk DMA submission.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub version: u16,
    pub descriptors: Vec<Descriptor>,
}

impl Chunk {
    pub fn new(descriptors: Vec<Descriptor>) -> Result<Self, ProtocolError> {
        if descriptors.is_empty() || descriptors.len() > MAX_DESCRIPTORS {
            return Err(ProtocolError::ChunkTooLarge(descriptors.len()));
        }
        Ok(Chunk {
            version: WIRE_VERSION,
            descriptors,
        })
    }

    pub fn wire_bytes(&self) -> usize {
        HEADER_BYTES
            + self
                .descriptors
                .iter()
                .map(|d| d.wire_bytes())
                .sum::<usize>()
            + CRC_BYTES
    }
}

/// Per-descriptor result echo: identity plus the g x d output payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseDescriptor {
    pub head_id: u32,
    pub batch_id: u32,
    pub head_dim: u16,
    pub group_size: u16,
    pub out: Vec<f16>,
}

impl ResponseDescriptor {
    pub fn wire_bytes(&self) -> usize {
        12 + self.group_size as usize * self.head_dim as usize * 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseChunk {
    pub version: u16,
    pub results: Vec<ResponseDescriptor>,
}

impl ResponseChunk {
    pub fn new(results: Vec<ResponseDescriptor>) -> Result<Self, ProtocolError> {
        if results.is_empty() || results.len() > MAX_DESCRIPTORS {
            return Err(ProtocolError::ChunkTooLarge(results.len()));
        }
        Ok(ResponseChunk {
            version: WIRE_VERSION,
            results,
        })
    }

    pub fn wire_bytes(&self) -> usize {
        HEADER_BYTES + self.results.iter().map(|d| d.wire_bytes()).sum::<usize>() + CRC_BYTES
    }
}

fn put_f16s(buf: &mut Vec<u8>, vals: &[f16]) {
    for v in vals {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.pos + n > self.buf.len() {
            return Err(ProtocolError::TruncatedFrame {
                need: self.pos + n,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn f16s(&mut self, n: usize) -> Result<Vec<f16>, ProtocolError> {
        let raw = self.take(n * 2)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
            .collect())
    }
}

fn encode_frame(magic: u32, version: u16, count: u16, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + body.len() + CRC_BYTES);
    out.extend_from_slice(&magic.to_le_bytes());
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn decode_frame(bytes: &[u8], magic: u32) -> Result<(u16, u16, &[u8]), ProtocolError> {
    if bytes.len() < HEADER_BYTES + CRC_BYTES {
        return Err(ProtocolError::TruncatedFrame {
            need: HEADER_BYTES + CRC_BYTES,
            have: bytes.len(),
        });
    }
    let got_magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if got_magic != magic {
        return Err(ProtocolError::BadMagic(got_magic));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    let count = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
    let body_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let total = HEADER_BYTES + body_len + CRC_BYTES;
    if bytes.len() < total {
        return Err(ProtocolError::TruncatedFrame {
            need: total,
            have: bytes.len(),
        });
    }
    let stored = u32::from_le_bytes(bytes[total - 4..total].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[4..total - 4]);
    if stored != computed {
        return Err(ProtocolError::BadCrc { stored, computed });
    }
    if version != WIRE_VERSION {
        return Err(ProtocolError::BadVersion(version));
    }
    Ok((version, count, &bytes[HEADER_BYTES..total - 4]))
}

pub fn encode_chunk(chunk: &Chunk) -> Result<Vec<u8>, ProtocolError> {
    if chunk.descriptors.is_empty() || chunk.descriptors.len() > MAX_DESCRIPTORS {
        return Err(ProtocolError::ChunkTooLarge(chunk.descriptors.len()));
    }
    let mut body = Vec::new();
    for d in &chunk.descriptors {
        if !d.shape_ok() {
            return Err(ProtocolError::MalformedDescriptor);
        }
        body.extend_from_slice(&d.head_id.to_le_bytes());
        body.extend_from_slice(&d.batch_id.to_le_bytes());
        body.extend_from_slice(&d.kv_base_addr.to_le_bytes());
        body.extend_from_slice(&d.seq_len.to_le_bytes());
        body.extend_from_slice(&d.head_dim.to_le_bytes());
        body.extend_from_slice(&d.group_size.to_le_bytes());
        put_f16s(&mut body, &d.q);
        put_f16s(&mut body, &d.k_new);
        put_f16s(&mut body, &d.v_new);
    }
    Ok(encode_frame(
        CHUNK_MAGIC,
        chunk.version,
        chunk.descriptors.len() as u16,
        &body,
    ))
}

pub fn decode_chunk(bytes: &[u8]) -> Result<Chunk, ProtocolError> {
    let (version, count, body) = decode_frame(bytes, CHUNK_MAGIC)?;
    if count == 0 || count as usize > MAX_DESCRIPTORS {
        return Err(ProtocolError::ChunkTooLarge(count as usize));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let mut descriptors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let head_id = r.u32()?;
        let batch_id = r.u32()?;
        let kv_base_addr = r.u64()?;
        let seq_len = r.u32()?;
        let head_dim = r.u16()?;
        let group_size = r.u16()?;
        let d = head_dim as usize;
        let q = r.f16s(group_size as usize * d)?;
        let k_new = r.f16s(d)?;
        let v_new = r.f16s(d)?;
        descriptors.push(Descriptor {
            head_id,
            batch_id,
            kv_base_addr,
            seq_len,
            head_dim,
            group_size,
            q,
            k_new,
            v_new,
        });
    }
    if r.pos != body.len() {
        return Err(ProtocolError::MalformedDescriptor);
    }
    Ok(Chunk {
        version,
        descriptors,
    })
}

pub fn encode_response(chunk: &ResponseChunk) -> Result<Vec<u8>, ProtocolError> {
    if chunk.results.is_empty() || chunk.results.len() > MAX_DESCRIPTORS {
        return Err(ProtocolError::ChunkTooLarge(chunk.results.len()));
    }
    let mut body = Vec::new();
    for d in &chunk.results {
        if d.out.len() != d.group_size as usize * d.head_dim as usize {
            return Err(ProtocolError::MalformedDescriptor);
        }
        body.extend_from_slice(&d.head_id.to_le_bytes());
        body.extend_from_slice(&d.batch_id.to_le_bytes());
        body.extend_from_slice(&d.head_dim.to_le_bytes());
        body.extend_from_slice(&d.group_size.to_le_bytes());
        put_f16s(&mut body, &d.out);
    }
    Ok(encode_frame(
        RESPONSE_MAGIC,
        chunk.version,
        chunk.results.len() as u16,
        &body,
    ))
}

pub fn decode_response(bytes: &[u8]) -> Result<ResponseChunk, ProtocolError> {
    let (version, count, body) = decode_frame(bytes, RESPONSE_MAGIC)?;
    if count == 0 || count as usize > MAX_DESCRIPTORS {
        return Err(ProtocolError::ChunkTooLarge(count as usize));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let mut results = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let head_id = r.u32()?;
        let batch_id = r.u32()?;
        let head_dim = r.u16()?;
        let group_size = r.u16()?;
        let out = r.f16s(group_size as usize * head_dim as usize)?;
        results.push(ResponseDescriptor {
            head_id,
            batch_id,
            head_dim,
            group_size,
            out,
        });
    }
    if r.pos != body.len() {
        return Err(ProtocolError::MalformedDescriptor);
    }
    Ok(ResponseChunk { version, results })
}

/// Link cost model. DMA throughput collapses on small transfers: effective
/// bandwidth is 10% of peak at and below 4 KiB and ramps linearly up to
/// full rate at `small_transfer_knee`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// bytes/s at full rate
    pub bandwidth: f64,
    /// seconds per transfer call
    pub base_latency: f64,
    /// seconds per message
    pub per_message_overhead: f64,
    /// bytes at which the ramp reaches full bandwidth
    pub small_transfer_knee: u64,
}

pub const SMALL_TRANSFER_FLOOR_BYTES: u64 = 4096;
pub const SMALL_TRANSFER_FLOOR_FRACTION: f64 = 0.10;
/// Smallest knee keeping transfer_time monotone in bytes.
pub const MIN_TRANSFER_KNEE: u64 = 40_960;

impl LinkModel {
    pub fn new(bandwidth: f64, base_latency: f64) -> Self {
        LinkModel {
            bandwidth,
            base_latency,
            per_message_overhead: 2e-6,
            small_transfer_knee: 1 << 20,
        }
    }

    pub fn validate(&self) -> bool {
        self.bandwidth > 0.0
            && self.base_latency >= 0.0
            && self.per_message_overhead >= 0.0
            && self.small_transfer_knee >= MIN_TRANSFER_KNEE
    }

    fn effective_bandwidth(&self, bytes: u64) -> f64 {
        let frac = if bytes <= SMALL_TRANSFER_FLOOR_BYTES {
            SMALL_TRANSFER_FLOOR_FRACTION
        } else if bytes >= self.small_transfer_knee {
            1.0
        } else {
            let span = (self.small_transfer_knee - SMALL_TRANSFER_FLOOR_BYTES) as f64;
            SMALL_TRANSFER_FLOOR_FRACTION
                + (1.0 - SMALL_TRANSFER_FLOOR_FRACTION)
                    * (bytes - SMALL_TRANSFER_FLOOR_BYTES) as f64
                    / span
        };
        self.bandwidth * frac
    }
}

/// time = base_latency + msgs * per_message_overhead + bytes / effective_bw.
pub fn transfer_time(bytes: u64, msgs: u64, link: &LinkModel) -> f64 {
    let mut t = link.base_latency + msgs as f64 * link.per_message_overhead;
    if bytes > 0 {
        t += bytes as f64 / link.effective_bandwidth(bytes);
    }
    t
}
