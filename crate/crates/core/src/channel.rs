//! Wire formats for query packets and requests, byte accounting, and the
//! per-query dropout channel.
//!
//! Query packet (all integers and floats little-endian):
//!
//! ```text
//! offset size  field
//! 0      4     magic "QSTR"
//! 4      2     version (u16) = 1
//! 6      4     agent_id (u32)
//! 10     8     frame_id (u64)
//! 18     48    sender pose: 9 rotation entries row-major, then 3 translation (f32)
//! 66     2     query_count N (u16)
//! 68     2     feature_dim D (u16)
//! 70     N×R   records, R = 18 + 4·D:
//!                class_id u16, confidence f32, ref_point 3×f32, feature D×f32
//! 70+N·R 4     crc32 (reflected, poly 0xEDB88320) over all preceding bytes
//! ```
//!
//! Request packet:
//!
//! ```text
//! "QREQ" | version u16 | requester_id u32 | frame_id u64 | min_confidence f32
//!        | mask_present u8 | [x_min y_min x_max y_max z_min z_max as f32] | crc32
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PerceptionRange, Pose};
use crate::nn::Rng;
use crate::query::{ObjectQuery, QueryBatch, Requirement};

pub const PACKET_MAGIC: [u8; 4] = *b"QSTR";
pub const REQUEST_MAGIC: [u8; 4] = *b"QREQ";
pub const VERSION: u16 = 1;

pub const HEADER_BYTES: usize = 70;
pub const TRAILER_BYTES: usize = 4;
pub const RECORD_FIXED_BYTES: usize = 18;
/// Floats carried per box record by the result-cooperation baseline:
/// center (3), dims (3), yaw.
pub const BOX_RECORD_FLOATS: usize = 7;

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Exact encoded size of a packet holding `n` queries of dimension
/// `feature_dim`.
pub fn packet_bytes(n: usize, feature_dim: usize) -> usize {
    HEADER_BYTES + TRAILER_BYTES + n * (RECORD_FIXED_BYTES + 4 * feature_dim)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err(Error::TruncatedPacket { needed: end, available: self.bytes.len() });
        }
        let out = self.bytes[self.pos..end].try_into().unwrap();
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take()?) as f64)
    }
}

fn check_magic_version(bytes: &[u8], magic: [u8; 4]) -> Result<()> {
    if bytes.len() < 6 {
        return Err(Error::TruncatedPacket { needed: 6, available: bytes.len() });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    Ok(())
}

fn check_crc(bytes: &[u8]) -> Result<()> {
    let body = &bytes[..bytes.len() - TRAILER_BYTES];
    let stored = u32::from_le_bytes(bytes[bytes.len() - TRAILER_BYTES..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    Ok(())
}

pub fn encode_packet(batch: &QueryBatch) -> Result<Vec<u8>> {
    let n = batch.queries.len();
    if n > u16::MAX as usize {
        return Err(Error::TooManyQueries(n));
    }
    let dim = batch.feature_dim().unwrap_or(0);
    if let Some(q) = batch.queries.iter().find(|q| q.feature.len() != dim) {
        return Err(Error::MixedFeatureDims { first: dim, other: q.feature.len() });
    }
    if dim > u16::MAX as usize {
        return Err(Error::Invalid(format!("feature dimension {dim} exceeds u16")));
    }
    let mut w = Writer(Vec::with_capacity(packet_bytes(n, dim)));
    w.0.extend_from_slice(&PACKET_MAGIC);
    w.u16(VERSION);
    w.u32(batch.agent_id);
    w.u64(batch.frame_id);
    for v in batch.pose.rotation_row_major() {
        w.f32(v);
    }
    for v in batch.pose.translation {
        w.f32(v);
    }
    w.u16(n as u16);
    w.u16(dim as u16);
    for q in &batch.queries {
        w.u16(q.class_id);
        w.f32(q.confidence);
        for v in q.ref_point {
            w.f32(v);
        }
        for v in &q.feature {
            w.f32(*v);
        }
    }
    Ok(w.finish())
}

/// Decoded packet header, available even when the body is not wanted.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketHeader {
    pub agent_id: u32,
    pub frame_id: u64,
    pub pose: Pose,
    pub query_count: u16,
    pub feature_dim: u16,
}

fn read_header(r: &mut Reader<'_>) -> Result<PacketHeader> {
    r.take::<6>()?;
    let agent_id = r.u32()?;
    let frame_id = r.u64()?;
    let mut rot = [[0.0; 3]; 3];
    for row in rot.iter_mut() {
        for v in row.iter_mut() {
            *v = r.f32()?;
        }
    }
    let mut translation = [0.0; 3];
    for v in translation.iter_mut() {
        *v = r.f32()?;
    }
    let query_count = r.u16()?;
    let feature_dim = r.u16()?;
    // f32 quantization leaves the rotation orthonormal only to ~1e-7, so the
    // pose is taken as transmitted rather than re-validated.
    Ok(PacketHeader { agent_id, frame_id, pose: Pose { rotation: rot, translation }, query_count, feature_dim })
}

/// Validates framing (magic, version, length, crc) and returns the header.
pub fn decode_header(bytes: &[u8]) -> Result<PacketHeader> {
    check_magic_version(bytes, PACKET_MAGIC)?;
    if bytes.len() < HEADER_BYTES + TRAILER_BYTES {
        return Err(Error::TruncatedPacket { needed: HEADER_BYTES + TRAILER_BYTES, available: bytes.len() });
    }
    let header = read_header(&mut Reader { bytes, pos: 0 })?;
    let expected = packet_bytes(header.query_count as usize, header.feature_dim as usize);
    if bytes.len() < expected {
        return Err(Error::TruncatedPacket { needed: expected, available: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::LengthMismatch { left: expected, right: bytes.len() });
    }
    check_crc(bytes)?;
    Ok(header)
}

pub fn decode_packet(bytes: &[u8]) -> Result<QueryBatch> {
    let header = decode_header(bytes)?;
    let mut r = Reader { bytes, pos: HEADER_BYTES };
    let dim = header.feature_dim as usize;
    let mut queries = Vec::with_capacity(header.query_count as usize);
    for idx in 0..header.query_count {
        let class_id = r.u16()?;
        let confidence = r.f32()?;
        let ref_point = [r.f32()?, r.f32()?, r.f32()?];
        let feature = (0..dim).map(|_| r.f32()).collect::<Result<Vec<f64>>>()?;
        queries.push(ObjectQuery { feature, ref_point, confidence, class_id, query_id: idx as u32 });
    }
    Ok(QueryBatch { agent_id: header.agent_id, frame_id: header.frame_id, pose: header.pose, queries })
}

/// Query ids are not on the wire; the receiver numbers records in arrival
/// order. This restores the sender's ids when the caller still has them.
pub fn restore_ids(decoded: &mut QueryBatch, sent: &QueryBatch) {
    for (d, s) in decoded.queries.iter_mut().zip(&sent.queries) {
        d.query_id = s.query_id;
    }
}

pub fn encode_request(req: &Requirement, requester_id: u32, frame_id: u64) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(51));
    w.0.extend_from_slice(&REQUEST_MAGIC);
    w.u16(VERSION);
    w.u32(requester_id);
    w.u64(frame_id);
    w.f32(req.min_confidence);
    match &req.region_mask {
        None => w.u8(0),
        Some(m) => {
            w.u8(1);
            for v in [m.x_min, m.y_min, m.x_max, m.y_max, m.z_min, m.z_max] {
                w.f32(v);
            }
        }
    }
    w.finish()
}

/// Alias matching the operation name used in the docs.
pub fn build_request(req: &Requirement, requester_id: u32, frame_id: u64) -> Vec<u8> {
    encode_request(req, requester_id, frame_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedRequest {
    pub requirement: Requirement,
    pub requester_id: u32,
    pub frame_id: u64,
}

pub fn decode_request(bytes: &[u8]) -> Result<DecodedRequest> {
    check_magic_version(bytes, REQUEST_MAGIC)?;
    let mut r = Reader { bytes, pos: 6 };
    let requester_id = r.u32()?;
    let frame_id = r.u64()?;
    let min_confidence = r.f32()?;
    let mask_present = r.u8()?;
    let region_mask = match mask_present {
        0 => None,
        1 => Some(PerceptionRange {
            x_min: r.f32()?,
            y_min: r.f32()?,
            x_max: r.f32()?,
            y_max: r.f32()?,
            z_min: r.f32()?,
            z_max: r.f32()?,
        }),
        other => return Err(Error::Parse(format!("mask flag {other}"))),
    };
    let expected = r.pos + TRAILER_BYTES;
    if bytes.len() < expected {
        return Err(Error::TruncatedPacket { needed: expected, available: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::LengthMismatch { left: expected, right: bytes.len() });
    }
    check_crc(bytes)?;
    Ok(DecodedRequest { requirement: Requirement { min_confidence, region_mask }, requester_id, frame_id })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub dropout_ratio: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { dropout_ratio: 0.0, seed: 0 }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.dropout_ratio) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("dropout ratio {} outside [0, 1]", self.dropout_ratio)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransmissionReport {
    /// Size of the packet carrying the delivered queries.
    pub bytes_sent: usize,
    /// Queries delivered.
    pub queries_sent: usize,
    pub queries_dropped: usize,
}

/// Drops each query independently with probability `dropout_ratio`, one
/// uniform draw per query in order.
pub fn apply_dropout(batch: &QueryBatch, cfg: &ChannelConfig) -> (QueryBatch, TransmissionReport) {
    let mut rng = Rng::new(cfg.seed);
    let mut kept = Vec::with_capacity(batch.queries.len());
    let mut dropped = 0;
    for q in &batch.queries {
        if rng.next_f64() < cfg.dropout_ratio {
            dropped += 1;
        } else {
            kept.push(q.clone());
        }
    }
    let dim = batch.feature_dim().unwrap_or(0);
    let report = TransmissionReport { bytes_sent: packet_bytes(kept.len(), dim), queries_sent: kept.len(), queries_dropped: dropped };
    (QueryBatch { agent_id: batch.agent_id, frame_id: batch.frame_id, pose: batch.pose, queries: kept }, report)
}
