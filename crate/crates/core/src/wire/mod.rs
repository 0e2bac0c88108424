//! Framed binary messages exchanged between devices and the map server.
//!
//! Every frame is `magic u16 (0x4D51) | version u8 | type u8 | payload_len u32`
//! followed by the payload, all little-endian. The byte layout of each payload
//! is documented in `docs/protocol.md`.

mod meter;

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

pub use meter::{ratio_to_full_keyframe, Category, Direction, TrafficStats, FULL_KEYFRAME_BYTES};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::ids::{ClientId, FrameId, KeyframeId, PointId};

pub const MAGIC: u16 = 0x4D51;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
/// Exact size of an encoded overlap query or shared-map request frame.
pub const QUERY_FRAME_LEN: usize = 64;
const QUERY_PAYLOAD_LEN: usize = QUERY_FRAME_LEN - HEADER_LEN;
const QUERY_USED_LEN: usize = 4 + 4 + 2 + 3 * 8 + 3 * 4;
/// Upper bound accepted for a single payload.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageType {
    OverlapQuery = 0x01,
    OverlapResponse = 0x02,
    KeyframeUpload = 0x03,
    UploadAck = 0x04,
    SharedMapRequest = 0x05,
    SharedMapResponse = 0x06,
    UpdateCheck = 0x07,
    UpdateStatus = 0x08,
    Register = 0x09,
    RegisterAck = 0x0A,
    End = 0x0B,
    EndAck = 0x0C,
    Error = 0x0F,
}

impl MessageType {
    pub const ALL: [MessageType; 13] = [
        Self::OverlapQuery,
        Self::OverlapResponse,
        Self::KeyframeUpload,
        Self::UploadAck,
        Self::SharedMapRequest,
        Self::SharedMapResponse,
        Self::UpdateCheck,
        Self::UpdateStatus,
        Self::Register,
        Self::RegisterAck,
        Self::End,
        Self::EndAck,
        Self::Error,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == b)
    }

    pub fn category(self) -> Category {
        match self {
            Self::OverlapQuery => Category::Query,
            Self::OverlapResponse => Category::Response,
            Self::KeyframeUpload => Category::KeyframeUpload,
            Self::SharedMapRequest | Self::SharedMapResponse => Category::SharedMap,
            Self::UpdateCheck | Self::UpdateStatus => Category::UpdateCheck,
            Self::UploadAck | Self::Register | Self::RegisterAck | Self::End | Self::EndAck | Self::Error => {
                Category::Control
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeErrorKind {
    Truncated,
    BadMagic(u16),
    BadVersion(u8),
    UnknownType(u8),
    PayloadTooLarge(usize),
    TrailingBytes,
    InvalidValue(&'static str),
}

/// Decode failure together with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at offset {}", self.kind, self.offset)
    }
}

/// 64-byte metadata query. Angles travel as f32, so the constructor rounds
/// them once; encoding is then lossless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapQueryMsg {
    client_id: ClientId,
    keyframe_id: KeyframeId,
    np: u16,
    pose: Pose,
}

impl OverlapQueryMsg {
    pub fn new(client_id: ClientId, keyframe_id: KeyframeId, np: u16, pose: &Pose) -> Self {
        let [x, y, z, roll, pitch, yaw] = pose.as_array();
        let pose = Pose::new(x, y, z, quantize_angle(roll) as f64, quantize_angle(pitch) as f64, quantize_angle(yaw) as f64)
            .expect("finite pose stays finite");
        Self { client_id, keyframe_id, np, pose }
    }
    pub fn client_id(&self) -> ClientId {
        self.client_id
    }
    pub fn keyframe_id(&self) -> KeyframeId {
        self.keyframe_id
    }
    pub fn np(&self) -> u16 {
        self.np
    }
    pub fn pose(&self) -> &Pose {
        &self.pose
    }
}

// Nearest f32 that still lies inside (-pi, pi] once widened back to f64.
fn quantize_angle(a: f64) -> f32 {
    let mut q = a as f32;
    if q as f64 > PI || q as f64 <= -PI {
        // One ulp towards zero (sign-magnitude layout).
        q = f32::from_bits(q.to_bits() - 1);
    }
    q
}

/// Status bit of an overlap response: which class the sample list holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SampleClass {
    Redundant = 0,
    Fresh = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapResponseMsg {
    pub status: SampleClass,
    pub r: f32,
    pub samples: Vec<[f32; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WirePoint {
    pub id: PointId,
    pub position: [f32; 3],
    pub descriptor: [u8; 32],
    pub observation_count: u16,
}

const WIRE_POINT_LEN: usize = 8 + 12 + 32 + 2;

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeUploadMsg {
    pub client_id: ClientId,
    pub keyframe_id: KeyframeId,
    pub pose: Pose,
    pub fov: f64,
    pub points: Vec<WirePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum UploadOutcome {
    Stored = 0,
    /// Held until the client's coordinate frame is aligned.
    Buffered = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UploadAckMsg {
    pub keyframe_id: KeyframeId,
    pub outcome: UploadOutcome,
    pub points_stored: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireFrame {
    pub frame_id: FrameId,
    pub client_id: ClientId,
    pub keyframe_id: KeyframeId,
    pub pose: Pose,
    pub fov: f64,
    pub point_ids: Vec<PointId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedMapResponseMsg {
    pub origin_client: ClientId,
    pub origin_keyframe: KeyframeId,
    pub origin_pose: Pose,
    pub h: f64,
    pub fov: f64,
    pub frames: Vec<WireFrame>,
    pub points: Vec<WirePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateCheckMsg {
    pub client_id: ClientId,
    pub keyframes: Vec<KeyframeUploadMsg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum UpdateVerdict {
    Expansion = 0,
    Updating = 1,
}

/// Counters explaining an update verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateSummary {
    pub candidates: u32,
    pub unobserved: u32,
    pub stale: u32,
    pub largest_cluster: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStatusMsg {
    pub verdict: UpdateVerdict,
    pub stale_point_ids: Vec<PointId>,
    pub summary: UpdateSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OptimizationSummary {
    pub client_id: ClientId,
    pub frame_count: u32,
    pub point_count: u32,
    pub frames_adjusted: u32,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    Malformed = 1,
    Protocol = 2,
    NotRegistered = 3,
    Rejected = 4,
    Internal = 5,
}

impl ErrorCode {
    fn from_u8(b: u8) -> Option<Self> {
        [Self::Malformed, Self::Protocol, Self::NotRegistered, Self::Rejected, Self::Internal].into_iter().find(|c| *c as u8 == b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    OverlapQuery(OverlapQueryMsg),
    OverlapResponse(OverlapResponseMsg),
    KeyframeUpload(KeyframeUploadMsg),
    UploadAck(UploadAckMsg),
    SharedMapRequest(OverlapQueryMsg),
    SharedMapResponse(SharedMapResponseMsg),
    UpdateCheck(UpdateCheckMsg),
    UpdateStatus(UpdateStatusMsg),
    Register { client_id: ClientId, intrinsics: CameraIntrinsics },
    RegisterAck { client_id: ClientId, aligned: bool },
    End { client_id: ClientId },
    EndAck(OptimizationSummary),
    Error { code: ErrorCode, message: String },
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Self::OverlapQuery(_) => MessageType::OverlapQuery,
            Self::OverlapResponse(_) => MessageType::OverlapResponse,
            Self::KeyframeUpload(_) => MessageType::KeyframeUpload,
            Self::UploadAck(_) => MessageType::UploadAck,
            Self::SharedMapRequest(_) => MessageType::SharedMapRequest,
            Self::SharedMapResponse(_) => MessageType::SharedMapResponse,
            Self::UpdateCheck(_) => MessageType::UpdateCheck,
            Self::UpdateStatus(_) => MessageType::UpdateStatus,
            Self::Register { .. } => MessageType::Register,
            Self::RegisterAck { .. } => MessageType::RegisterAck,
            Self::End { .. } => MessageType::End,
            Self::EndAck(_) => MessageType::EndAck,
            Self::Error { .. } => MessageType::Error,
        }
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(64));
    w.u16(MAGIC);
    w.u8(VERSION);
    w.u8(msg.message_type() as u8);
    w.u32(0);
    match msg {
        Message::OverlapQuery(q) | Message::SharedMapRequest(q) => {
            w.u32(q.client_id.0);
            w.u32(q.keyframe_id.0);
            w.u16(q.np);
            let [x, y, z, roll, pitch, yaw] = q.pose.as_array();
            w.f64(x);
            w.f64(y);
            w.f64(z);
            w.f32(roll as f32);
            w.f32(pitch as f32);
            w.f32(yaw as f32);
            w.0.resize(QUERY_FRAME_LEN, 0);
        }
        Message::OverlapResponse(r) => {
            w.u8(r.status as u8);
            w.f32(r.r);
            w.u32(r.samples.len() as u32);
            for s in &r.samples {
                w.f32s(s);
            }
        }
        Message::KeyframeUpload(k) => w.keyframe(k),
        Message::UploadAck(a) => {
            w.u32(a.keyframe_id.0);
            w.u8(a.outcome as u8);
            w.u32(a.points_stored);
        }
        Message::SharedMapResponse(s) => {
            w.u32(s.origin_client.0);
            w.u32(s.origin_keyframe.0);
            w.pose(&s.origin_pose);
            w.f64(s.h);
            w.f64(s.fov);
            w.u32(s.frames.len() as u32);
            for f in &s.frames {
                w.u64(f.frame_id.0);
                w.u32(f.client_id.0);
                w.u32(f.keyframe_id.0);
                w.pose(&f.pose);
                w.f64(f.fov);
                w.u32(f.point_ids.len() as u32);
                for p in &f.point_ids {
                    w.u64(p.0);
                }
            }
            w.points(&s.points);
        }
        Message::UpdateCheck(u) => {
            w.u32(u.client_id.0);
            w.u16(u.keyframes.len() as u16);
            for k in &u.keyframes {
                w.keyframe(k);
            }
        }
        Message::UpdateStatus(s) => {
            w.u8(s.verdict as u8);
            w.u32(s.summary.candidates);
            w.u32(s.summary.unobserved);
            w.u32(s.summary.stale);
            w.u32(s.summary.largest_cluster);
            w.u32(s.stale_point_ids.len() as u32);
            for p in &s.stale_point_ids {
                w.u64(p.0);
            }
        }
        Message::Register { client_id, intrinsics } => {
            w.u32(client_id.0);
            for v in [intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy] {
                w.f64(v);
            }
        }
        Message::RegisterAck { client_id, aligned } => {
            w.u32(client_id.0);
            w.u8(u8::from(*aligned));
        }
        Message::End { client_id } => w.u32(client_id.0),
        Message::EndAck(o) => {
            w.u32(o.client_id.0);
            w.u32(o.frame_count);
            w.u32(o.point_count);
            w.u32(o.frames_adjusted);
            w.u64(o.elapsed_us);
        }
        Message::Error { code, message } => {
            w.u8(*code as u8);
            // Cut on a char boundary so the message stays valid UTF-8.
            let mut n = message.len().min(u16::MAX as usize);
            while !message.is_char_boundary(n) {
                n -= 1;
            }
            w.u16(n as u16);
            w.0.extend_from_slice(&message.as_bytes()[..n]);
        }
    }
    let len = (w.0.len() - HEADER_LEN) as u32;
    w.0[4..8].copy_from_slice(&len.to_le_bytes());
    w.0
}

/// Parse the fixed header, returning the message type and payload length.
pub fn decode_header(buf: &[u8]) -> Result<(MessageType, usize), DecodeError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.u16()?;
    if magic != MAGIC {
        return Err(DecodeError { offset: 0, kind: DecodeErrorKind::BadMagic(magic) });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(DecodeError { offset: 2, kind: DecodeErrorKind::BadVersion(version) });
    }
    let tag = r.u8()?;
    let len = r.u32()? as usize;
    if len > MAX_PAYLOAD {
        return Err(DecodeError { offset: 4, kind: DecodeErrorKind::PayloadTooLarge(len) });
    }
    let ty = MessageType::from_u8(tag).ok_or(DecodeError { offset: 3, kind: DecodeErrorKind::UnknownType(tag) })?;
    Ok((ty, len))
}

pub fn decode(buf: &[u8]) -> Result<Message, DecodeError> {
    let (ty, len) = decode_header(buf)?;
    if buf.len() < HEADER_LEN + len {
        return Err(DecodeError { offset: buf.len(), kind: DecodeErrorKind::Truncated });
    }
    if buf.len() > HEADER_LEN + len {
        return Err(DecodeError { offset: HEADER_LEN + len, kind: DecodeErrorKind::TrailingBytes });
    }
    let mut r = Reader { buf, pos: HEADER_LEN };
    let msg = match ty {
        MessageType::OverlapQuery | MessageType::SharedMapRequest => {
            if len != QUERY_PAYLOAD_LEN {
                return Err(DecodeError { offset: 4, kind: DecodeErrorKind::InvalidValue("query payload length") });
            }
            let client_id = ClientId(r.u32()?);
            let keyframe_id = KeyframeId(r.u32()?);
            let np = r.u16()?;
            let start = r.pos;
            let (x, y, z) = (r.f64()?, r.f64()?, r.f64()?);
            let (roll, pitch, yaw) = (r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
            let pose = Pose::new(x, y, z, roll, pitch, yaw).map_err(|_| r.invalid_at(start, "pose"))?;
            debug_assert_eq!(r.pos, HEADER_LEN + QUERY_USED_LEN);
            if let Some(i) = buf[r.pos..].iter().position(|b| *b != 0) {
                return Err(r.invalid_at(r.pos + i, "nonzero padding"));
            }
            r.pos = buf.len();
            let q = OverlapQueryMsg { client_id, keyframe_id, np, pose };
            if ty == MessageType::OverlapQuery {
                Message::OverlapQuery(q)
            } else {
                Message::SharedMapRequest(q)
            }
        }
        MessageType::OverlapResponse => {
            let at = r.pos;
            let status = match r.u8()? {
                0 => SampleClass::Redundant,
                1 => SampleClass::Fresh,
                _ => return Err(r.invalid_at(at, "status bit")),
            };
            let at = r.pos;
            let radius = r.f32()?;
            if !(radius.is_finite() && radius >= 0.0) {
                return Err(r.invalid_at(at, "spacing"));
            }
            let n = r.count(12)?;
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                samples.push(r.f32s()?);
            }
            Message::OverlapResponse(OverlapResponseMsg { status, r: radius, samples })
        }
        MessageType::KeyframeUpload => Message::KeyframeUpload(r.keyframe()?),
        MessageType::UploadAck => {
            let keyframe_id = KeyframeId(r.u32()?);
            let at = r.pos;
            let outcome = match r.u8()? {
                0 => UploadOutcome::Stored,
                1 => UploadOutcome::Buffered,
                _ => return Err(r.invalid_at(at, "upload outcome")),
            };
            Message::UploadAck(UploadAckMsg { keyframe_id, outcome, points_stored: r.u32()? })
        }
        MessageType::SharedMapResponse => {
            let origin_client = ClientId(r.u32()?);
            let origin_keyframe = KeyframeId(r.u32()?);
            let origin_pose = r.pose()?;
            let h = r.finite_f64("cone height")?;
            let fov = r.finite_f64("cone fov")?;
            let n = r.count(8 + 4 + 4 + 48 + 8 + 4)?;
            let mut frames = Vec::with_capacity(n);
            for _ in 0..n {
                let frame_id = FrameId(r.u64()?);
                let client_id = ClientId(r.u32()?);
                let keyframe_id = KeyframeId(r.u32()?);
                let pose = r.pose()?;
                let fov = r.finite_f64("frame fov")?;
                let m = r.count(8)?;
                let mut point_ids = Vec::with_capacity(m);
                for _ in 0..m {
                    point_ids.push(PointId(r.u64()?));
                }
                frames.push(WireFrame { frame_id, client_id, keyframe_id, pose, fov, point_ids });
            }
            let points = r.points()?;
            Message::SharedMapResponse(SharedMapResponseMsg { origin_client, origin_keyframe, origin_pose, h, fov, frames, points })
        }
        MessageType::UpdateCheck => {
            let client_id = ClientId(r.u32()?);
            let n = r.u16()? as usize;
            let mut keyframes = Vec::with_capacity(n.min(64));
            for _ in 0..n {
                keyframes.push(r.keyframe()?);
            }
            Message::UpdateCheck(UpdateCheckMsg { client_id, keyframes })
        }
        MessageType::UpdateStatus => {
            let at = r.pos;
            let verdict = match r.u8()? {
                0 => UpdateVerdict::Expansion,
                1 => UpdateVerdict::Updating,
                _ => return Err(r.invalid_at(at, "verdict")),
            };
            let summary = UpdateSummary { candidates: r.u32()?, unobserved: r.u32()?, stale: r.u32()?, largest_cluster: r.u32()? };
            let n = r.count(8)?;
            let mut stale_point_ids = Vec::with_capacity(n);
            for _ in 0..n {
                stale_point_ids.push(PointId(r.u64()?));
            }
            Message::UpdateStatus(UpdateStatusMsg { verdict, stale_point_ids, summary })
        }
        MessageType::Register => {
            let client_id = ClientId(r.u32()?);
            let at = r.pos;
            let intrinsics = CameraIntrinsics { fx: r.f64()?, fy: r.f64()?, cx: r.f64()?, cy: r.f64()? };
            intrinsics.validate().map_err(|_| r.invalid_at(at, "intrinsics"))?;
            Message::Register { client_id, intrinsics }
        }
        MessageType::RegisterAck => {
            let client_id = ClientId(r.u32()?);
            let at = r.pos;
            let aligned = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(r.invalid_at(at, "aligned flag")),
            };
            Message::RegisterAck { client_id, aligned }
        }
        MessageType::End => Message::End { client_id: ClientId(r.u32()?) },
        MessageType::EndAck => Message::EndAck(OptimizationSummary {
            client_id: ClientId(r.u32()?),
            frame_count: r.u32()?,
            point_count: r.u32()?,
            frames_adjusted: r.u32()?,
            elapsed_us: r.u64()?,
        }),
        MessageType::Error => {
            let at = r.pos;
            let code = ErrorCode::from_u8(r.u8()?).ok_or(r.invalid_at(at, "error code"))?;
            let n = r.u16()? as usize;
            let at = r.pos;
            let message = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.invalid_at(at, "utf-8"))?;
            Message::Error { code, message }
        }
    };
    if r.pos != buf.len() {
        return Err(DecodeError { offset: r.pos, kind: DecodeErrorKind::TrailingBytes });
    }
    Ok(msg)
}

/// Read one complete frame (header plus payload) from a byte stream.
pub fn read_frame(input: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut frame = vec![0u8; HEADER_LEN];
    input.read_exact(&mut frame)?;
    let len = u32::from_le_bytes(frame[4..8].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("payload of {len} bytes exceeds limit")));
    }
    frame.resize(HEADER_LEN + len, 0);
    input.read_exact(&mut frame[HEADER_LEN..])?;
    Ok(frame)
}

pub fn write_frame(out: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    out.write_all(frame)?;
    out.flush()
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
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32; 3]) {
        for c in v {
            self.f32(*c);
        }
    }
    fn pose(&mut self, p: &Pose) {
        for v in p.as_array() {
            self.f64(v);
        }
    }
    fn points(&mut self, pts: &[WirePoint]) {
        self.u32(pts.len() as u32);
        for p in pts {
            self.u64(p.id.0);
            self.f32s(&p.position);
            self.0.extend_from_slice(&p.descriptor);
            self.u16(p.observation_count);
        }
    }
    fn keyframe(&mut self, k: &KeyframeUploadMsg) {
        self.u32(k.client_id.0);
        self.u32(k.keyframe_id.0);
        self.pose(&k.pose);
        self.f64(k.fov);
        self.points(&k.points);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError { offset: self.buf.len(), kind: DecodeErrorKind::Truncated });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn invalid_at(&self, offset: usize, what: &'static str) -> DecodeError {
        DecodeError { offset, kind: DecodeErrorKind::InvalidValue(what) }
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32, DecodeError> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn finite_f64(&mut self, what: &'static str) -> Result<f64, DecodeError> {
        let at = self.pos;
        let v = self.f64()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.invalid_at(at, what))
        }
    }
    fn f32s(&mut self) -> Result<[f32; 3], DecodeError> {
        let at = self.pos;
        let v = [self.f32()?, self.f32()?, self.f32()?];
        if v.iter().all(|c| c.is_finite()) {
            Ok(v)
        } else {
            Err(self.invalid_at(at, "non-finite coordinate"))
        }
    }
    /// Element count, rejected early when it cannot fit in the remaining bytes.
    fn count(&mut self, min_elem: usize) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem) > self.buf.len() - self.pos {
            return Err(DecodeError { offset: self.buf.len(), kind: DecodeErrorKind::Truncated });
        }
        Ok(n)
    }
    fn pose(&mut self) -> Result<Pose, DecodeError> {
        let at = self.pos;
        let mut a = [0.0; 6];
        for v in &mut a {
            *v = self.f64()?;
        }
        Pose::new(a[0], a[1], a[2], a[3], a[4], a[5]).map_err(|_| self.invalid_at(at, "pose"))
    }
    fn points(&mut self) -> Result<Vec<WirePoint>, DecodeError> {
        let n = self.count(WIRE_POINT_LEN)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let id = PointId(self.u64()?);
            let position = self.f32s()?;
            let descriptor = self.array()?;
            out.push(WirePoint { id, position, descriptor, observation_count: self.u16()? });
        }
        Ok(out)
    }
    fn keyframe(&mut self) -> Result<KeyframeUploadMsg, DecodeError> {
        let client_id = ClientId(self.u32()?);
        let keyframe_id = KeyframeId(self.u32()?);
        let pose = self.pose()?;
        let fov = self.finite_f64("fov")?;
        let points = self.points()?;
        Ok(KeyframeUploadMsg { client_id, keyframe_id, pose, fov, points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query() -> OverlapQueryMsg {
        OverlapQueryMsg::new(ClientId(1), KeyframeId(1), 300, &Pose::identity())
    }

    #[test]
    fn golden_query_frame() {
        let bytes = encode(&Message::OverlapQuery(query()));
        let mut expect = vec![0x51, 0x4D, 0x01, 0x01, 56, 0, 0, 0];
        expect.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 0x2C, 0x01]);
        expect.resize(64, 0);
        assert_eq!(bytes, expect);
        assert_eq!(decode(&bytes).unwrap(), Message::OverlapQuery(query()));
    }

    #[test]
    fn truncated_query_reports_offset() {
        let bytes = encode(&Message::OverlapQuery(query()));
        let err = decode(&bytes[..63]).unwrap_err();
        assert_eq!(err, DecodeError { offset: 63, kind: DecodeErrorKind::Truncated });
    }

    #[test]
    fn header_guards() {
        let mut bytes = encode(&Message::End { client_id: ClientId(4) });
        bytes[0] = 0;
        assert_eq!(decode(&bytes).unwrap_err().offset, 0);
        let mut bytes = encode(&Message::End { client_id: ClientId(4) });
        bytes[2] = 7;
        assert_eq!(decode(&bytes).unwrap_err().kind, DecodeErrorKind::BadVersion(7));
        bytes[2] = VERSION;
        bytes[3] = 0xEE;
        assert_eq!(decode(&bytes).unwrap_err().kind, DecodeErrorKind::UnknownType(0xEE));
        assert_eq!(decode(&[0x51]).unwrap_err(), DecodeError { offset: 1, kind: DecodeErrorKind::Truncated });
    }

    #[test]
    fn angles_near_pi_stay_normalized() {
        let pose = Pose::new(0.0, 0.0, 0.0, PI, -PI + 1e-12, PI - 1e-12).unwrap();
        let q = OverlapQueryMsg::new(ClientId(0), KeyframeId(0), 0, &pose);
        for a in [q.pose().roll(), q.pose().pitch(), q.pose().yaw()] {
            assert!(a > -PI && a <= PI);
        }
        assert_eq!(decode(&encode(&Message::OverlapQuery(q))).unwrap(), Message::OverlapQuery(q));
    }

    #[test]
    fn error_message_truncates_on_char_boundary() {
        let long = "é".repeat(40_000);
        let bytes = encode(&Message::Error { code: ErrorCode::Protocol, message: long });
        match decode(&bytes).unwrap() {
            Message::Error { message, .. } => assert!(message.len() <= u16::MAX as usize && message.chars().all(|c| c == 'é')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stream_framing() {
        let a = encode(&Message::OverlapQuery(query()));
        let b = encode(&Message::End { client_id: ClientId(2) });
        let joined = [a.clone(), b.clone()].concat();
        let mut r = joined.as_slice();
        assert_eq!(read_frame(&mut r).unwrap(), a);
        assert_eq!(read_frame(&mut r).unwrap(), b);
    }
}
