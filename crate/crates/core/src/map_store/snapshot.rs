//! Versioned little-endian map snapshot (`MPPS`). Layout is documented in
//! `docs/snapshot.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use thiserror::Error;

use super::{FeatureSlot, GlobalMap, MapConfig, MapFrame, MapPoint};
use crate::geometry::{Point3, Pose};
use crate::ids::{ClientId, FrameId, KeyframeId, PointId};

pub const MAGIC: &[u8; 4] = b"MPPS";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated snapshot at offset {0}")]
    Truncated(usize),
    #[error("inconsistent snapshot: {0}")]
    Inconsistent(String),
}

pub fn save(map: &GlobalMap, out: &mut impl Write) -> Result<(), SnapshotError> {
    let mut b = Vec::new();
    let (next_frame, next_merged) = map.id_counters();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(map.config.np_max as u32).to_le_bytes());
    b.extend_from_slice(&(map.config.n_f as u32).to_le_bytes());
    b.extend_from_slice(&next_frame.to_le_bytes());
    b.extend_from_slice(&next_merged.to_le_bytes());
    b.extend_from_slice(&(map.frames.len() as u32).to_le_bytes());
    for f in map.frames.values() {
        b.extend_from_slice(&f.frame_id.0.to_le_bytes());
        b.extend_from_slice(&f.client_id.0.to_le_bytes());
        b.extend_from_slice(&f.keyframe_id.0.to_le_bytes());
        for v in f.pose.as_array() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&f.fov.to_le_bytes());
        b.extend_from_slice(&f.timestamp.to_le_bytes());
        b.extend_from_slice(&(f.point_ids.len() as u32).to_le_bytes());
        for (pid, slot) in f.point_ids.iter().zip(&f.feature_slots) {
            b.extend_from_slice(&pid.0.to_le_bytes());
            b.extend_from_slice(&slot.keypoint[0].to_le_bytes());
            b.extend_from_slice(&slot.keypoint[1].to_le_bytes());
        }
    }
    b.extend_from_slice(&(map.points.len() as u32).to_le_bytes());
    for p in map.points.values() {
        b.extend_from_slice(&p.id.0.to_le_bytes());
        for v in [p.position.x, p.position.y, p.position.z] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&p.descriptor);
        b.extend_from_slice(&p.observation_count.to_le_bytes());
    }
    out.write_all(&b)?;
    Ok(())
}

pub fn load(input: &mut impl Read) -> Result<GlobalMap, SnapshotError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut r = Cursor { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(SnapshotError::UnsupportedVersion(version));
    }
    let config = MapConfig { np_max: r.u32()? as usize, n_f: r.u32()? as usize };
    let next_frame = r.u64()?;
    let next_merged = r.u64()?;

    let frame_count = r.u32()? as usize;
    let mut frames = Vec::with_capacity(frame_count.min(1 << 20));
    let mut owners: BTreeMap<PointId, BTreeSet<FrameId>> = BTreeMap::new();
    for _ in 0..frame_count {
        let frame_id = FrameId(r.u64()?);
        let client_id = ClientId(r.u32()?);
        let keyframe_id = KeyframeId(r.u32()?);
        let mut a = [0.0; 6];
        for v in &mut a {
            *v = r.f64()?;
        }
        let pose = Pose::new(a[0], a[1], a[2], a[3], a[4], a[5]).map_err(|e| SnapshotError::Inconsistent(e.to_string()))?;
        let fov = r.f64()?;
        let timestamp = r.u64()?;
        let n = r.u32()? as usize;
        if n > config.np_max {
            return Err(SnapshotError::Inconsistent(format!("{frame_id} holds {n} points over cap")));
        }
        let mut point_ids = Vec::with_capacity(config.np_max);
        let mut feature_slots = Vec::with_capacity(config.n_f);
        for _ in 0..n {
            let pid = PointId(r.u64()?);
            let keypoint = [r.f32()?, r.f32()?];
            point_ids.push(pid);
            feature_slots.push(FeatureSlot { keypoint, descriptor: [0; 32] });
            owners.entry(pid).or_default().insert(frame_id);
        }
        frames.push(MapFrame { frame_id, client_id, keyframe_id, pose, fov, feature_slots, point_ids, timestamp });
    }

    let point_count = r.u32()? as usize;
    let mut points = Vec::with_capacity(point_count.min(1 << 24));
    let mut descriptors = BTreeMap::new();
    for _ in 0..point_count {
        let id = PointId(r.u64()?);
        let position = Point3::new(r.f64()?, r.f64()?, r.f64()?);
        let mut descriptor = [0u8; 32];
        descriptor.copy_from_slice(r.take(32)?);
        let observation_count = r.u32()?;
        let owner_frames = owners.remove(&id).unwrap_or_default();
        if owner_frames.len() != observation_count as usize {
            return Err(SnapshotError::Inconsistent(format!(
                "{id} stores count {observation_count} but {} frames list it",
                owner_frames.len()
            )));
        }
        descriptors.insert(id, descriptor);
        points.push(MapPoint { id, position, descriptor, observation_count, owner_frames });
    }
    if let Some(missing) = owners.keys().next() {
        return Err(SnapshotError::Inconsistent(format!("frame references missing {missing}")));
    }
    if r.pos != buf.len() {
        return Err(SnapshotError::Inconsistent(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    for f in &mut frames {
        for (slot, pid) in f.feature_slots.iter_mut().zip(&f.point_ids) {
            slot.descriptor = descriptors[pid];
        }
    }
    Ok(GlobalMap::restore(config, next_frame, next_merged, frames, points))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnapshotError> {
        if self.buf.len() - self.pos < n {
            return Err(SnapshotError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], SnapshotError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, SnapshotError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, SnapshotError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, SnapshotError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32, SnapshotError> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64, SnapshotError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}
