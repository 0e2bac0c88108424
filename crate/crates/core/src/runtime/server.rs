//! Map server: one session per connection, all sharing one global map.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::expansion::{
    build_response, estimate_alignment, integrate_upload, on_session_end, wire_point, GlobalOptimizer, Keyframe, NoopOptimizer,
    OptimizationReport, RigidTransform,
};
use crate::geometry::{compute_fov, sample_spacing, CameraIntrinsics, Pose, ViewCone};
use crate::ids::{ClientId, KeyframeId, PointId};
use crate::map_store::{GlobalMap, MapConfig};
use crate::overlap::{assess_overlap_with, query_seed, OverlapParams, OverlapVerdict, DEFAULT_K};
use crate::sharing::{build_shared_map, get_update_status, SharedMapSlice, SharingParams, UpdateParams};
use crate::wire::{
    decode, encode, DecodeErrorKind, Direction, ErrorCode, KeyframeUploadMsg, Message, MessageType, OptimizationSummary, OverlapQueryMsg,
    OverlapResponseMsg, SampleClass, TrafficStats, UpdateStatusMsg, UpdateSummary, UpdateVerdict, UploadAckMsg, UploadOutcome,
};

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    pub overlap: OverlapParams,
    pub sharing: SharingParams,
    pub update: UpdateParams,
    /// Oversharing factor applied to shared-map requests.
    pub alpha: f64,
    pub map: MapConfig,
    /// Shared landmarks needed before a new user's frame is aligned.
    pub min_alignment_pairs: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            overlap: OverlapParams::default(),
            sharing: SharingParams::default(),
            update: UpdateParams::default(),
            alpha: 1.3,
            map: MapConfig::default(),
            min_alignment_pairs: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SessionState {
    Registered,
    Mapping,
    Sharing,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ServerEvent {
    Registered { client: u32, anchored: bool },
    Aligned { client: u32, pairs: usize, rms: f64, merged: usize },
    UpdateChecked { client: u32, updating: bool, stale: usize },
    SessionEnded { client: u32, frames: usize, points: usize, frames_adjusted: usize },
    SessionAborted { client: u32, reason: String },
}

#[derive(Debug)]
struct ClientRecord {
    fov: f64,
    transform: Option<RigidTransform>,
    pending: Vec<KeyframeUploadMsg>,
    connected: bool,
}

#[derive(Debug, Default)]
struct Registry {
    clients: BTreeMap<ClientId, ClientRecord>,
    anchored: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

pub struct Server {
    config: ServerConfig,
    map: RwLock<GlobalMap>,
    registry: Mutex<Registry>,
    alphas: Mutex<BTreeMap<ClientId, f64>>,
    optimizer: Box<dyn GlobalOptimizer>,
    events: Mutex<Vec<ServerEvent>>,
    reports: Mutex<Vec<OptimizationReport>>,
    latencies: Mutex<BTreeMap<MessageType, Vec<Duration>>>,
    ingress: AtomicU64,
    egress: AtomicU64,
    clock: AtomicU64,
    peak_memory: AtomicU64,
}

impl Server {
    pub fn new(config: ServerConfig) -> Arc<Self> {
        Self::with_map(config, GlobalMap::new(config.map), Box::new(NoopOptimizer))
    }

    pub fn with_map(config: ServerConfig, map: GlobalMap, optimizer: Box<dyn GlobalOptimizer>) -> Arc<Self> {
        let anchored = map.frame_count() > 0;
        Arc::new(Self {
            config,
            peak_memory: AtomicU64::new(map.memory_estimate_bytes() as u64),
            map: RwLock::new(map),
            registry: Mutex::new(Registry { anchored, ..Registry::default() }),
            alphas: Mutex::new(BTreeMap::new()),
            optimizer,
            events: Mutex::new(Vec::new()),
            reports: Mutex::new(Vec::new()),
            latencies: Mutex::new(BTreeMap::new()),
            ingress: AtomicU64::new(0),
            egress: AtomicU64::new(0),
            clock: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    /// Run `f` against a consistent read view of the map.
    pub fn with_map_read<R>(&self, f: impl FnOnce(&GlobalMap) -> R) -> R {
        f(&self.map.read().expect("map lock"))
    }

    /// Oversharing factor for one client's shared-map requests.
    pub fn set_client_alpha(&self, client: ClientId, alpha: f64) {
        self.alphas.lock().expect("alpha lock").insert(client, alpha.max(1.0));
    }

    fn alpha_for(&self, client: ClientId) -> f64 {
        self.alphas.lock().expect("alpha lock").get(&client).copied().unwrap_or(self.config.alpha)
    }

    pub fn events(&self) -> Vec<ServerEvent> {
        self.events.lock().expect("events lock").clone()
    }

    pub fn optimization_reports(&self) -> Vec<OptimizationReport> {
        self.reports.lock().expect("reports lock").clone()
    }

    pub fn ingress_bytes(&self) -> u64 {
        self.ingress.load(Ordering::SeqCst)
    }

    pub fn egress_bytes(&self) -> u64 {
        self.egress.load(Ordering::SeqCst)
    }

    pub fn peak_memory_bytes(&self) -> u64 {
        self.peak_memory.load(Ordering::SeqCst)
    }

    /// Uploads still waiting for their client's frame to be aligned.
    pub fn orphan_count(&self) -> usize {
        self.registry.lock().expect("registry lock").clients.values().map(|c| c.pending.len()).sum()
    }

    pub fn latency_summary(&self) -> BTreeMap<MessageType, LatencySummary> {
        let lat = self.latencies.lock().expect("latency lock");
        lat.iter()
            .map(|(t, v)| {
                let mut us: Vec<u64> = v.iter().map(|d| d.as_micros() as u64).collect();
                us.sort_unstable();
                let pick = |q: f64| us[((us.len() - 1) as f64 * q).round() as usize];
                (*t, LatencySummary { count: us.len(), p50_us: pick(0.5), p95_us: pick(0.95), p99_us: pick(0.99), max_us: *us.last().unwrap_or(&0) })
            })
            .collect()
    }

    pub fn connect(self: &Arc<Self>) -> Connection {
        Connection { server: Arc::clone(self), session: None, aborted: false, traffic: TrafficStats::default() }
    }

    fn event(&self, e: ServerEvent) {
        self.events.lock().expect("events lock").push(e);
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst)
    }

    fn note_memory(&self, map: &GlobalMap) {
        self.peak_memory.fetch_max(map.memory_estimate_bytes() as u64, Ordering::SeqCst);
    }

    fn register(&self, client: ClientId, intrinsics: &CameraIntrinsics) -> Result<bool, String> {
        let fov = compute_fov(intrinsics).map_err(|e| e.to_string())?;
        let mut reg = self.registry.lock().expect("registry lock");
        if let Some(existing) = reg.clients.get_mut(&client) {
            if existing.connected {
                return Err(format!("{client} already has an open session"));
            }
            existing.connected = true;
            existing.fov = fov;
            return Ok(existing.transform.is_some());
        }
        // The first participant defines the global frame.
        let anchored = !reg.anchored;
        reg.anchored = true;
        let transform = anchored.then(RigidTransform::identity);
        reg.clients.insert(client, ClientRecord { fov, transform, pending: Vec::new(), connected: true });
        drop(reg);
        self.event(ServerEvent::Registered { client: client.0, anchored });
        Ok(transform.is_some())
    }

    fn client_view(&self, client: ClientId) -> Option<(f64, Option<RigidTransform>)> {
        let reg = self.registry.lock().expect("registry lock");
        reg.clients.get(&client).map(|c| (c.fov, c.transform))
    }

    fn sample_count(np: u16) -> usize {
        if np == 0 {
            DEFAULT_K
        } else {
            np as usize
        }
    }

    /// Overlap verdict in the client's local frame; `None` when not aligned.
    fn assess(&self, q: &OverlapQueryMsg) -> Result<Option<(OverlapVerdict, RigidTransform)>, String> {
        let (fov, transform) = self.client_view(q.client_id()).ok_or("unregistered client")?;
        let Some(t) = transform else { return Ok(None) };
        let pose = t.apply_pose(q.pose());
        let client = q.client_id();
        let k = Self::sample_count(q.np());
        let seed = query_seed(client, q.keyframe_id());
        let map = self.map.read().expect("map lock");
        let verdict = assess_overlap_with(&map, &pose, fov, k, seed, &self.config.overlap, |f| f.client_id != client)
            .map_err(|e| e.to_string())?;
        Ok(Some((verdict, t)))
    }

    fn handle_query(&self, q: &OverlapQueryMsg) -> Result<OverlapResponseMsg, String> {
        match self.assess(q)? {
            None => {
                // Unaligned user: everything is fresh, nothing to list.
                let (fov, _) = self.client_view(q.client_id()).ok_or("unregistered client")?;
                let cone = ViewCone::new(*q.pose(), self.config.overlap.h, fov).map_err(|e| e.to_string())?;
                let r = sample_spacing(&cone, Self::sample_count(q.np()));
                Ok(OverlapResponseMsg { status: SampleClass::Redundant, r: r as f32, samples: vec![] })
            }
            Some((mut verdict, t)) => {
                let inv = t.inverse();
                for s in verdict.redundant_samples.iter_mut().chain(verdict.fresh_samples.iter_mut()) {
                    *s = inv.apply(s);
                }
                Ok(build_response(&verdict))
            }
        }
    }

    fn handle_shared_map(&self, q: &OverlapQueryMsg) -> Result<SharedMapSlice, String> {
        let (fov, _) = self.client_view(q.client_id()).ok_or("unregistered client")?;
        let alpha = self.alpha_for(q.client_id());
        let local_cone = ViewCone::overshared(*q.pose(), self.config.sharing.h, fov, alpha).map_err(|e| e.to_string())?;
        let empty = SharedMapSlice::empty(q.client_id(), q.keyframe_id(), local_cone);
        let Some((verdict, t)) = self.assess(q)? else { return Ok(empty) };
        if !verdict.seen {
            return Ok(empty);
        }
        let pose = t.apply_pose(q.pose());
        let map = self.map.read().expect("map lock");
        let slice = build_shared_map(&map, (q.client_id(), q.keyframe_id()), &pose, fov, alpha, &self.config.sharing)
            .map_err(|e| e.to_string())?;
        Ok(slice.transformed(&t.inverse()))
    }

    fn handle_upload(&self, msg: &KeyframeUploadMsg) -> Result<UploadAckMsg, String> {
        if msg.points.len() > self.config.map.np_max {
            return Err(format!("upload carries {} points, cap is {}", msg.points.len(), self.config.map.np_max));
        }
        let mut reg = self.registry.lock().expect("registry lock");
        let record = reg.clients.get_mut(&msg.client_id).ok_or("unregistered client")?;
        let ack = match record.transform {
            Some(t) => {
                let mut map = self.map.write().expect("map lock");
                integrate_upload(&mut map, msg, &t, self.tick()).map_err(|e| e.to_string())?;
                self.note_memory(&map);
                UploadAckMsg { keyframe_id: msg.keyframe_id, outcome: UploadOutcome::Stored, points_stored: msg.points.len() as u32 }
            }
            None => {
                record.pending.push(msg.clone());
                UploadAckMsg { keyframe_id: msg.keyframe_id, outcome: UploadOutcome::Buffered, points_stored: 0 }
            }
        };
        self.retry_alignment(&mut reg);
        let outcome = match reg.clients[&msg.client_id].transform {
            Some(_) if ack.outcome == UploadOutcome::Buffered => {
                UploadAckMsg { outcome: UploadOutcome::Stored, points_stored: msg.points.len() as u32, ..ack }
            }
            _ => ack,
        };
        Ok(outcome)
    }

    /// Align every client with buffered uploads that now shares enough
    /// landmarks with the global map, merging its buffer. Repeats until no
    /// further client aligns, since each merge can enable another.
    fn retry_alignment(&self, reg: &mut Registry) {
        loop {
            let mut progressed = false;
            let waiting: Vec<ClientId> =
                reg.clients.iter().filter(|(_, c)| c.transform.is_none() && !c.pending.is_empty()).map(|(id, _)| *id).collect();
            for id in waiting {
                let mut map = self.map.write().expect("map lock");
                let record = reg.clients.get_mut(&id).expect("listed");
                let mut seen: BTreeSet<PointId> = BTreeSet::new();
                let pairs: Vec<_> = record
                    .pending
                    .iter()
                    .flat_map(|m| m.points.iter())
                    .filter(|p| seen.insert(p.id))
                    .filter_map(|p| map.point(p.id).map(|g| (wire_point(&p.position), g.position)))
                    .collect();
                if pairs.len() < self.config.min_alignment_pairs {
                    continue;
                }
                let Ok(alignment) = estimate_alignment(&pairs) else { continue };
                let pending = std::mem::take(&mut record.pending);
                record.transform = Some(alignment.transform);
                for m in &pending {
                    // Capacity was checked on receipt, so integration cannot fail here.
                    let _ = integrate_upload(&mut map, m, &alignment.transform, self.tick());
                }
                self.note_memory(&map);
                drop(map);
                self.event(ServerEvent::Aligned { client: id.0, pairs: pairs.len(), rms: alignment.rms, merged: pending.len() });
                progressed = true;
            }
            if !progressed {
                break;
            }
        }
    }

    fn handle_update_check(&self, client: ClientId, keyframes: &[KeyframeUploadMsg]) -> Result<UpdateStatusMsg, String> {
        let (_, transform) = self.client_view(client).ok_or("unregistered client")?;
        let Some(t) = transform else {
            return Ok(UpdateStatusMsg { verdict: UpdateVerdict::Expansion, stale_point_ids: vec![], summary: UpdateSummary::default() });
        };
        let kfs: Vec<Keyframe> = keyframes
            .iter()
            .map(|m| {
                let mut kf = Keyframe::from_upload(m);
                kf.pose = t.apply_pose(&kf.pose);
                for p in &mut kf.points {
                    p.position = t.apply(&p.position);
                }
                kf
            })
            .collect();
        let map = self.map.read().expect("map lock");
        let status = get_update_status(&map, &kfs, &self.config.update);
        drop(map);
        self.event(ServerEvent::UpdateChecked {
            client: client.0,
            updating: status.verdict == UpdateVerdict::Updating,
            stale: status.stale_point_ids.len(),
        });
        Ok(status)
    }

    fn end_session(&self, client: ClientId) -> Result<OptimizationSummary, String> {
        let mut reg = self.registry.lock().expect("registry lock");
        let registered: BTreeSet<ClientId> = reg.clients.keys().copied().collect();
        let mut map = self.map.write().expect("map lock");
        let report = on_session_end(&mut map, client, &registered, self.optimizer.as_ref()).map_err(|e| e.to_string())?;
        drop(map);
        if let Some(c) = reg.clients.get_mut(&client) {
            c.connected = false;
        }
        drop(reg);
        self.event(ServerEvent::SessionEnded {
            client: client.0,
            frames: report.frame_count,
            points: report.point_count,
            frames_adjusted: report.frames_adjusted,
        });
        let summary = OptimizationSummary {
            client_id: client,
            frame_count: report.frame_count as u32,
            point_count: report.point_count as u32,
            frames_adjusted: report.frames_adjusted as u32,
            elapsed_us: report.elapsed.as_micros() as u64,
        };
        self.reports.lock().expect("reports lock").push(report);
        Ok(summary)
    }

    fn disconnect(&self, client: ClientId) {
        if let Some(c) = self.registry.lock().expect("registry lock").clients.get_mut(&client) {
            c.connected = false;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Session {
    client_id: ClientId,
    state: SessionState,
}

/// Server side of one connection. Frames are handled strictly in order.
pub struct Connection {
    server: Arc<Server>,
    session: Option<Session>,
    aborted: bool,
    traffic: TrafficStats,
}

/// Reply to one inbound frame; `close` is set once the session is over.
#[derive(Debug, Clone)]
pub struct Reply {
    pub frame: Vec<u8>,
    pub close: bool,
}

impl Connection {
    pub fn state(&self) -> Option<SessionState> {
        self.session.map(|s| s.state)
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted
    }

    pub fn traffic(&self) -> &TrafficStats {
        &self.traffic
    }

    pub fn handle(&mut self, frame: &[u8]) -> Reply {
        let started = Instant::now();
        self.server.ingress.fetch_add(frame.len() as u64, Ordering::SeqCst);
        self.traffic.meter(frame, Direction::Upload);
        let (reply, close, ty) = match decode(frame) {
            Err(e) => {
                // An unknown type byte is a well-framed message nobody handles.
                let code = match e.kind {
                    DecodeErrorKind::UnknownType(_) => ErrorCode::Protocol,
                    _ => ErrorCode::Malformed,
                };
                (Message::Error { code, message: e.to_string() }, self.aborted, None)
            }
            Ok(msg) => {
                let ty = msg.message_type();
                match self.dispatch(msg) {
                    Ok(reply) => {
                        let close = matches!(reply, Message::EndAck(_));
                        (reply, close, Some(ty))
                    }
                    Err((code, message)) => {
                        let fatal = code != ErrorCode::Rejected;
                        if fatal {
                            self.abort(&message);
                        }
                        (Message::Error { code, message }, fatal, Some(ty))
                    }
                }
            }
        };
        let bytes = encode(&reply);
        self.server.egress.fetch_add(bytes.len() as u64, Ordering::SeqCst);
        self.traffic.meter(&bytes, Direction::Download);
        if let Some(ty) = ty {
            self.server.latencies.lock().expect("latency lock").entry(ty).or_default().push(started.elapsed());
        }
        Reply { frame: bytes, close }
    }

    fn abort(&mut self, reason: &str) {
        if self.aborted {
            return;
        }
        self.aborted = true;
        if let Some(s) = self.session {
            if s.state != SessionState::Ended {
                self.server.disconnect(s.client_id);
            }
            self.server.event(ServerEvent::SessionAborted { client: s.client_id.0, reason: reason.to_string() });
        }
    }

    fn active(&mut self, claimed: ClientId) -> Result<&mut Session, (ErrorCode, String)> {
        if self.aborted {
            return Err((ErrorCode::Protocol, "session aborted".into()));
        }
        let s = self.session.as_mut().ok_or((ErrorCode::NotRegistered, "register first".to_string()))?;
        if s.state == SessionState::Ended {
            return Err((ErrorCode::Protocol, "session already ended".into()));
        }
        if s.client_id != claimed {
            return Err((ErrorCode::Protocol, format!("message for {claimed} on session of {}", s.client_id)));
        }
        Ok(s)
    }

    fn dispatch(&mut self, msg: Message) -> Result<Message, (ErrorCode, String)> {
        let server = Arc::clone(&self.server);
        let rejected = |e: String| (ErrorCode::Rejected, e);
        match msg {
            Message::Register { client_id, intrinsics } => {
                if self.aborted || self.session.is_some() {
                    return Err((ErrorCode::Protocol, "session already registered".into()));
                }
                let aligned = server.register(client_id, &intrinsics).map_err(|e| (ErrorCode::Protocol, e))?;
                self.session = Some(Session { client_id, state: SessionState::Registered });
                Ok(Message::RegisterAck { client_id, aligned })
            }
            Message::OverlapQuery(q) => {
                self.active(q.client_id())?;
                Ok(Message::OverlapResponse(server.handle_query(&q).map_err(rejected)?))
            }
            Message::KeyframeUpload(k) => {
                self.active(k.client_id)?.state = SessionState::Mapping;
                Ok(Message::UploadAck(server.handle_upload(&k).map_err(rejected)?))
            }
            Message::SharedMapRequest(q) => {
                self.active(q.client_id())?.state = SessionState::Sharing;
                Ok(Message::SharedMapResponse(server.handle_shared_map(&q).map_err(rejected)?.to_msg()))
            }
            Message::UpdateCheck(u) => {
                self.active(u.client_id)?;
                if u.keyframes.is_empty() {
                    return Err((ErrorCode::Rejected, "update check without keyframes".into()));
                }
                Ok(Message::UpdateStatus(server.handle_update_check(u.client_id, &u.keyframes).map_err(rejected)?))
            }
            Message::End { client_id } => {
                self.active(client_id)?;
                let summary = server.end_session(client_id).map_err(|e| (ErrorCode::Protocol, e))?;
                self.session = Some(Session { client_id, state: SessionState::Ended });
                Ok(Message::EndAck(summary))
            }
            other => Err((ErrorCode::Protocol, format!("{:?} is a server-to-device message", other.message_type()))),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(s) = self.session {
            if s.state != SessionState::Ended && !self.aborted {
                self.server.disconnect(s.client_id);
            }
        }
    }
}

/// Device-side view of a response: the overlap degree implied by the listed class.
pub fn response_degree(resp: &OverlapResponseMsg, np: u16) -> f64 {
    let k = Server::sample_count(np);
    let listed = resp.samples.len().min(k);
    let redundant = match resp.status {
        SampleClass::Redundant => listed,
        SampleClass::Fresh => k - listed,
    };
    redundant as f64 / k as f64
}

/// Query pose helper for tests and tools.
pub fn query_for(client: ClientId, kf: KeyframeId, np: usize, pose: &Pose) -> OverlapQueryMsg {
    OverlapQueryMsg::new(client, kf, np.min(u16::MAX as usize) as u16, pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::wire::WirePoint;
    use nalgebra::{Rotation3, Vector3};

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::preset("future-city").unwrap()
    }

    fn send(conn: &mut Connection, msg: Message) -> (Message, bool) {
        let reply = conn.handle(&encode(&msg));
        (decode(&reply.frame).unwrap(), reply.close)
    }

    fn register(conn: &mut Connection, id: u32) -> bool {
        match send(conn, Message::Register { client_id: ClientId(id), intrinsics: intr() }).0 {
            Message::RegisterAck { aligned, .. } => aligned,
            other => panic!("{other:?}"),
        }
    }

    // Landmarks spread in front of a camera at the origin looking along +x.
    fn landmarks(n: u64) -> Vec<(PointId, Point3)> {
        (0..n).map(|i| (PointId(i), Point3::new(3.0 + (i % 10) as f64, (i / 10) as f64 - 2.0, ((i * 7) % 5) as f64 - 2.0))).collect()
    }

    fn upload(client: u32, kf: u32, pose: Pose, pts: &[(PointId, Point3)], to_local: &RigidTransform) -> KeyframeUploadMsg {
        KeyframeUploadMsg {
            client_id: ClientId(client),
            keyframe_id: KeyframeId(kf),
            pose: to_local.apply_pose(&pose),
            fov: compute_fov(&intr()).unwrap(),
            points: pts
                .iter()
                .map(|(id, p)| {
                    let q = to_local.apply(p);
                    WirePoint { id: *id, position: [q.x as f32, q.y as f32, q.z as f32], descriptor: [0; 32], observation_count: 1 }
                })
                .collect(),
        }
    }

    fn ahead() -> Pose {
        Pose::looking_along(Point3::origin(), 0.0).unwrap()
    }

    fn error_code(m: &Message) -> Option<ErrorCode> {
        match m {
            Message::Error { code, .. } => Some(*code),
            _ => None,
        }
    }

    #[test]
    fn cold_start_query_lists_nothing() {
        let server = Server::new(ServerConfig::default());
        let mut c = server.connect();
        assert!(register(&mut c, 1));
        let q = query_for(ClientId(1), KeyframeId(0), 120, &Pose::identity());
        let Message::OverlapResponse(resp) = send(&mut c, Message::OverlapQuery(q)).0 else { panic!() };
        assert_eq!(resp.status, SampleClass::Redundant);
        assert!(resp.samples.is_empty());
        assert_eq!(response_degree(&resp, 120), 0.0);
        assert!(resp.r > 0.0);
    }

    #[test]
    fn malformed_frame_keeps_the_session() {
        let server = Server::new(ServerConfig::default());
        let mut c = server.connect();
        register(&mut c, 1);
        let reply = c.handle(&[0xde, 0xad, 0xbe, 0xef]);
        assert!(!reply.close);
        assert_eq!(error_code(&decode(&reply.frame).unwrap()), Some(ErrorCode::Malformed));
        let q = query_for(ClientId(1), KeyframeId(0), 0, &Pose::identity());
        assert!(matches!(send(&mut c, Message::OverlapQuery(q)).0, Message::OverlapResponse(_)));
        assert!(!c.is_aborted());
        // A well-framed message of an unknown type.
        let mut frame = encode(&Message::End { client_id: ClientId(1) });
        frame[3] = 0x7f;
        let reply = c.handle(&frame);
        assert!(!reply.close);
        assert_eq!(error_code(&decode(&reply.frame).unwrap()), Some(ErrorCode::Protocol));
    }

    #[test]
    fn protocol_violations_abort() {
        let server = Server::new(ServerConfig::default());
        let q = query_for(ClientId(1), KeyframeId(0), 0, &Pose::identity());

        let mut c = server.connect();
        let (m, close) = send(&mut c, Message::OverlapQuery(q));
        assert_eq!((error_code(&m), close), (Some(ErrorCode::NotRegistered), true));

        let mut c = server.connect();
        register(&mut c, 1);
        let other = query_for(ClientId(9), KeyframeId(0), 0, &Pose::identity());
        let (m, close) = send(&mut c, Message::OverlapQuery(other));
        assert_eq!((error_code(&m), close), (Some(ErrorCode::Protocol), true));
        assert!(c.is_aborted());
        // Nothing is served after an abort.
        assert_eq!(error_code(&send(&mut c, Message::OverlapQuery(q)).0), Some(ErrorCode::Protocol));

        let mut c = server.connect();
        register(&mut c, 2);
        let (m, _) = send(&mut c, Message::EndAck(OptimizationSummary::default()));
        assert_eq!(error_code(&m), Some(ErrorCode::Protocol));
        assert!(server.events().iter().filter(|e| matches!(e, ServerEvent::SessionAborted { .. })).count() >= 2);
    }

    #[test]
    fn oversized_upload_is_rejected_but_not_fatal() {
        let server = Server::new(ServerConfig::default());
        let mut c = server.connect();
        register(&mut c, 1);
        let msg = upload(1, 0, Pose::identity(), &landmarks(301), &RigidTransform::identity());
        let (m, close) = send(&mut c, Message::KeyframeUpload(msg));
        assert_eq!((error_code(&m), close), (Some(ErrorCode::Rejected), false));
        let (m, close) = send(&mut c, Message::UpdateCheck(crate::wire::UpdateCheckMsg { client_id: ClientId(1), keyframes: vec![] }));
        assert_eq!((error_code(&m), close), (Some(ErrorCode::Rejected), false));
        assert!(!c.is_aborted());
    }

    #[test]
    fn end_is_final_and_reported_once() {
        let server = Server::new(ServerConfig::default());
        let mut c = server.connect();
        register(&mut c, 1);
        send(&mut c, Message::KeyframeUpload(upload(1, 0, Pose::identity(), &landmarks(40), &RigidTransform::identity())));
        let (m, close) = send(&mut c, Message::End { client_id: ClientId(1) });
        let Message::EndAck(summary) = m else { panic!("{m:?}") };
        assert!(close);
        assert_eq!((summary.frame_count, summary.point_count), (1, 40));
        assert_eq!(c.state(), Some(SessionState::Ended));
        let (m, _) = send(&mut c, Message::End { client_id: ClientId(1) });
        assert_eq!(error_code(&m), Some(ErrorCode::Protocol));
        let ended = server.events().iter().filter(|e| matches!(e, ServerEvent::SessionEnded { .. })).count();
        assert_eq!((ended, server.optimization_reports().len()), (1, 1));
    }

    #[test]
    fn duplicate_live_registration_is_refused() {
        let server = Server::new(ServerConfig::default());
        let mut a = server.connect();
        register(&mut a, 1);
        let mut b = server.connect();
        let (m, close) = send(&mut b, Message::Register { client_id: ClientId(1), intrinsics: intr() });
        assert_eq!((error_code(&m), close), (Some(ErrorCode::Protocol), true));
        drop(a);
        // Once the first connection is gone the id can come back.
        let mut c = server.connect();
        assert!(register(&mut c, 1));
    }

    #[test]
    fn second_user_is_buffered_then_aligned() {
        let server = Server::new(ServerConfig::default());
        let pts = landmarks(60);
        let mut a = server.connect();
        register(&mut a, 1);
        send(&mut a, Message::KeyframeUpload(upload(1, 0, ahead(), &pts, &RigidTransform::identity())));
        send(&mut a, Message::End { client_id: ClientId(1) });

        // The second device lives in a rotated, shifted frame.
        let local_to_world = RigidTransform::new(Rotation3::from_euler_angles(0.0, 0.0, 0.7), Vector3::new(4.0, -2.0, 0.5));
        let to_local = local_to_world.inverse();
        let mut b = server.connect();
        assert!(!register(&mut b, 2));
        let q = query_for(ClientId(2), KeyframeId(0), 60, &to_local.apply_pose(&ahead()));
        let Message::OverlapResponse(resp) = send(&mut b, Message::OverlapQuery(q)).0 else { panic!() };
        assert_eq!(response_degree(&resp, 60), 0.0);

        // Too few shared landmarks: stays buffered.
        let (m, _) = send(&mut b, Message::KeyframeUpload(upload(2, 0, ahead(), &pts[..5], &to_local)));
        assert!(matches!(m, Message::UploadAck(UploadAckMsg { outcome: UploadOutcome::Buffered, .. })));
        assert_eq!(server.orphan_count(), 1);
        let (m, _) = send(&mut b, Message::KeyframeUpload(upload(2, 1, ahead(), &pts[5..30], &to_local)));
        assert!(matches!(m, Message::UploadAck(UploadAckMsg { outcome: UploadOutcome::Stored, .. })));
        assert_eq!(server.orphan_count(), 0);
        assert!(server.events().iter().any(|e| matches!(e, ServerEvent::Aligned { client: 2, merged: 2, .. })));

        // Merged points land back on the world positions.
        server.with_map_read(|map| {
            let world: Vec<Point3> = map.frames().filter(|f| f.client_id == ClientId(2)).flat_map(|f| f.point_ids.clone()).map(|id| map.point(id).unwrap().position).collect();
            assert_eq!(world.len(), 30);
            for (p, (_, truth)) in world.iter().zip(&pts) {
                assert!((p - truth).norm() < 1e-3, "{p} vs {truth}");
            }
        });
        // Aligned now, and the view is already mapped by the first user.
        let Message::OverlapResponse(resp) = send(&mut b, Message::OverlapQuery(q)).0 else { panic!() };
        assert!(response_degree(&resp, 60) > 0.0);
    }

    #[test]
    fn traffic_is_conserved() {
        let server = Server::new(ServerConfig::default());
        let mut c = server.connect();
        register(&mut c, 1);
        c.handle(b"garbage");
        send(&mut c, Message::KeyframeUpload(upload(1, 0, Pose::identity(), &landmarks(50), &RigidTransform::identity())));
        send(&mut c, Message::End { client_id: ClientId(1) });
        assert_eq!(c.traffic().total(Direction::Upload), server.ingress_bytes());
        assert_eq!(c.traffic().total(Direction::Download), server.egress_bytes());
        let lat = server.latency_summary();
        assert_eq!(lat[&MessageType::KeyframeUpload].count, 1);
        assert!(!lat.contains_key(&MessageType::OverlapQuery));
    }
}
