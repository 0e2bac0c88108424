//! Device pipeline: one overlap query per keyframe, then either map
//! expansion or the shared-map loop, with every decision traced.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::server::{query_for, response_degree};
use super::transport::{Transport, TransportError};
use crate::expansion::{inject_redundancy, mean_observation_count, partition_keyframe, Keyframe};
use crate::geometry::{compute_fov, CameraIntrinsics, GeometryError};
use crate::ids::{ClientId, KeyframeId, PointId};
use crate::overlap::DEFAULT_T_SEEN;
use crate::sharing::{DeviceAction, DeviceConfig, DeviceLoop, SharedMapSlice, SharingService, TraceEvent, UpdateStatus};
use crate::wire::{
    decode, encode, DecodeError, Direction, ErrorCode, Message, MessageType, OptimizationSummary, OverlapQueryMsg,
    OverlapResponseMsg, TrafficStats, UpdateCheckMsg, UploadOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Overlap-aware protocol.
    Mapxx,
    /// Every full keyframe is uploaded, no queries.
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    pub client_id: ClientId,
    pub intrinsics: CameraIntrinsics,
    pub mode: Mode,
    pub t_seen: f64,
    pub device: DeviceConfig,
    /// Extra attempts after a transport failure before the session aborts.
    pub retries: u32,
}

impl ClientConfig {
    pub fn new(client_id: ClientId, intrinsics: CameraIntrinsics, mode: Mode) -> Self {
        Self { client_id, intrinsics, mode, t_seen: DEFAULT_T_SEEN, device: DeviceConfig::default(), retries: 3 }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("transport failed after {attempts} attempts: {source}")]
    Transport { attempts: u32, source: TransportError },
    #[error("undecodable reply: {0}")]
    Decode(#[from] DecodeError),
    #[error("server error {code:?}: {message}")]
    Server { code: ErrorCode, message: String },
    #[error("expected {expected:?}, got {got:?}")]
    Unexpected { expected: MessageType, got: MessageType },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// What one expansion actually sent, for checking the injection rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UploadRecord {
    pub keyframe_id: KeyframeId,
    pub original: usize,
    pub pruned: usize,
    pub mean_count: f64,
    /// Observation counts of the points re-added by injection.
    pub injected_counts: Vec<u32>,
    pub buffered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client_id: ClientId,
    pub mode: Mode,
    pub traffic: TrafficStats,
    pub trace: Vec<TraceEvent>,
    /// Overlap degree implied by each query response.
    pub degrees: Vec<f64>,
    pub uploads: Vec<UploadRecord>,
    pub map_updates: Vec<(KeyframeId, Vec<PointId>)>,
    pub optimization: Option<OptimizationSummary>,
    pub aborted: Option<String>,
}

impl ClientReport {
    fn new(client_id: ClientId, mode: Mode) -> Self {
        Self {
            client_id,
            mode,
            traffic: TrafficStats::default(),
            trace: Vec::new(),
            degrees: Vec::new(),
            uploads: Vec::new(),
            map_updates: Vec::new(),
            optimization: None,
            aborted: None,
        }
    }

    /// 1 − mean overlap degree; vanilla users (no queries) count as fully fresh.
    pub fn freshness_ratio(&self) -> f64 {
        if self.degrees.is_empty() {
            return 1.0;
        }
        1.0 - self.degrees.iter().sum::<f64>() / self.degrees.len() as f64
    }

    pub fn map_requests(&self) -> usize {
        crate::sharing::count_map_requests(&self.trace)
    }

    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|e| serde_json::to_string(e).expect("trace events serialize") + "\n").collect()
    }
}

/// Message round trips with retry, metered on the device side.
struct Link<'a, T> {
    transport: &'a mut T,
    traffic: &'a mut TrafficStats,
    retries: u32,
}

impl<T: Transport> Link<'_, T> {
    fn call(&mut self, msg: &Message) -> Result<Message, PipelineError> {
        let frame = encode(msg);
        let mut attempt = 0;
        let reply = loop {
            attempt += 1;
            match self.transport.roundtrip(&frame) {
                Ok(r) => break r,
                Err(e) if attempt > self.retries => return Err(PipelineError::Transport { attempts: attempt, source: e }),
                Err(_) => {}
            }
        };
        self.traffic.meter(&frame, Direction::Upload);
        self.traffic.meter(&reply, Direction::Download);
        match decode(&reply)? {
            Message::Error { code, message } => Err(PipelineError::Server { code, message }),
            m => Ok(m),
        }
    }
}

fn unexpected(expected: MessageType, got: &Message) -> PipelineError {
    PipelineError::Unexpected { expected, got: got.message_type() }
}

impl<T: Transport> SharingService for Link<'_, T> {
    type Error = PipelineError;

    fn request_shared_map(&mut self, query: &OverlapQueryMsg) -> Result<SharedMapSlice, PipelineError> {
        match self.call(&Message::SharedMapRequest(*query))? {
            Message::SharedMapResponse(m) => Ok(SharedMapSlice::from_msg(&m)?),
            m => Err(unexpected(MessageType::SharedMapResponse, &m)),
        }
    }

    fn update_check(&mut self, msg: &UpdateCheckMsg) -> Result<UpdateStatus, PipelineError> {
        match self.call(&Message::UpdateCheck(msg.clone()))? {
            Message::UpdateStatus(s) => Ok(s),
            m => Err(unexpected(MessageType::UpdateStatus, &m)),
        }
    }
}

pub struct ClientPipeline<T> {
    config: ClientConfig,
    transport: T,
    device: DeviceLoop,
    report: ClientReport,
    fov: f64,
    aligned: bool,
}

impl<T: Transport> ClientPipeline<T> {
    /// Register with the server over `transport`.
    #[allow(clippy::result_large_err)]
    pub fn connect(config: ClientConfig, transport: T) -> Result<Self, (PipelineError, ClientReport)> {
        let report = ClientReport::new(config.client_id, config.mode);
        let fov = match compute_fov(&config.intrinsics) {
            Ok(f) => f,
            Err(e) => return Err((e.into(), report)),
        };
        let device = DeviceLoop::new(config.client_id, config.device);
        let mut p = Self { config, transport, device, report, fov, aligned: false };
        let reg = Message::Register { client_id: config.client_id, intrinsics: config.intrinsics };
        match p.link().call(&reg) {
            Ok(Message::RegisterAck { aligned, .. }) => {
                p.aligned = aligned;
                Ok(p)
            }
            Ok(m) => Err((unexpected(MessageType::RegisterAck, &m), p.report)),
            Err(e) => Err((e, p.report)),
        }
    }

    pub fn report(&self) -> &ClientReport {
        &self.report
    }

    pub fn fov(&self) -> f64 {
        self.fov
    }

    /// Whether the server already knew this device's frame at registration.
    pub fn aligned_at_registration(&self) -> bool {
        self.aligned
    }

    fn link(&mut self) -> Link<'_, T> {
        Link { transport: &mut self.transport, traffic: &mut self.report.traffic, retries: self.config.retries }
    }

    pub fn process(&mut self, kf: &Keyframe) -> Result<(), PipelineError> {
        let id = kf.keyframe_id.0;
        self.report.traffic.note_keyframe();
        self.report.trace.push(TraceEvent::Keyframe { kf: id, points: kf.points.len() });
        if self.config.mode == Mode::Vanilla {
            return self.upload(kf, kf, kf);
        }
        self.device.record_keyframe(kf);
        let query = query_for(self.config.client_id, kf.keyframe_id, kf.points.len(), &kf.pose);
        let resp = match self.link().call(&Message::OverlapQuery(query))? {
            Message::OverlapResponse(r) => r,
            m => return Err(unexpected(MessageType::OverlapResponse, &m)),
        };
        let degree = response_degree(&resp, query.np());
        let seen = degree > self.config.t_seen;
        self.report.degrees.push(degree);
        self.report.trace.push(TraceEvent::Query {
            kf: id,
            np: query.np(),
            listed: resp.samples.len(),
            redundant: resp.status == crate::wire::SampleClass::Redundant,
            degree,
            seen,
        });
        if !seen {
            self.device.on_not_seen();
            return self.expand(kf, &resp);
        }
        let r_match = f64::from(resp.r) / 2.0;
        let mut trace = std::mem::take(&mut self.report.trace);
        if self.device.localize_held(kf, r_match, &mut trace) == Some(true) {
            trace.push(TraceEvent::Continue { kf: id });
            self.report.trace = trace;
            return Ok(());
        }
        let mut link = Link { transport: &mut self.transport, traffic: &mut self.report.traffic, retries: self.config.retries };
        let action = self.device.on_seen(kf, &query, r_match, &mut link, &mut trace);
        self.report.trace = trace;
        match action? {
            DeviceAction::ContinueOnSharedMap => {
                self.report.trace.push(TraceEvent::Continue { kf: id });
                Ok(())
            }
            DeviceAction::Expand => self.expand(kf, &resp),
            DeviceAction::LocalizationFailed => Ok(()),
            DeviceAction::MapUpdate(stale) => {
                // How to update the map is outside this protocol; record it.
                self.report.map_updates.push((kf.keyframe_id, stale));
                Ok(())
            }
        }
    }

    fn expand(&mut self, kf: &Keyframe, resp: &OverlapResponseMsg) -> Result<(), PipelineError> {
        let pruned = partition_keyframe(kf, resp);
        let injected = inject_redundancy(&pruned, kf);
        self.upload(&injected, kf, &pruned)
    }

    fn upload(&mut self, sent: &Keyframe, original: &Keyframe, pruned: &Keyframe) -> Result<(), PipelineError> {
        let msg = sent.to_upload(self.config.client_id);
        let ack = match self.link().call(&Message::KeyframeUpload(msg))? {
            Message::UploadAck(a) => a,
            m => return Err(unexpected(MessageType::UploadAck, &m)),
        };
        let kept: HashSet<PointId> = pruned.points.iter().map(|p| p.landmark_id).collect();
        let injected_counts: Vec<u32> =
            sent.points.iter().filter(|p| !kept.contains(&p.landmark_id)).map(|p| p.local_observation_count).collect();
        let buffered = ack.outcome == UploadOutcome::Buffered;
        self.report.trace.push(TraceEvent::Upload {
            kf: original.keyframe_id.0,
            original: original.points.len(),
            pruned: pruned.points.len(),
            injected: injected_counts.len(),
            buffered,
        });
        self.report.uploads.push(UploadRecord {
            keyframe_id: original.keyframe_id,
            original: original.points.len(),
            pruned: pruned.points.len(),
            mean_count: mean_observation_count(original),
            injected_counts,
            buffered,
        });
        Ok(())
    }

    /// End the session and hand back the report.
    pub fn finish(mut self) -> ClientReport {
        let end = Message::End { client_id: self.config.client_id };
        match self.link().call(&end) {
            Ok(Message::EndAck(s)) => self.report.optimization = Some(s),
            Ok(m) => self.report.aborted = Some(unexpected(MessageType::EndAck, &m).to_string()),
            Err(e) => self.report.aborted = Some(e.to_string()),
        }
        self.report
    }

    fn abort(mut self, kf: Option<KeyframeId>, e: PipelineError) -> ClientReport {
        let reason = e.to_string();
        self.report.trace.push(TraceEvent::Abort { kf: kf.map_or(u32::MAX, |k| k.0), reason: reason.clone() });
        self.report.aborted = Some(reason);
        self.report
    }
}

/// Register, stream every keyframe, end the session. Failures abort the
/// session and return the partial report.
pub fn run_client<T: Transport>(config: ClientConfig, transport: T, keyframes: impl IntoIterator<Item = Keyframe>) -> ClientReport {
    let mut p = match ClientPipeline::connect(config, transport) {
        Ok(p) => p,
        Err((e, mut report)) => {
            report.trace.push(TraceEvent::Abort { kf: u32::MAX, reason: e.to_string() });
            report.aborted = Some(e.to_string());
            return report;
        }
    };
    for kf in keyframes {
        if let Err(e) = p.process(&kf) {
            return p.abort(Some(kf.keyframe_id), e);
        }
    }
    p.finish()
}
