//! Scenario metrics, their tabular text form, and the freshness/traffic report.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::scenario::Role;
use super::SimError;
use crate::expansion::Keyframe;
use crate::runtime::{ClientReport, Mode, Server};
use crate::sharing::TraceEvent;
use crate::wire::{encode, Category, Direction, Message};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub client_id: u32,
    pub role: Role,
    pub mode: Mode,
    pub keyframes: u64,
    /// Uploads that carried every observed point.
    pub full_uploads: u64,
    pub partial_uploads: u64,
    pub buffered_uploads: u64,
    pub upload_bytes: BTreeMap<String, u64>,
    pub upload_total: u64,
    pub download_total: u64,
    /// What uploading every processed keyframe in full would have cost.
    pub vanilla_equivalent_bytes: u64,
    pub freshness_ratio: f64,
    pub map_requests: u64,
    pub update_checks: u64,
    pub map_updates: u64,
    pub aborted: Option<String>,
}

impl UserMetrics {
    pub fn from_report(role: Role, r: &ClientReport, keyframes: &[Keyframe]) -> Self {
        let processed = (r.traffic.keyframes() as usize).min(keyframes.len());
        let vanilla_equivalent_bytes = keyframes[..processed]
            .iter()
            .map(|k| encode(&Message::KeyframeUpload(k.to_upload(r.client_id))).len() as u64)
            .sum();
        let full = r.uploads.iter().filter(|u| u.pruned + u.injected_counts.len() == u.original).count() as u64;
        Self {
            client_id: r.client_id.0,
            role,
            mode: r.mode,
            keyframes: r.traffic.keyframes(),
            full_uploads: full,
            partial_uploads: r.uploads.len() as u64 - full,
            buffered_uploads: r.uploads.iter().filter(|u| u.buffered).count() as u64,
            upload_bytes: Category::ALL.iter().map(|c| (c.name().to_string(), r.traffic.bytes(Direction::Upload, *c))).collect(),
            upload_total: r.traffic.total(Direction::Upload),
            download_total: r.traffic.total(Direction::Download),
            vanilla_equivalent_bytes,
            freshness_ratio: r.freshness_ratio(),
            map_requests: r.map_requests() as u64,
            update_checks: r.trace.iter().filter(|e| matches!(e, TraceEvent::UpdateCheck { .. })).count() as u64,
            map_updates: r.map_updates.len() as u64,
            aborted: r.aborted.clone(),
        }
    }

    /// Bytes of keyframe payload messages only.
    pub fn keyframe_payload_bytes(&self) -> u64 {
        self.upload_bytes.get(Category::KeyframeUpload.name()).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMetrics {
    pub frames: u64,
    pub points: u64,
    pub peak_memory_bytes: u64,
    pub ingress_bytes: u64,
    pub egress_bytes: u64,
    pub orphan_uploads: u64,
    pub audit_violations: u64,
}

impl ServerMetrics {
    pub fn from_server(server: &Server) -> Self {
        let (frames, points, violations) =
            server.with_map_read(|m| (m.frame_count() as u64, m.point_count() as u64, m.audit().violations.len() as u64));
        Self {
            frames,
            points,
            peak_memory_bytes: server.peak_memory_bytes(),
            ingress_bytes: server.ingress_bytes(),
            egress_bytes: server.egress_bytes(),
            orphan_uploads: server.orphan_count() as u64,
            audit_violations: violations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub mode: Mode,
    pub users: Vec<UserMetrics>,
    pub server: ServerMetrics,
}

const TSV_HEADER: &str = "scope\tid\tcounter\tvalue";

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.replace(['\t', '\n'], " "))),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn insert_path(obj: &mut Map<String, Value>, key: &str, value: Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let child = obj.entry(head.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert_path(m, rest, value);
            }
        }
        None => {
            obj.insert(key.to_string(), value);
        }
    }
}

fn parse_value(s: &str) -> Value {
    match serde_json::from_str::<Value>(s) {
        Ok(v @ (Value::Number(_) | Value::Bool(_) | Value::Null)) => v,
        _ => Value::String(s.to_string()),
    }
}

impl Metrics {
    pub fn user(&self, id: u32) -> Option<&UserMetrics> {
        self.users.iter().find(|u| u.client_id == id)
    }

    pub fn total_upload(&self) -> u64 {
        self.users.iter().map(|u| u.upload_total).sum()
    }

    pub fn total_download(&self) -> u64 {
        self.users.iter().map(|u| u.download_total).sum()
    }

    /// One row per scope/counter; strings are written bare.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        let mut emit = |scope: &str, id: &str, v: &Value| {
            let mut rows = Vec::new();
            flatten("", v, &mut rows);
            for (k, val) in rows {
                out.push_str(&format!("{scope}\t{id}\t{k}\t{val}\n"));
            }
        };
        emit("scenario", "-", &serde_json::json!({ "name": self.name, "mode": self.mode }));
        for u in &self.users {
            let mut v = serde_json::to_value(u).expect("metrics serialize");
            v.as_object_mut().expect("struct").remove("client_id");
            emit("user", &u.client_id.to_string(), &v);
        }
        emit("server", "-", &serde_json::to_value(&self.server).expect("metrics serialize"));
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, SimError> {
        let bad = |line: usize, why: &str| SimError::Config(format!("metrics line {line}: {why}"));
        let mut scenario = Map::new();
        let mut server = Map::new();
        let mut users: BTreeMap<u32, Map<String, Value>> = BTreeMap::new();
        let mut order: Vec<u32> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if n == 0 {
                if line != TSV_HEADER {
                    return Err(bad(1, "missing header"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.splitn(4, '\t').collect();
            let [scope, id, key, value] = cols[..] else { return Err(bad(n + 1, "expected four columns")) };
            let value = if key == "name" || key == "aborted" && value != "null" { Value::String(value.into()) } else { parse_value(value) };
            match scope {
                "scenario" => insert_path(&mut scenario, key, value),
                "server" => insert_path(&mut server, key, value),
                "user" => {
                    let uid: u32 = id.parse().map_err(|_| bad(n + 1, "bad user id"))?;
                    let m = users.entry(uid).or_insert_with(|| {
                        order.push(uid);
                        let mut m = Map::new();
                        m.insert("client_id".into(), Value::from(uid));
                        m
                    });
                    insert_path(m, key, value);
                }
                _ => return Err(bad(n + 1, "unknown scope")),
            }
        }
        let mut root = scenario;
        root.insert("server".into(), Value::Object(server));
        root.insert("users".into(), Value::Array(order.iter().map(|id| Value::Object(users[id].clone())).collect()));
        serde_json::from_value(Value::Object(root)).map_err(|e| SimError::Config(format!("metrics: {e}")))
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!("scenario {:?} ({:?})\n", self.name, self.mode);
        s.push_str("user  role      kf   full  part  upload_B    payload_B   vanilla_B   fresh  req\n");
        for u in &self.users {
            s.push_str(&format!(
                "{:<5} {:<9} {:<4} {:<5} {:<5} {:<11} {:<11} {:<11} {:<6.3} {}{}\n",
                u.client_id,
                format!("{:?}", u.role).to_lowercase(),
                u.keyframes,
                u.full_uploads,
                u.partial_uploads,
                u.upload_total,
                u.keyframe_payload_bytes(),
                u.vanilla_equivalent_bytes,
                u.freshness_ratio,
                u.map_requests,
                u.aborted.as_ref().map_or(String::new(), |a| format!("  ABORTED: {a}")),
            ));
        }
        let sv = &self.server;
        s.push_str(&format!(
            "server: {} frames, {} points, peak ~{} KB, ingress {} B, egress {} B, orphans {}, audit violations {}\n",
            sv.frames,
            sv.points,
            sv.peak_memory_bytes / 1024,
            sv.ingress_bytes,
            sv.egress_bytes,
            sv.orphan_uploads,
            sv.audit_violations
        ));
        s
    }
}

/// Total upload saved relative to a vanilla run of the same users.
pub fn upload_reduction(mapxx: &Metrics, vanilla: &Metrics) -> f64 {
    let base = vanilla.total_upload();
    if base == 0 {
        return 0.0;
    }
    1.0 - mapxx.total_upload() as f64 / base as f64
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when undefined (fewer than two values
/// or a constant series).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreshnessRow {
    pub client_id: u32,
    pub role: Role,
    pub freshness_ratio: f64,
    pub upload_kb_per_keyframe: f64,
    pub vanilla_kb_per_keyframe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreshnessReport {
    pub rows: Vec<FreshnessRow>,
    /// Rank correlation between freshness and upload per keyframe.
    pub spearman: Option<f64>,
}

pub fn freshness_traffic_report(metrics: &Metrics) -> FreshnessReport {
    let per_kf = |bytes: u64, kf: u64| if kf == 0 { 0.0 } else { bytes as f64 / kf as f64 / 1024.0 };
    let rows: Vec<FreshnessRow> = metrics
        .users
        .iter()
        .map(|u| FreshnessRow {
            client_id: u.client_id,
            role: u.role,
            freshness_ratio: u.freshness_ratio,
            upload_kb_per_keyframe: per_kf(u.upload_total, u.keyframes),
            vanilla_kb_per_keyframe: per_kf(u.vanilla_equivalent_bytes, u.keyframes),
        })
        .collect();
    let fresh: Vec<f64> = rows.iter().map(|r| r.freshness_ratio).collect();
    let upload: Vec<f64> = rows.iter().map(|r| r.upload_kb_per_keyframe).collect();
    FreshnessReport { spearman: spearman(&fresh, &upload), rows }
}

impl fmt::Display for FreshnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "user  role      freshness  upload_KB/kf  vanilla_KB/kf")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<5} {:<9} {:<10.3} {:<13.2} {:.2}",
                r.client_id,
                format!("{:?}", r.role).to_lowercase(),
                r.freshness_ratio,
                r.upload_kb_per_keyframe,
                r.vanilla_kb_per_keyframe
            )?;
        }
        match self.spearman {
            Some(rho) => writeln!(f, "spearman(freshness, upload) = {rho:.3}"),
            None => writeln!(f, "spearman(freshness, upload) = n/a"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_oracles() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        // Ties take average ranks: x ranks [1.5,1.5,3], y ranks [1,2,3].
        let rho = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((rho - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    fn sample() -> Metrics {
        Metrics {
            name: "demo run".into(),
            mode: Mode::Mapxx,
            users: vec![UserMetrics {
                client_id: 3,
                role: Role::Follower,
                mode: Mode::Mapxx,
                keyframes: 10,
                full_uploads: 1,
                partial_uploads: 2,
                buffered_uploads: 1,
                upload_bytes: Category::ALL.iter().map(|c| (c.name().to_string(), 7)).collect(),
                upload_total: 42,
                download_total: 9,
                vanilla_equivalent_bytes: 1000,
                freshness_ratio: 0.123_456_789,
                map_requests: 2,
                update_checks: 0,
                map_updates: 0,
                aborted: Some("transport failed after 4 attempts".into()),
            }],
            server: ServerMetrics { frames: 1, points: 2, peak_memory_bytes: 3, ingress_bytes: 4, egress_bytes: 5, orphan_uploads: 0, audit_violations: 0 },
        }
    }

    #[test]
    fn tsv_round_trip() {
        let m = sample();
        let text = m.to_tsv();
        assert!(text.lines().all(|l| l.split('\t').count() == 4));
        assert_eq!(Metrics::from_tsv(&text).unwrap(), m);
        assert!(Metrics::from_tsv("nonsense").is_err());
    }
}
