//! Per-session traffic accounting by direction and message category.

use serde::{Deserialize, Serialize};

use super::{MessageType, HEADER_LEN};

/// Size of a full keyframe used as the reference for relative overhead (160 KB).
pub const FULL_KEYFRAME_BYTES: u64 = 160 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Query,
    Response,
    KeyframeUpload,
    SharedMap,
    UpdateCheck,
    Control,
}

impl Category {
    pub const ALL: [Category; 6] =
        [Self::Query, Self::Response, Self::KeyframeUpload, Self::SharedMap, Self::UpdateCheck, Self::Control];

    pub fn name(self) -> &'static str {
        match self {
            Self::Query => "query",
            Self::Response => "response",
            Self::KeyframeUpload => "keyframe_upload",
            Self::SharedMap => "shared_map",
            Self::UpdateCheck => "update_check",
            Self::Control => "control",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    bytes: [[u64; 6]; 2],
    messages: [[u64; 6]; 2],
    keyframes: u64,
}

fn dir_index(d: Direction) -> usize {
    match d {
        Direction::Upload => 0,
        Direction::Download => 1,
    }
}

impl TrafficStats {
    /// Account one encoded frame; the category comes from its type byte.
    pub fn meter(&mut self, frame: &[u8], direction: Direction) {
        let category = frame
            .get(3)
            .filter(|_| frame.len() >= HEADER_LEN)
            .and_then(|b| MessageType::from_u8(*b))
            .map_or(Category::Control, MessageType::category);
        self.record(direction, category, frame.len() as u64);
    }

    pub fn record(&mut self, direction: Direction, category: Category, bytes: u64) {
        self.bytes[dir_index(direction)][category.index()] += bytes;
        self.messages[dir_index(direction)][category.index()] += 1;
    }

    pub fn note_keyframe(&mut self) {
        self.keyframes += 1;
    }

    pub fn keyframes(&self) -> u64 {
        self.keyframes
    }

    pub fn bytes(&self, direction: Direction, category: Category) -> u64 {
        self.bytes[dir_index(direction)][category.index()]
    }

    pub fn messages(&self, direction: Direction, category: Category) -> u64 {
        self.messages[dir_index(direction)][category.index()]
    }

    pub fn total(&self, direction: Direction) -> u64 {
        self.bytes[dir_index(direction)].iter().sum()
    }

    /// Mean bytes per keyframe in one direction; zero before any keyframe.
    pub fn per_keyframe(&self, direction: Direction) -> f64 {
        if self.keyframes == 0 {
            0.0
        } else {
            self.total(direction) as f64 / self.keyframes as f64
        }
    }

    pub fn merge(&mut self, other: &TrafficStats) {
        for d in 0..2 {
            for c in 0..6 {
                self.bytes[d][c] += other.bytes[d][c];
                self.messages[d][c] += other.messages[d][c];
            }
        }
        self.keyframes += other.keyframes;
    }
}

/// `bytes` as a fraction of the full-keyframe reference size.
pub fn ratio_to_full_keyframe(bytes: f64) -> f64 {
    bytes / FULL_KEYFRAME_BYTES as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::ids::{ClientId, KeyframeId};
    use crate::wire::{encode, Message, OverlapQueryMsg};

    #[test]
    fn query_overhead_ratio() {
        let frame = encode(&Message::OverlapQuery(OverlapQueryMsg::new(ClientId(1), KeyframeId(1), 300, &Pose::identity())));
        let mut t = TrafficStats::default();
        t.meter(&frame, Direction::Upload);
        t.note_keyframe();
        assert_eq!(t.bytes(Direction::Upload, Category::Query), 64);
        let pct = 100.0 * ratio_to_full_keyframe(t.per_keyframe(Direction::Upload));
        assert!((pct - 0.039).abs() < 5e-4, "{pct}");
    }

    #[test]
    fn empty_stats_are_zero() {
        let t = TrafficStats::default();
        assert_eq!((t.total(Direction::Upload), t.total(Direction::Download), t.keyframes()), (0, 0, 0));
        assert_eq!(t.per_keyframe(Direction::Upload), 0.0);
    }
}
