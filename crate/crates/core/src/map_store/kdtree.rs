//! Static 3-D KD-tree over `(id, point)` entries.
//!
//! The tree is stored implicitly: entries are permuted so that each subrange
//! `[lo, hi)` has its splitting entry at `mid = (lo + hi) / 2`, with smaller
//! coordinates on the left. Split axes are chosen by widest spread.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::Point3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Default)]
pub struct KdTree {
    entries: Vec<(u64, Point3)>,
    axes: Vec<u8>,
}

/// Result of a radius query along with the number of nodes touched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RadiusHits {
    pub ids: Vec<u64>,
    pub visited: usize,
}

impl KdTree {
    pub fn build(mut entries: Vec<(u64, Point3)>) -> Self {
        let mut axes = vec![0u8; entries.len()];
        build_range(&mut entries, &mut axes);
        Self { entries, axes }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u64, Point3)] {
        &self.entries
    }

    /// Every entry within Euclidean distance `r` (inclusive) of `center`.
    pub fn radius_search(&self, center: &Point3, r: f64) -> RadiusHits {
        let mut hits = RadiusHits::default();
        let r2 = r * r;
        self.radius_range(0, self.entries.len(), center, r2, &mut |id| {
            hits.ids.push(id);
            false
        }, &mut hits.visited);
        hits
    }

    /// Whether any entry lies within `r` of `center`; stops at the first hit.
    pub fn any_within(&self, center: &Point3, r: f64) -> bool {
        let mut found = false;
        let mut visited = 0;
        self.radius_range(0, self.entries.len(), center, r * r, &mut |_| {
            found = true;
            true
        }, &mut visited);
        found
    }

    // Returns true once the visitor asks to stop.
    fn radius_range(
        &self,
        lo: usize,
        hi: usize,
        c: &Point3,
        r2: f64,
        visit: &mut dyn FnMut(u64) -> bool,
        visited: &mut usize,
    ) -> bool {
        if hi - lo <= LEAF_SIZE {
            for (id, p) in &self.entries[lo..hi] {
                *visited += 1;
                if dist2(p, c) <= r2 && visit(*id) {
                    return true;
                }
            }
            return false;
        }
        let mid = (lo + hi) / 2;
        *visited += 1;
        let (id, p) = &self.entries[mid];
        let axis = self.axes[mid] as usize;
        if dist2(p, c) <= r2 && visit(*id) {
            return true;
        }
        let diff = c[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        if self.radius_range(near.0, near.1, c, r2, visit, visited) {
            return true;
        }
        if diff * diff <= r2 {
            return self.radius_range(far.0, far.1, c, r2, visit, visited);
        }
        false
    }

    /// The `k` nearest entries, closest first, as `(id, distance)`.
    pub fn nearest(&self, center: &Point3, k: usize) -> Vec<(u64, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.nearest_range(0, self.entries.len(), center, k, &mut heap);
        let mut out: Vec<(u64, f64)> = heap.into_iter().map(|c| (c.id, c.d2.sqrt())).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn nearest_range(&self, lo: usize, hi: usize, c: &Point3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let offer = |id: u64, d2: f64, heap: &mut BinaryHeap<Candidate>| {
            if heap.len() < k {
                heap.push(Candidate { d2, id });
            } else if let Some(worst) = heap.peek() {
                if (Candidate { d2, id }) < *worst {
                    heap.pop();
                    heap.push(Candidate { d2, id });
                }
            }
        };
        if hi - lo <= LEAF_SIZE {
            for (id, p) in &self.entries[lo..hi] {
                offer(*id, dist2(p, c), heap);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let (id, p) = &self.entries[mid];
        let axis = self.axes[mid] as usize;
        offer(*id, dist2(p, c), heap);
        let diff = c[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.nearest_range(near.0, near.1, c, k, heap);
        let bound = heap.peek().map_or(f64::INFINITY, |w| w.d2);
        if heap.len() < k || diff * diff <= bound {
            self.nearest_range(far.0, far.1, c, k, heap);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    id: u64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

#[inline]
pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

fn build_range(entries: &mut [(u64, Point3)], axes: &mut [u8]) {
    if entries.len() <= LEAF_SIZE {
        return;
    }
    let axis = widest_axis(entries);
    let mid = entries.len() / 2;
    entries.select_nth_unstable_by(mid, |a, b| a.1[axis].total_cmp(&b.1[axis]).then(a.0.cmp(&b.0)));
    axes[mid] = axis as u8;
    let (left, rest) = entries.split_at_mut(mid);
    let (left_axes, rest_axes) = axes.split_at_mut(mid);
    build_range(left, left_axes);
    build_range(&mut rest[1..], &mut rest_axes[1..]);
}

fn widest_axis(entries: &[(u64, Point3)]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (_, p) in entries {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0)
}
