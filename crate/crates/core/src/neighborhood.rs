//! Exact nearest-neighbour search over 3D sample locations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

const LEAF_SIZE: usize = 16;

fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// KD-tree over sample locations; ids are positions in the input slice.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Point>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

/// Result of a k-NN query. `capped` is set when fewer than `k` samples exist.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub items: Vec<Neighbor>,
    pub capped: bool,
}

#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn build(locations: &[Point]) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::Empty("sample locations"));
        }
        if locations.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample coordinates"));
        }
        let mut index = SpatialIndex {
            points: locations.to_vec(),
            order: (0..locations.len()).collect(),
            nodes: Vec::new(),
        };
        index.split(0, locations.len());
        Ok(index)
    }

    fn split(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.split(start, mid);
        let right = self.split(mid, end);
        self.nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn location(&self, id: usize) -> Point {
        self.points[id]
    }

    pub fn locations(&self) -> &[Point] {
        &self.points
    }

    /// The `k` nearest samples to `u`, ascending by distance, ties by id.
    pub fn knn(&self, u: &Point, k: usize) -> Neighbors {
        let capped = k > self.points.len();
        let k = k.min(self.points.len());
        if k == 0 {
            return Neighbors {
                items: Vec::new(),
                capped,
            };
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, u, k, f64::INFINITY, &mut heap);
        Neighbors {
            items: finish(heap),
            capped,
        }
    }

    /// Up to `max` nearest samples within `radius` (inclusive).
    pub fn within(&self, u: &Point, radius: f64, max: usize) -> Vec<Neighbor> {
        if max == 0 {
            return Vec::new();
        }
        let max = max.min(self.points.len());
        let mut heap = BinaryHeap::with_capacity(max + 1);
        self.search(0, u, max, radius * radius, &mut heap);
        finish(heap)
    }

    fn search(&self, node: usize, u: &Point, k: usize, bound: f64, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    let d2 = dist2(u, &self.points[id]);
                    if d2 > bound {
                        continue;
                    }
                    let cand = Candidate { d2, id };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if heap.peek().is_some_and(|worst| cand < *worst) {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = u[axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, u, k, bound, heap);
                let plane = delta * delta;
                let worst = if heap.len() < k {
                    bound
                } else {
                    heap.peek().map_or(bound, |c| c.d2)
                };
                // `<=` keeps equal-distance candidates with smaller ids reachable
                if plane <= worst {
                    self.search(far, u, k, bound, heap);
                }
            }
        }
    }
}

fn finish(heap: BinaryHeap<Candidate>) -> Vec<Neighbor> {
    heap.into_sorted_vec()
        .into_iter()
        .map(|c| Neighbor {
            id: c.id,
            distance: c.d2.sqrt(),
        })
        .collect()
}

pub fn build_index(locations: &[Point]) -> Result<SpatialIndex> {
    SpatialIndex::build(locations)
}
