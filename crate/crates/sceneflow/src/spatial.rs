//! Nearest-neighbor and radius-count queries over a point cloud.
//!
//! [`NeighborIndex`] is an axis-aligned KD-tree whose query results are
//! exactly equal (index and squared distance) to a brute-force linear scan,
//! with ties broken by lowest point index. Subtrees are pruned only when the
//! splitting plane is strictly farther than the current best, so an
//! equal-distance point with a lower index on the far side is never missed.
//! The radius test is inclusive, which makes a zero radius well-defined.
//!
//! The index is immutable after build; concurrent read queries are safe.
//! It is rebuilt per target cloud per scene pair, never updated in place.

use crate::error::{Error, Result};
use crate::types::{PointCloud, Vec3};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Immutable spatial index over one cloud's positions.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vec3>,
    /// Permutation of point indices; leaves reference contiguous ranges.
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: u32,
}

impl NeighborIndex {
    /// Builds the index over the cloud's positions (single-threaded).
    pub fn build(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.positions().to_vec())
    }

    pub(crate) fn from_points(points: Vec<Vec3>) -> Self {
        assert!(!points.is_empty(), "cannot index an empty point set");
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = build_node(&points, &mut order, 0, points.len(), &mut nodes);
        Self {
            points,
            order,
            nodes,
            root,
        }
    }

    /// Number of indexed points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Position of the indexed point `i` (original cloud order).
    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// Returns the index of the closest point and its squared Euclidean
    /// distance; ties are broken by lowest point index.
    pub fn nearest(&self, query: Vec3) -> Result<(usize, f64)> {
        if !(query.x.is_finite() && query.y.is_finite() && query.z.is_finite()) {
            return Err(Error::NonFiniteQuery);
        }
        Ok(self.nearest_raw(query))
    }

    pub(crate) fn nearest_raw(&self, query: Vec3) -> (usize, f64) {
        let mut best = (u32::MAX, f64::INFINITY);
        self.nearest_rec(self.root, query, &mut best);
        (best.0 as usize, best.1)
    }

    fn nearest_rec(&self, node: u32, query: Vec3, best: &mut (u32, f64)) {
        match &self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start as usize..*end as usize] {
                    let d2 = (self.points[i as usize] - query).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis as usize] - value;
                let (near, far) = if delta < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.nearest_rec(near, query, best);
                // Equal plane distance must still descend: the far side can
                // hold an equal-distance point with a lower index.
                if delta * delta <= best.1 {
                    self.nearest_rec(far, query, best);
                }
            }
        }
    }

    /// Counts points within `radius` of `query`, boundary inclusive.
    pub fn count_within_radius(&self, query: Vec3, radius: f64) -> Result<usize> {
        if !(query.x.is_finite() && query.y.is_finite() && query.z.is_finite()) {
            return Err(Error::NonFiniteQuery);
        }
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::InvalidRadius(radius));
        }
        Ok(self.count_rec(self.root, query, radius * radius))
    }

    fn count_rec(&self, node: u32, query: Vec3, r2: f64) -> usize {
        match &self.nodes[node as usize] {
            Node::Leaf { start, end } => self.order[*start as usize..*end as usize]
                .iter()
                .filter(|&&i| (self.points[i as usize] - query).norm_squared() <= r2)
                .count(),
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis as usize] - value;
                let (near, far) = if delta < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                let mut count = self.count_rec(near, query, r2);
                if delta * delta <= r2 {
                    count += self.count_rec(far, query, r2);
                }
                count
            }
        }
    }
}

fn build_node(
    points: &[Vec3],
    order: &mut [u32],
    offset: usize,
    len: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let range = &mut order[offset..offset + len];
    if len <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + len) as u32,
        });
        return (nodes.len() - 1) as u32;
    }

    // Split along the axis of largest extent; fall back to a leaf when all
    // points coincide.
    let mut lo = points[range[0] as usize];
    let mut hi = lo;
    for &i in range.iter() {
        let p = points[i as usize];
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    let extent = hi - lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    if extent[axis] == 0.0 {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + len) as u32,
        });
        return (nodes.len() - 1) as u32;
    }

    let mid = len / 2;
    range.select_nth_unstable_by(mid, |&a, &b| {
        let ca = points[a as usize][axis];
        let cb = points[b as usize][axis];
        ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
    });
    let value = points[range[mid] as usize][axis];

    let left = build_node(points, order, offset, mid, nodes);
    let right = build_node(points, order, offset + mid, len - mid, nodes);
    nodes.push(Node::Split {
        axis: axis as u8,
        value,
        left,
        right,
    });
    (nodes.len() - 1) as u32
}

/// Brute-force reference: argmin of squared distance with lowest-index ties.
/// Kept as the oracle the tree is tested against.
pub fn linear_scan_nearest(points: &[Vec3], query: Vec3) -> (usize, f64) {
    let mut best_i = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - query).norm_squared();
        if d2 < best_d2 {
            best_i = i;
            best_d2 = d2;
        }
    }
    (best_i, best_d2)
}

/// Brute-force inclusive radius count, the oracle for `count_within_radius`.
pub fn linear_scan_count(points: &[Vec3], query: Vec3, radius: f64) -> usize {
    let r2 = radius * radius;
    points
        .iter()
        .filter(|p| (*p - query).norm_squared() <= r2)
        .count()
}
