//! Exact 3D nearest-neighbor queries over a fixed point set.
//!
//! Median-split kd-tree. Results are bit-identical to a brute-force scan:
//! squared distances use the same arithmetic and ties resolve to the
//! lowest point index.

use nalgebra::Vector3;

pub fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

const LEAF_SIZE: usize = 16;

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

pub struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    indices: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Vector3<f64>]) -> KdTree<'a> {
        let mut indices: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::new();
        let n = indices.len();
        let root = if n == 0 {
            nodes.push(Node::Leaf { start: 0, end: 0 });
            0
        } else {
            build_node(points, &mut indices, &mut nodes, 0, n)
        };
        KdTree {
            points,
            indices,
            nodes,
            root,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point to `query`.
    /// Ties break to the lowest index. Panics on an empty tree.
    pub fn nearest(&self, query: &Vector3<f64>) -> (usize, f64) {
        assert!(!self.is_empty(), "nearest() on empty point set");
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(self.root, query, &mut best);
        best
    }

    fn nearest_rec(&self, node: usize, query: &Vector3<f64>, best: &mut (usize, f64)) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.indices[*start..*end] {
                    let idx = idx as usize;
                    let d2 = dist2(query, &self.points[idx]);
                    if d2 < best.1 || (d2 == best.1 && idx < best.0) {
                        *best = (idx, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                let (near, far) = if delta <= 0.0 { (*left, *right) } else { (*right, *left) };
                self.nearest_rec(near, query, best);
                if delta * delta <= best.1 {
                    self.nearest_rec(far, query, best);
                }
            }
        }
    }

    /// All point indices within `radius` (inclusive) of `query`, in
    /// ascending index order.
    pub fn within(&self, query: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.is_empty() {
            self.within_rec(self.root, query, radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn within_rec(&self, node: usize, query: &Vector3<f64>, r2: f64, out: &mut Vec<usize>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.indices[*start..*end] {
                    let idx = idx as usize;
                    if dist2(query, &self.points[idx]) <= r2 {
                        out.push(idx);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                if delta <= 0.0 || delta * delta <= r2 {
                    self.within_rec(*left, query, r2, out);
                }
                if delta > 0.0 || delta * delta <= r2 {
                    self.within_rec(*right, query, r2, out);
                }
            }
        }
    }
}

fn build_node(
    points: &[Vector3<f64>],
    indices: &mut [u32],
    nodes: &mut Vec<Node>,
    offset: usize,
    len: usize,
) -> usize {
    if len <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + len,
        });
        return nodes.len() - 1;
    }

    // Split the widest axis at the median.
    let slice = &mut indices[..len];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in slice.iter() {
        lo = lo.inf(&points[i as usize]);
        hi = hi.sup(&points[i as usize]);
    }
    let extents = hi - lo;
    let axis = if extents.x >= extents.y && extents.x >= extents.z {
        0
    } else if extents.y >= extents.z {
        1
    } else {
        2
    };

    let mid = len / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let value = points[slice[mid] as usize][axis];

    // Recurse; children own disjoint index ranges.
    let (left_slice, right_slice) = indices.split_at_mut(mid);
    let left = build_node(points, left_slice, nodes, offset, mid);
    let right = build_node(points, right_slice, nodes, offset + mid, len - mid);
    nodes.push(Node::Split {
        axis,
        value,
        left,
        right,
    });
    nodes.len() - 1
}

/// Brute-force nearest neighbor with the same tie-break; the oracle the
/// tree is validated against.
pub fn nearest_brute(points: &[Vector3<f64>], query: &Vector3<f64>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = dist2(query, p);
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best
}
