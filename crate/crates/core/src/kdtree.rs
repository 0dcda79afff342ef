//! Static k-d tree over 3D points.
//!
//! All queries order candidates by `(squared distance, index)` so results
//! are identical to a brute-force scan, including tie-breaking by the
//! lowest point index.

use crate::geometry::Vec3;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, Default)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Caller-visible id for each stored point.
    ids: Vec<usize>,
    /// Permutation of positions into `points`, grouped by leaf.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.id.cmp(&other.id))
    }
}

struct HeapItem(Neighbor);

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.0.key_cmp(&other.0) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.key_cmp(&other.0)
    }
}

impl KdTree {
    /// Tree whose ids are the positions in `points`.
    pub fn new(points: Vec<Vec3>) -> Self {
        let ids = (0..points.len()).collect();
        Self::with_ids(points, ids)
    }

    /// Tree over `points` reporting `ids[i]` for `points[i]`.
    pub fn with_ids(points: Vec<Vec3>, ids: Vec<usize>) -> Self {
        assert_eq!(points.len(), ids.len());
        let mut tree = Self { order: (0..points.len()).collect(), points, ids, nodes: Vec::new() };
        if !tree.points.is_empty() {
            let n = tree.points.len();
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, position: usize) -> &Vec3 {
        &self.points[position]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Nearest point; ties resolved to the lowest id.
    pub fn nearest(&self, q: &Vec3) -> Option<Neighbor> {
        self.nearest_counted(q).0
    }

    /// Nearest point plus the number of points whose distance was evaluated.
    pub fn nearest_counted(&self, q: &Vec3) -> (Option<Neighbor>, usize) {
        if self.is_empty() {
            return (None, 0);
        }
        let mut best: Option<Neighbor> = None;
        let mut visited = 0;
        self.nearest_rec(0, q, &mut best, &mut visited);
        (best, visited)
    }

    fn nearest_rec(&self, node: usize, q: &Vec3, best: &mut Option<Neighbor>, visited: &mut usize) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    *visited += 1;
                    let cand = Neighbor { id: self.ids[i], dist2: (self.points[i] - q).norm_squared() };
                    if best.is_none_or(|b| cand.key_cmp(&b) == Ordering::Less) {
                        *best = Some(cand);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best, visited);
                if best.is_none_or(|b| diff * diff <= b.dist2) {
                    self.nearest_rec(far, q, best, visited);
                }
            }
        }
    }

    /// The `k` nearest points, sorted by `(distance, id)`.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<Neighbor> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, q, k, &mut heap);
        let mut out: Vec<Neighbor> = heap.into_iter().map(|h| h.0).collect();
        out.sort_by(Neighbor::key_cmp);
        out
    }

    fn knn_rec(&self, node: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<HeapItem>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor { id: self.ids[i], dist2: (self.points[i] - q).norm_squared() };
                    if heap.len() < k {
                        heap.push(HeapItem(cand));
                    } else if cand.key_cmp(&heap.peek().unwrap().0) == Ordering::Less {
                        heap.pop();
                        heap.push(HeapItem(cand));
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0.dist2 {
                    self.knn_rec(far, q, k, heap);
                }
            }
        }
    }

    /// Every point with `‖p − q‖ ≤ radius`, sorted by id.
    pub fn within_radius(&self, q: &Vec3, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.is_empty() {
            self.radius_rec(0, q, radius * radius, &mut out);
        }
        out.sort_by_key(|n| n.id);
        out
    }

    fn radius_rec(&self, node: usize, q: &Vec3, r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let dist2 = (self.points[i] - q).norm_squared();
                    if dist2 <= r2 {
                        out.push(Neighbor { id: self.ids[i], dist2 });
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.radius_rec(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_rec(far, q, r2, out);
                }
            }
        }
    }
}
