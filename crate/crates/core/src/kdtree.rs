//! Static kd-tree over 3D points; the spatial index used for nearest-neighbor
//! and k-NN queries throughout the system.
//!
//! Queries are deterministic for a fixed input order: equal distances are
//! broken by the lower point index.

use alloc::vec::Vec;
use nalgebra::Vector3;
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

#[derive(Debug, Clone, Copy)]
struct Node {
    idx: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Immutable nearest-neighbor index over a fixed point array.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: i32,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    idx: u32,
}

impl Candidate {
    #[inline]
    fn beats(&self, other: &Candidate) -> bool {
        self.d2 < other.d2 || (self.d2 == other.d2 && self.idx < other.idx)
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        // Max-heap order: the "largest" candidate is the worst one.
        if self.beats(other) {
            core::cmp::Ordering::Less
        } else if other.beats(self) {
            core::cmp::Ordering::Greater
        } else {
            core::cmp::Ordering::Equal
        }
    }
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        let mut indices: Vec<u32> = (0..points.len() as u32).collect();
        tree.root = tree.build_rec(&mut indices);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> &Vector3<f64> {
        &self.points[idx]
    }

    fn build_rec(&mut self, indices: &mut [u32]) -> i32 {
        if indices.is_empty() {
            return -1;
        }
        let axis = self.widest_axis(indices);
        let mid = indices.len() / 2;
        let points = &self.points;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            let ka = (points[a as usize][axis as usize], a);
            let kb = (points[b as usize][axis as usize], b);
            ka.partial_cmp(&kb).expect("finite coordinates")
        });
        let idx = indices[mid];
        let node_id = self.nodes.len() as i32;
        self.nodes.push(Node {
            idx,
            axis,
            left: -1,
            right: -1,
        });
        let (lo, rest) = indices.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_rec(lo);
        let right = self.build_rec(hi);
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }

    fn widest_axis(&self, indices: &[u32]) -> u8 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in indices {
            let p = &self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut best = 0;
        let mut best_span = hi[0] - lo[0];
        for a in 1..3 {
            let span = hi[a] - lo[a];
            if span > best_span {
                best = a;
                best_span = span;
            }
        }
        best as u8
    }

    /// Index and Euclidean distance of the nearest point, or `None` if empty.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.root < 0 {
            return None;
        }
        let mut best = Candidate {
            d2: f64::INFINITY,
            idx: u32::MAX,
        };
        self.nearest_rec(self.root, query, &mut best);
        Some((best.idx as usize, best.d2.sqrt()))
    }

    fn nearest_rec(&self, node_id: i32, query: &Vector3<f64>, best: &mut Candidate) {
        let node = self.nodes[node_id as usize];
        let p = &self.points[node.idx as usize];
        let cand = Candidate {
            d2: (p - query).norm_squared(),
            idx: node.idx,
        };
        if cand.beats(best) {
            *best = cand;
        }
        let diff = query[node.axis as usize] - p[node.axis as usize];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if near >= 0 {
            self.nearest_rec(near, query, best);
        }
        if far >= 0 && diff * diff <= best.d2 {
            self.nearest_rec(far, query, best);
        }
    }

    /// The `min(k, len)` nearest points, sorted by nondecreasing distance
    /// (ties by lower index). Returns `(index, distance)` pairs.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut heap: alloc::collections::BinaryHeap<Candidate> =
            alloc::collections::BinaryHeap::with_capacity(k + 1);
        if self.root >= 0 && k > 0 {
            self.knn_rec(self.root, query, k, &mut heap);
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort_by(|a, b| a.cmp(b));
        out.iter()
            .map(|c| (c.idx as usize, c.d2.sqrt()))
            .collect()
    }

    fn knn_rec(
        &self,
        node_id: i32,
        query: &Vector3<f64>,
        k: usize,
        heap: &mut alloc::collections::BinaryHeap<Candidate>,
    ) {
        let node = self.nodes[node_id as usize];
        let p = &self.points[node.idx as usize];
        let cand = Candidate {
            d2: (p - query).norm_squared(),
            idx: node.idx,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand.beats(heap.peek().expect("nonempty")) {
            heap.pop();
            heap.push(cand);
        }
        let diff = query[node.axis as usize] - p[node.axis as usize];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if near >= 0 {
            self.knn_rec(near, query, k, heap);
        }
        let visit_far = heap.len() < k || diff * diff <= heap.peek().expect("nonempty").d2;
        if far >= 0 && visit_far {
            self.knn_rec(far, query, k, heap);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn brute_knn(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .collect();
        all.sort_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap());
        all.truncate(k);
        all.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    #[test]
    fn matches_brute_force() {
        let points = random_points(200, 7);
        let tree = KdTree::build(&points);
        let queries = random_points(50, 8);
        for q in &queries {
            for k in [1usize, 4, 20] {
                let got = tree.knn(q, k);
                let want = brute_knn(&points, q, k);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(want.iter()) {
                    assert_eq!(g.0, w.0);
                    assert!((g.1 - w.1).abs() < 1e-12);
                }
            }
            let (ni, nd) = tree.nearest(q).unwrap();
            let want = brute_knn(&points, q, 1)[0];
            assert_eq!(ni, want.0);
            assert!((nd - want.1).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_returns_min_k_len() {
        let points = random_points(5, 3);
        let tree = KdTree::build(&points);
        assert_eq!(tree.knn(&Vector3::zeros(), 10).len(), 5);
        assert_eq!(tree.knn(&Vector3::zeros(), 3).len(), 3);
    }

    #[test]
    fn ties_break_by_lower_index() {
        // Duplicate points: queries must return the lowest index first.
        let p = Vector3::new(0.5, 0.5, 0.5);
        let points = vec![p, p, p, Vector3::new(2.0, 0.0, 0.0)];
        let tree = KdTree::build(&points);
        let got = tree.knn(&Vector3::zeros(), 3);
        assert_eq!(
            got.iter().map(|c| c.0).collect::<Vec<_>>(),
            vec![0usize, 1, 2]
        );
        assert_eq!(tree.nearest(&Vector3::zeros()).unwrap().0, 0);
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::build(&[]);
        assert!(tree.nearest(&Vector3::zeros()).is_none());
        assert!(tree.knn(&Vector3::zeros(), 4).is_empty());
    }

    #[test]
    fn results_sorted_by_distance() {
        let points = random_points(100, 11);
        let tree = KdTree::build(&points);
        let res = tree.knn(&Vector3::new(0.1, 0.2, 0.3), 15);
        for w in res.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }
}
