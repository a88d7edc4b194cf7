use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, ArrayView1};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Static kd-tree for exact k-nearest-neighbor queries under squared
/// Euclidean distance.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Array2<f64>,
    /// Point indices, permuted so each leaf owns a contiguous range.
    index: Vec<usize>,
    root: Node,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl KdTree {
    pub fn build(points: Array2<f64>) -> Self {
        let mut index: Vec<usize> = (0..points.nrows()).collect();
        let n = index.len();
        let root = Self::build_node(&points, &mut index, 0, n);
        Self { points, index, root }
    }

    fn build_node(points: &Array2<f64>, index: &mut [usize], start: usize, end: usize) -> Node {
        if end - start <= LEAF_SIZE || points.ncols() == 0 {
            return Node::Leaf { start, end };
        }
        let slice = &mut index[start..end];
        let dim = (0..points.ncols())
            .map(|d| {
                let (lo, hi) = slice
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(points[[i, d]]), hi.max(points[[i, d]])));
                (d, hi - lo)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(d, _)| d)
            .expect("at least one column");
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| points[[a, dim]].total_cmp(&points[[b, dim]]));
        let value = points[[slice[mid], dim]];
        let split = start + mid;
        Node::Split {
            dim,
            value,
            left: Box::new(Self::build_node(points, index, start, split)),
            right: Box::new(Self::build_node(points, index, split, end)),
        }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    /// The `k` nearest points as `(squared distance, row)`, closest first.
    /// Ties are broken by row index.
    pub fn nearest(&self, query: ArrayView1<'_, f64>, k: usize) -> Vec<(f64, usize)> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, query, k, &mut heap);
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|Candidate(d, i)| (d, i)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn search(&self, node: &Node, q: ArrayView1<'_, f64>, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.index[*start..*end] {
                    let d: f64 = self.points.row(i).iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    let cand = Candidate(d, i);
                    if heap.len() < k {
                        heap.push(cand);
                    } else if heap.peek().is_some_and(|worst| cand < *worst) {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                if heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.0) {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn matches_brute_force() {
        let mut rng = SeedStream::new(3).rng();
        let pts = Array2::from_shape_fn((500, 3), |_| StandardNormal.sample(&mut rng));
        let tree = KdTree::build(pts.clone());
        for _ in 0..50 {
            let q = ndarray::Array1::from_shape_fn(3, |_| StandardNormal.sample(&mut rng));
            let mut brute: Vec<(f64, usize)> = (0..500)
                .map(|i| (pts.row(i).iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
                .collect();
            brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            assert_eq!(tree.nearest(q.view(), 7), brute[..7].to_vec());
        }
        assert_eq!(tree.nearest(pts.row(0), 1000).len(), 500);
    }
}
