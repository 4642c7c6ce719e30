//! Exact k-nearest-neighbor search and the majority-vote rule.
//!
//! Neighbors are ordered by `(squared distance, original index)`, so ties in
//! distance resolve to the point inserted first. Both index structures use
//! the same squared-distance routine and return identical lists.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::{Label, TrainingSet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KnnError {
    #[error("cannot build an index over zero points")]
    EmptyInput,
    #[error("points have inconsistent dimensions")]
    MixedDimensions,
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k = {k} out of range for {n} points")]
    KOutOfRange { k: usize, n: usize },
    #[error("training set is empty")]
    EmptyTraining,
    #[error("index holds {index} points but training set has {training}")]
    SizeMismatch { index: usize, training: usize },
}

pub type Result<T> = std::result::Result<T, KnnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexKind {
    BruteForce,
    KdTree,
}

impl IndexKind {
    /// Faster structure for `n` points, `k` neighbors, dimension `d`.
    pub fn suggest(n: usize, k: usize, d: usize) -> Self {
        if n <= 64 || d > 12 || 4 * k >= n {
            IndexKind::BruteForce
        } else {
            IndexKind::KdTree
        }
    }
}

const LEAF_SIZE: usize = 16;

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        s += t * t;
    }
    s
}

/// One entry of a neighbor list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    end: usize,
    /// Child node ids; `usize::MAX` marks a leaf.
    left: usize,
    right: usize,
}

#[derive(Debug, Clone)]
struct KdTree {
    /// Original indices in tree order.
    order: Vec<usize>,
    /// Coordinates in tree order.
    coords: Vec<f64>,
    nodes: Vec<Node>,
    /// Per-node bounding box: `d` minima then `d` maxima.
    bounds: Vec<f64>,
}

impl KdTree {
    fn build(points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::new();
        let mut bounds = Vec::new();
        Self::build_node(points, dim, &mut order, 0, n, &mut nodes, &mut bounds);
        let mut coords = Vec::with_capacity(points.len());
        for &i in &order {
            coords.extend_from_slice(&points[i * dim..(i + 1) * dim]);
        }
        Self {
            order,
            coords,
            nodes,
            bounds,
        }
    }

    fn build_node(
        points: &[f64],
        dim: usize,
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<Node>,
        bounds: &mut Vec<f64>,
    ) -> usize {
        let id = nodes.len();
        nodes.push(Node {
            start,
            end,
            left: usize::MAX,
            right: usize::MAX,
        });
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &order[start..end] {
            for j in 0..dim {
                let v = points[i * dim + j];
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        bounds.extend_from_slice(&lo);
        bounds.extend_from_slice(&hi);

        if end - start <= LEAF_SIZE {
            return id;
        }
        let axis = (0..dim)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] <= lo[axis] {
            // all points coincide
            return id;
        }
        let mid = start + (end - start) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a * dim + axis]
                .total_cmp(&points[b * dim + axis])
                .then(a.cmp(&b))
        });
        let left = Self::build_node(points, dim, order, start, mid, nodes, bounds);
        let right = Self::build_node(points, dim, order, mid, end, nodes, bounds);
        nodes[id].left = left;
        nodes[id].right = right;
        id
    }

    fn box_distance(&self, node: usize, z: &[f64]) -> f64 {
        let d = z.len();
        let base = node * 2 * d;
        let mut s = 0.0;
        for j in 0..d {
            let lo = self.bounds[base + j];
            let hi = self.bounds[base + d + j];
            let t = if z[j] < lo {
                z[j] - lo
            } else if z[j] > hi {
                z[j] - hi
            } else {
                0.0
            };
            s += t * t;
        }
        s
    }

    fn search(&self, node: usize, z: &[f64], k: usize, heap: &mut BinaryHeap<Neighbor>) {
        let n = &self.nodes[node];
        if n.left == usize::MAX {
            let d = z.len();
            for pos in n.start..n.end {
                let cand = Neighbor {
                    index: self.order[pos],
                    dist2: squared_distance(z, &self.coords[pos * d..(pos + 1) * d]),
                };
                if heap.len() < k {
                    heap.push(cand);
                } else if cand < *heap.peek().expect("heap is full") {
                    heap.pop();
                    heap.push(cand);
                }
            }
            return;
        }
        let dl = self.box_distance(n.left, z);
        let dr = self.box_distance(n.right, z);
        let (first, d_first, second, d_second) = if dl <= dr {
            (n.left, dl, n.right, dr)
        } else {
            (n.right, dr, n.left, dl)
        };
        // equal distance must still be visited: a tie may carry a smaller index
        if heap.len() < k || d_first <= heap.peek().expect("heap is full").dist2 {
            self.search(first, z, k, heap);
        }
        if heap.len() < k || d_second <= heap.peek().expect("heap is full").dist2 {
            self.search(second, z, k, heap);
        }
    }
}

/// Reusable buffers for repeated queries.
#[derive(Debug, Default, Clone)]
pub struct QueryScratch {
    heap: BinaryHeap<Neighbor>,
    all: Vec<Neighbor>,
    out: Vec<Neighbor>,
}

/// Immutable nearest-neighbor index over a multiset of points.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<f64>,
    dim: usize,
    kind: IndexKind,
    tree: Option<KdTree>,
}

impl NeighborIndex {
    /// Builds over row-major `points` of dimension `dim`.
    pub fn build(points: &[f64], dim: usize, kind: IndexKind) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(KnnError::MixedDimensions);
        }
        if points.is_empty() {
            return Err(KnnError::EmptyInput);
        }
        let tree = match kind {
            IndexKind::BruteForce => None,
            IndexKind::KdTree => Some(KdTree::build(points, dim)),
        };
        Ok(Self {
            points: points.to_vec(),
            dim,
            kind,
            tree,
        })
    }

    /// Builds from a list of vectors, rejecting mixed dimensions.
    pub fn from_rows(rows: &[Vec<f64>], kind: IndexKind) -> Result<Self> {
        let dim = rows.first().ok_or(KnnError::EmptyInput)?.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(KnnError::MixedDimensions);
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::build(&flat, dim, kind)
    }

    pub fn for_training(training: &TrainingSet, kind: IndexKind) -> Result<Self> {
        if training.is_empty() {
            return Err(KnnError::EmptyTraining);
        }
        Self::build(training.points(), training.dim(), kind)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    fn check_query(&self, z: &[f64], k: usize) -> Result<()> {
        if z.len() != self.dim {
            return Err(KnnError::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(KnnError::KOutOfRange { k, n: self.len() });
        }
        Ok(())
    }

    /// The `k` nearest neighbors of `z`, ascending by `(distance, index)`.
    /// The returned slice lives in `scratch`.
    pub fn query_into<'s>(
        &self,
        z: &[f64],
        k: usize,
        scratch: &'s mut QueryScratch,
    ) -> Result<&'s [Neighbor]> {
        self.check_query(z, k)?;
        scratch.out.clear();
        match &self.tree {
            None => {
                scratch.all.clear();
                scratch.all.extend(
                    self.points
                        .chunks_exact(self.dim)
                        .enumerate()
                        .map(|(index, p)| Neighbor {
                            index,
                            dist2: squared_distance(z, p),
                        }),
                );
                if k < scratch.all.len() {
                    scratch.all.select_nth_unstable(k - 1);
                    scratch.all.truncate(k);
                }
                scratch.all.sort_unstable();
                std::mem::swap(&mut scratch.all, &mut scratch.out);
            }
            Some(tree) => {
                scratch.heap.clear();
                tree.search(0, z, k, &mut scratch.heap);
                scratch.out.extend(scratch.heap.drain());
                scratch.out.sort_unstable();
            }
        }
        Ok(&scratch.out)
    }

    /// Training indices of the `k` nearest points to `z`.
    pub fn k_nearest(&self, z: &[f64], k: usize) -> Result<Vec<usize>> {
        let mut scratch = QueryScratch::default();
        Ok(self
            .query_into(z, k, &mut scratch)?
            .iter()
            .map(|n| n.index)
            .collect())
    }
}

pub fn build_index(points: &[Vec<f64>], kind: IndexKind) -> Result<NeighborIndex> {
    NeighborIndex::from_rows(points, kind)
}

pub fn k_nearest(index: &NeighborIndex, z: &[f64], k: usize) -> Result<Vec<usize>> {
    index.k_nearest(z, k)
}

/// The vote rule: X when at least half of the `k` votes are X.
#[inline]
pub fn majority_is_x(x_votes: usize, k: usize) -> bool {
    2 * x_votes >= k
}

/// Classifies `z` by the `k` nearest training points.
pub fn classify_knn(
    training: &TrainingSet,
    index: &NeighborIndex,
    z: &[f64],
    k: usize,
) -> Result<Label> {
    if training.is_empty() {
        return Err(KnnError::EmptyTraining);
    }
    if index.len() != training.len() {
        return Err(KnnError::SizeMismatch {
            index: index.len(),
            training: training.len(),
        });
    }
    let labels = training.labels();
    let nearest = index.k_nearest(z, k)?;
    let votes = nearest.iter().filter(|&&i| labels[i] == Label::X).count();
    Ok(if majority_is_x(votes, k) {
        Label::X
    } else {
        Label::Y
    })
}

/// Writes the running count of X labels over an ordered neighbor list:
/// `out[j]` is the number of X among the first `j + 1` neighbors.
pub fn cumulative_x_votes(neighbors: &[Neighbor], labels: &[Label], out: &mut Vec<u32>) {
    out.clear();
    let mut c = 0u32;
    for n in neighbors {
        if labels[n.index] == Label::X {
            c += 1;
        }
        out.push(c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SampleModel;
    use proptest::prelude::*;

    fn line_set(xs: &[f64], labels: &[Label]) -> TrainingSet {
        TrainingSet::new(xs.to_vec(), 1, labels.to_vec(), SampleModel::Binomial, 0, 0).unwrap()
    }

    fn oracle(points: &[f64], dim: usize, z: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = points
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, p)| (squared_distance(z, p), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn single_point_index() {
        for kind in [IndexKind::BruteForce, IndexKind::KdTree] {
            let idx = NeighborIndex::build(&[1.0, 2.0], 2, kind).unwrap();
            assert_eq!(idx.len(), 1);
            assert_eq!(idx.k_nearest(&[0.0, 0.0], 1).unwrap(), vec![0]);
        }
    }

    #[test]
    fn build_errors() {
        assert_eq!(
            NeighborIndex::build(&[], 2, IndexKind::KdTree).unwrap_err(),
            KnnError::EmptyInput
        );
        assert_eq!(
            NeighborIndex::from_rows(&[vec![0.0], vec![1.0, 2.0]], IndexKind::BruteForce).unwrap_err(),
            KnnError::MixedDimensions
        );
        let idx = NeighborIndex::build(&[0.0, 1.0], 1, IndexKind::BruteForce).unwrap();
        assert_eq!(idx.k_nearest(&[0.0], 3).unwrap_err(), KnnError::KOutOfRange { k: 3, n: 2 });
        assert_eq!(idx.k_nearest(&[0.0], 0).unwrap_err(), KnnError::KOutOfRange { k: 0, n: 2 });
    }

    #[test]
    fn ordering_and_ties() {
        for kind in [IndexKind::BruteForce, IndexKind::KdTree] {
            let idx = NeighborIndex::build(&[0.0, 1.0, 2.0], 1, kind).unwrap();
            assert_eq!(idx.k_nearest(&[0.9], 2).unwrap(), vec![1, 0]);
            let pts = [5.0, 6.0, 7.0, -1.0, 9.0, 10.0, 11.0, 1.0];
            let idx = NeighborIndex::build(&pts, 1, kind).unwrap();
            assert_eq!(idx.k_nearest(&[0.0], 1).unwrap(), vec![3]);
            assert_eq!(idx.k_nearest(&[0.0], 2).unwrap(), vec![3, 7]);
        }
    }

    #[test]
    fn duplicates_retrievable() {
        let mut pts = vec![0.5; 40];
        pts.push(3.0);
        for kind in [IndexKind::BruteForce, IndexKind::KdTree] {
            let idx = NeighborIndex::build(&pts, 1, kind).unwrap();
            let all = idx.k_nearest(&[0.5], 41).unwrap();
            assert_eq!(all, (0..41).collect::<Vec<_>>());
        }
    }

    #[test]
    fn classify_examples() {
        let t = line_set(&[0.0, 1.0], &[Label::X, Label::Y]);
        let idx = NeighborIndex::for_training(&t, IndexKind::BruteForce).unwrap();
        assert_eq!(classify_knn(&t, &idx, &[0.2], 1).unwrap(), Label::X);
        // 1 of 2 votes is exactly half
        assert_eq!(classify_knn(&t, &idx, &[0.2], 2).unwrap(), Label::X);
        assert_eq!(classify_knn(&t, &idx, &[0.9], 1).unwrap(), Label::Y);
        assert!(classify_knn(&t, &idx, &[0.2], 3).is_err());
    }

    #[test]
    fn full_k_is_global_majority() {
        let labels = [Label::Y, Label::X, Label::Y, Label::Y, Label::X];
        let t = line_set(&[0.0, 1.0, 2.0, 3.0, 4.0], &labels);
        let idx = NeighborIndex::for_training(&t, IndexKind::KdTree).unwrap();
        for z in [-10.0, 0.0, 2.5, 40.0] {
            assert_eq!(classify_knn(&t, &idx, &[z], 5).unwrap(), Label::Y);
        }
    }

    #[test]
    fn threshold_exhaustive_small_fixtures() {
        // every labeling of up to 8 points, every k, against a direct count
        for n in 1..=8usize {
            let xs: Vec<f64> = (0..n).map(|i| i as f64 * 0.7 - 1.0).collect();
            for mask in 0..(1u32 << n) {
                let labels: Vec<Label> = (0..n)
                    .map(|i| if mask >> i & 1 == 1 { Label::X } else { Label::Y })
                    .collect();
                let t = line_set(&xs, &labels);
                let idx = NeighborIndex::for_training(&t, IndexKind::BruteForce).unwrap();
                for k in 1..=n {
                    let z = [0.13];
                    let near = oracle(&xs, 1, &z, k);
                    let x = near.iter().filter(|&&i| labels[i] == Label::X).count();
                    let want = if 2 * x >= k { Label::X } else { Label::Y };
                    assert_eq!(classify_knn(&t, &idx, &z, k).unwrap(), want);
                }
            }
        }
    }

    fn flat_points(d: usize) -> impl Strategy<Value = Vec<f64>> {
        // coarse lattice values to force many distance ties
        proptest::collection::vec((-6i32..6).prop_map(|v| v as f64 * 0.5), d..(60 * d))
            .prop_map(move |mut v| {
                v.truncate(v.len() / d * d);
                v
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn kdtree_matches_bruteforce(
            d in 1usize..4,
            pts in flat_points(3),
            z in proptest::collection::vec(-3.5f64..3.5, 3),
            k_frac in 0.0f64..1.0,
        ) {
            let dim = d;
            let n = pts.len() / 3;
            prop_assume!(n >= 1);
            let pts = pts[..n * dim].to_vec();
            let z = &z[..dim];
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let kd = NeighborIndex::build(&pts, dim, IndexKind::KdTree).unwrap();
            let bf = NeighborIndex::build(&pts, dim, IndexKind::BruteForce).unwrap();
            let want = oracle(&pts, dim, z, k);
            prop_assert_eq!(kd.k_nearest(z, k).unwrap(), want.clone());
            prop_assert_eq!(bf.k_nearest(z, k).unwrap(), want);
        }

        #[test]
        fn classification_translation_invariant(
            pts in proptest::collection::vec(-3.0f64..3.0, 2..40),
            mask in proptest::collection::vec(any::<bool>(), 40),
            shift in -100.0f64..100.0,
            z in -3.0f64..3.0,
            k_frac in 0.0f64..1.0,
        ) {
            let n = pts.len();
            let labels: Vec<Label> = mask[..n].iter().map(|&b| if b { Label::X } else { Label::Y }).collect();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let a = line_set(&pts, &labels);
            // dyadic shift keeps every difference exact
            let shift = (shift * 4.0).round() / 4.0;
            let pts_dyadic: Vec<f64> = pts.iter().map(|p| (p * 1024.0).round() / 1024.0).collect();
            let a = line_set(&pts_dyadic, a.labels());
            let moved: Vec<f64> = pts_dyadic.iter().map(|p| p + shift).collect();
            let b = line_set(&moved, &labels);
            let z = (z * 1024.0).round() / 1024.0;
            let ia = NeighborIndex::for_training(&a, IndexKind::KdTree).unwrap();
            let ib = NeighborIndex::for_training(&b, IndexKind::KdTree).unwrap();
            prop_assert_eq!(
                classify_knn(&a, &ia, &[z], k).unwrap(),
                classify_knn(&b, &ib, &[z + shift], k).unwrap()
            );
        }

        #[test]
        fn one_nn_recovers_own_label(
            pts in proptest::collection::btree_set(-1000i32..1000, 1..50),
            mask in proptest::collection::vec(any::<bool>(), 50),
        ) {
            let xs: Vec<f64> = pts.iter().map(|&v| v as f64 * 0.01).collect();
            let labels: Vec<Label> = mask[..xs.len()].iter().map(|&b| if b { Label::X } else { Label::Y }).collect();
            let t = line_set(&xs, &labels);
            let idx = NeighborIndex::for_training(&t, IndexKind::KdTree).unwrap();
            for (i, x) in xs.iter().enumerate() {
                prop_assert_eq!(classify_knn(&t, &idx, &[*x], 1).unwrap(), labels[i]);
            }
        }
    }
}
