//! Optional k-d tree accelerator for nearest-neighbor search.
//!
//! Produces output identical to the brute-force reference: candidates are
//! ordered by (squared distance, index), so equidistant points resolve to
//! the lower index in both implementations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::spatial::{dist2, NeighborIndex, PointCloud, SearchMode};

struct TreeNode {
    point: usize,
    axis: usize,
    left: Option<Box<TreeNode>>,
    right: Option<Box<TreeNode>>,
}

/// Balanced k-d tree over a point cloud's coordinates.
pub struct KdTree {
    points: Vec<[f64; 3]>,
    root: Option<Box<TreeNode>>,
}

/// Max-heap entry ordered by (distance, index); the heap top is the current
/// worst candidate.
#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn build(cloud: &PointCloud) -> KdTree {
        let points: Vec<[f64; 3]> = (0..cloud.len()).map(|i| cloud.point(i)).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = build_node(&points, &mut order);
        KdTree { points, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Drop-in replacement for the brute-force knn over the same cloud:
    /// self-excluding, self-padding, tie-break by ascending index.
    pub fn knn(&self, k: usize) -> Result<NeighborIndex> {
        if k < 1 {
            return Err(Error::Param("knn needs k >= 1".into()));
        }
        let n = self.points.len();
        let rows: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
                self.search(self.root.as_deref(), self.points[i], i, k, &mut heap);
                let mut found: Vec<Candidate> = heap.into_vec();
                found.sort_unstable();
                let mut row: Vec<usize> = found.into_iter().map(|c| c.index).collect();
                row.resize(k, i);
                row
            })
            .collect();
        NeighborIndex::from_rows(rows, k, SearchMode::Knn)
    }

    fn search(
        &self,
        node: Option<&TreeNode>,
        query: [f64; 3],
        exclude: usize,
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        let Some(node) = node else { return };

        if node.point != exclude {
            let candidate = Candidate {
                d2: dist2(query, self.points[node.point]),
                index: node.point,
            };
            if heap.len() < k {
                heap.push(candidate);
            } else if candidate < *heap.peek().unwrap() {
                heap.pop();
                heap.push(candidate);
            }
        }

        let delta = query[node.axis] - self.points[node.point][node.axis];
        let (near, far) = if delta < 0.0 {
            (node.left.as_deref(), node.right.as_deref())
        } else {
            (node.right.as_deref(), node.left.as_deref())
        };
        self.search(near, query, exclude, k, heap);

        // The far side can still hold a better candidate when the splitting
        // plane is within the current worst distance; with equality it can
        // hold an equidistant point with a smaller index, so prune with <=.
        let must_visit = heap.len() < k || delta * delta <= heap.peek().unwrap().d2;
        if must_visit {
            self.search(far, query, exclude, k, heap);
        }
    }
}

fn build_node(points: &[[f64; 3]], order: &mut [usize]) -> Option<Box<TreeNode>> {
    if order.is_empty() {
        return None;
    }
    // Split on the axis with the widest extent for balanced partitions.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();

    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let point = order[mid];
    let (left, rest) = order.split_at_mut(mid);
    let right = &mut rest[1..];
    Some(Box::new(TreeNode {
        point,
        axis,
        left: build_node(points, left),
        right: build_node(points, right),
    }))
}
