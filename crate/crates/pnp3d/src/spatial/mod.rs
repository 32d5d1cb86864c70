//! Neighborhood search over 3D coordinates and construction of the local
//! geometric and feature graphs.
//!
//! Brute-force search is the reference implementation; [`kdtree`] offers an
//! accelerator that must produce identical output under the same
//! deterministic tie-break rule (ascending distance, then ascending index).
//! Query points never appear in their own neighborhood; when fewer real
//! neighbors exist than requested, trailing slots are padded so that padded
//! graph edges are exactly zero.

pub mod kdtree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::{GradTape, TensorId};
use crate::numerics::tensor::Tensor;

/// N points with 3D coordinates and optional per-point attributes.
#[derive(Clone, Debug)]
pub struct PointCloud {
    coords: Tensor,
    attrs: Option<Tensor>,
}

impl PointCloud {
    pub fn new(coords: Tensor) -> Result<PointCloud> {
        if coords.rank() != 2 || coords.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "point cloud coordinates must be [n x 3], got {:?}",
                coords.shape()
            )));
        }
        if coords.shape()[0] == 0 {
            return Err(Error::Param("point cloud must hold at least one point".into()));
        }
        if !coords.all_finite() {
            return Err(Error::Integrity(
                "point cloud coordinates must be finite".into(),
            ));
        }
        Ok(PointCloud {
            coords,
            attrs: None,
        })
    }

    pub fn with_attrs(coords: Tensor, attrs: Tensor) -> Result<PointCloud> {
        let mut cloud = PointCloud::new(coords)?;
        if attrs.rank() != 2 || attrs.shape()[0] != cloud.len() {
            return Err(Error::Shape(format!(
                "attributes must be [{} x a], got {:?}",
                cloud.len(),
                attrs.shape()
            )));
        }
        cloud.attrs = Some(attrs);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires n >= 1
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn attrs(&self) -> Option<&Tensor> {
        self.attrs.as_ref()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let d = self.coords.data();
        [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]]
    }

    /// Reorders points (and attributes) by `perm`, where the new point `i`
    /// is the old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<PointCloud> {
        if perm.len() != self.len() {
            return Err(Error::Param("permutation length mismatch".into()));
        }
        let d = self.coords.data();
        let mut out = Vec::with_capacity(d.len());
        for &p in perm {
            out.extend_from_slice(&d[p * 3..p * 3 + 3]);
        }
        let coords = Tensor::new(vec![self.len(), 3], out)?;
        match &self.attrs {
            None => PointCloud::new(coords),
            Some(a) => {
                let w = a.shape()[1];
                let mut out = Vec::with_capacity(a.numel());
                for &p in perm {
                    out.extend_from_slice(&a.data()[p * w..(p + 1) * w]);
                }
                PointCloud::with_attrs(coords, Tensor::new(vec![self.len(), w], out)?)
            }
        }
    }
}

/// How a neighborhood was collected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Knn,
    Ball { radius: f64 },
}

/// N x k table of neighbor indices.
///
/// Real neighbors occupy a prefix of each row in ascending-distance order
/// (ties by ascending index); padded slots repeat the nearest qualifying
/// index, or the query's own index when no neighbor qualifies.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    indices: Vec<usize>,
    n: usize,
    k: usize,
    mode: SearchMode,
}

impl NeighborIndex {
    pub fn from_rows(rows: Vec<Vec<usize>>, k: usize, mode: SearchMode) -> Result<NeighborIndex> {
        let n = rows.len();
        let mut indices = Vec::with_capacity(n * k);
        for row in &rows {
            if row.len() != k {
                return Err(Error::Integrity(format!(
                    "neighbor row has {} entries, expected k={k}",
                    row.len()
                )));
            }
            indices.extend_from_slice(row);
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::Integrity(format!(
                "neighbor index {bad} out of range for {n} points"
            )));
        }
        Ok(NeighborIndex {
            indices,
            n,
            k,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> SearchMode {
        self.mode
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

#[inline]
pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// The k nearest other points per query point under Euclidean distance.
///
/// The query point is excluded; with fewer than k other points available
/// the remaining slots self-pad, which makes the padded graph edges zero.
pub fn knn_search(cloud: &PointCloud, k: usize) -> Result<NeighborIndex> {
    if k < 1 {
        return Err(Error::Param("knn needs k >= 1".into()));
    }
    let n = cloud.len();
    let rows: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let q = cloud.point(i);
            let mut candidates: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(q, cloud.point(j)), j))
                .collect();
            let take = k.min(candidates.len());
            if take > 0 && take < candidates.len() {
                candidates.select_nth_unstable_by(take - 1, |a, b| {
                    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                });
                candidates.truncate(take);
            }
            candidates.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut row: Vec<usize> = candidates.into_iter().map(|(_, j)| j).collect();
            row.resize(k, i);
            row
        })
        .collect();
    NeighborIndex::from_rows(rows, k, SearchMode::Knn)
}

/// Up to k points (excluding the query) within `radius`, nearest first.
///
/// Rows with fewer than k qualifying points repeat their nearest qualifying
/// index; a point with no neighbor in range pads with itself.
pub fn ball_query(cloud: &PointCloud, radius: f64, k: usize) -> Result<NeighborIndex> {
    if k < 1 {
        return Err(Error::Param("ball query needs k >= 1".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Param(format!(
            "ball query needs radius > 0, got {radius}"
        )));
    }
    let n = cloud.len();
    let r2 = radius * radius;
    let rows: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let q = cloud.point(i);
            let mut qualifying: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .filter_map(|j| {
                    let d = dist2(q, cloud.point(j));
                    (d <= r2).then_some((d, j))
                })
                .collect();
            qualifying.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            qualifying.truncate(k);
            let pad = qualifying.first().map_or(i, |&(_, j)| j);
            let mut row: Vec<usize> = qualifying.into_iter().map(|(_, j)| j).collect();
            row.resize(k, pad);
            row
        })
        .collect();
    NeighborIndex::from_rows(rows, k, SearchMode::Ball { radius })
}

fn check_table(n_points: usize, idx: &NeighborIndex) -> Result<()> {
    if idx.len() != n_points {
        return Err(Error::Integrity(format!(
            "neighbor table covers {} points, cloud has {n_points}",
            idx.len()
        )));
    }
    Ok(())
}

/// Plain `[n x k x 6]` tensor pairing each point with edge vectors to its
/// neighbors: slot (i, j) holds `[p_i ; p_n(i,j) - p_i]`.
pub fn geometric_graph_tensor(cloud: &PointCloud, idx: &NeighborIndex) -> Result<Tensor> {
    check_table(cloud.len(), idx)?;
    let (n, k) = (idx.len(), idx.k());
    let mut out = vec![0.0; n * k * 6];
    for i in 0..n {
        let p = cloud.point(i);
        for (j, &nbr) in idx.row(i).iter().enumerate() {
            let q = cloud.point(nbr);
            let slot = &mut out[(i * k + j) * 6..(i * k + j + 1) * 6];
            slot[..3].copy_from_slice(&p);
            for t in 0..3 {
                slot[3 + t] = q[t] - p[t];
            }
        }
    }
    Tensor::new(vec![n, k, 6], out)
}

/// Tape-recorded geometric graph; gradient flows back to the coordinate
/// leaf, though callers typically never query it.
pub fn build_geometric_graph(
    tape: &mut GradTape,
    cloud: &PointCloud,
    idx: &NeighborIndex,
) -> Result<TensorId> {
    check_table(cloud.len(), idx)?;
    let coords = tape.var(cloud.coords().clone());
    tape.edge_concat(coords, idx.flat(), idx.k())
}

/// Tape-recorded feature graph `[n x k x 2c]` over the same spatial
/// neighborhoods: slot (i, j) holds `[f_i ; f_n(i,j) - f_i]`. Backward
/// scatters edge gradients to both endpoints.
pub fn build_feature_graph(
    tape: &mut GradTape,
    features: TensorId,
    idx: &NeighborIndex,
) -> Result<TensorId> {
    let n = tape.value(features).shape()[0];
    check_table(n, idx)?;
    tape.edge_concat(features, idx.flat(), idx.k())
}
