//! Skeleton graph and its spatially partitioned, normalized adjacency.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of spatial partitions: root, centripetal, centrifugal.
pub const NUM_PARTITIONS: usize = 3;

/// Column degrees below this are clamped before normalization.
const DEGREE_FLOOR: f64 = 1e-6;

/// Joint names of the 18-keypoint COCO layout, in index order.
pub const COCO18_JOINTS: [&str; 18] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

const COCO18_EDGES: [(usize, usize); 17] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

/// Joints and bones of a skeleton.
///
/// Serializes as `{"num_joints": 18, "edges": [[0, 1], ...], "center": 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonLayout {
    pub num_joints: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(rename = "center")]
    pub center_joint: usize,
}

impl SkeletonLayout {
    /// Builds and validates a layout.
    pub fn new(num_joints: usize, edges: Vec<(usize, usize)>, center_joint: usize) -> Result<Self> {
        let layout = Self {
            num_joints,
            edges,
            center_joint,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// The OpenPose COCO-18 tree, centered on the neck.
    pub fn coco18() -> Self {
        Self {
            num_joints: 18,
            edges: COCO18_EDGES.to_vec(),
            center_joint: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_joints == 0 {
            return Err(Error::Config("skeleton has no joints".into()));
        }
        if self.center_joint >= self.num_joints {
            return Err(Error::Config(format!(
                "center joint {} out of range {}",
                self.center_joint, self.num_joints
            )));
        }
        for &(a, b) in &self.edges {
            if a >= self.num_joints || b >= self.num_joints {
                return Err(Error::Config(format!(
                    "edge ({a}, {b}) out of range {}",
                    self.num_joints
                )));
            }
            if a == b {
                return Err(Error::Config(format!("self-loop on joint {a}")));
            }
        }
        self.hop_distances(self.center_joint).map(|_| ())
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Breadth-first hop counts from `source`; errors if any joint is
    /// unreachable.
    pub fn hop_distances(&self, source: usize) -> Result<Vec<usize>> {
        if source >= self.num_joints {
            return Err(Error::Config(format!(
                "source joint {source} out of range {}",
                self.num_joints
            )));
        }
        let adj = self.neighbors();
        let mut dist = vec![usize::MAX; self.num_joints];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        if let Some(j) = dist.iter().position(|&d| d == usize::MAX) {
            return Err(Error::Config(format!(
                "skeleton graph is disconnected: joint {j} unreachable from {source}"
            )));
        }
        Ok(dist)
    }

    /// Permutes joint labels: joint `j` becomes `perm[j]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_joints {
            return Err(Error::Config("permutation length mismatch".into()));
        }
        Self::new(
            self.num_joints,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
            perm[self.center_joint],
        )
    }
}

/// Partition an adjacency entry falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// Both joints equally far from the center (includes self-loops).
    Root = 0,
    /// The aggregating joint is closer to the center.
    Centripetal = 1,
    /// The aggregating joint is farther from the center.
    Centrifugal = 2,
}

/// `P` stacked `V x V` normalized adjacency matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedAdjacency {
    matrices: Vec<Tensor>,
}

impl PartitionedAdjacency {
    /// Wraps explicit matrices; all must be square and equally sized.
    pub fn from_matrices(matrices: Vec<Tensor>) -> Result<Self> {
        let v = matrices
            .first()
            .map(|m| m.shape().first().copied().unwrap_or(0))
            .ok_or_else(|| Error::Config("adjacency needs at least one partition".into()))?;
        for m in &matrices {
            if m.shape() != [v, v] {
                return Err(Error::Config(format!(
                    "adjacency partitions must be {v}x{v}, got {:?}",
                    m.shape()
                )));
            }
        }
        Ok(Self { matrices })
    }

    pub fn num_partitions(&self) -> usize {
        self.matrices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.matrices[0].shape()[0]
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    pub fn partition(&self, p: usize) -> &Tensor {
        &self.matrices[p]
    }

    /// Elementwise sum over partitions.
    pub fn total(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.matrices[0].shape());
        for m in &self.matrices {
            acc.add_assign(m).expect("partitions share a shape");
        }
        acc
    }
}

/// Column-normalized `A + I`: column `j` is divided by its sum.
pub fn normalized_adjacency(layout: &SkeletonLayout) -> Tensor {
    let v = layout.num_joints;
    let mut a = Tensor::zeros(&[v, v]);
    for i in 0..v {
        a.set(&[i, i], 1.0);
    }
    for &(i, j) in &layout.edges {
        a.set(&[i, j], 1.0);
        a.set(&[j, i], 1.0);
    }
    for j in 0..v {
        let deg: f64 = (0..v).map(|i| a.get(&[i, j])).sum();
        let deg = deg.max(DEGREE_FLOOR);
        for i in 0..v {
            let x = a.get(&[i, j]);
            a.set(&[i, j], x / deg);
        }
    }
    a
}

/// Classifies entry `(i, j)`, where joint `j` aggregates from joint `i`.
pub fn classify_entry(dist: &[usize], i: usize, j: usize) -> Partition {
    use std::cmp::Ordering::*;
    match dist[j].cmp(&dist[i]) {
        Equal => Partition::Root,
        Less => Partition::Centripetal,
        Greater => Partition::Centrifugal,
    }
}

/// Splits the normalized adjacency into root / centripetal / centrifugal
/// partitions by hop distance to the layout's center joint. Entries are
/// copied, not re-normalized.
pub fn build_partitioned_adjacency(layout: &SkeletonLayout) -> Result<PartitionedAdjacency> {
    layout.validate()?;
    let dist = layout.hop_distances(layout.center_joint)?;
    let v = layout.num_joints;
    let norm = normalized_adjacency(layout);
    let mut parts = vec![Tensor::zeros(&[v, v]); NUM_PARTITIONS];
    for i in 0..v {
        for j in 0..v {
            let w = norm.get(&[i, j]);
            if w != 0.0 {
                parts[classify_entry(&dist, i, j) as usize].set(&[i, j], w);
            }
        }
    }
    PartitionedAdjacency::from_matrices(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn floyd_warshall(layout: &SkeletonLayout) -> Vec<Vec<usize>> {
        let v = layout.num_joints;
        let inf = usize::MAX / 4;
        let mut d = vec![vec![inf; v]; v];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0;
        }
        for &(a, b) in &layout.edges {
            d[a][b] = 1;
            d[b][a] = 1;
        }
        for k in 0..v {
            for i in 0..v {
                for j in 0..v {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn coco18_shape() {
        let l = SkeletonLayout::coco18();
        assert_eq!(l.num_joints, 18);
        assert_eq!(l.edges.len(), 17);
        assert_eq!(l.center_joint, 1);
        l.validate().unwrap();
        let d = l.hop_distances(1).unwrap();
        assert_eq!(d[0], 1);
        assert_eq!(d[4], 3);
        assert_eq!(d[7], 3);
    }

    #[test]
    fn hop_distances_match_floyd_warshall() {
        let l = SkeletonLayout::coco18();
        let fw = floyd_warshall(&l);
        for s in 0..18 {
            let d = l.hop_distances(s).unwrap();
            assert_eq!(d[s], 0);
            assert_eq!(d, fw[s]);
        }
        for &(a, b) in &l.edges {
            assert_eq!(l.hop_distances(a).unwrap()[b], 1);
        }
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(SkeletonLayout::new(3, vec![(0, 1)], 0).is_err());
        assert!(SkeletonLayout::new(3, vec![(0, 1), (1, 1)], 0).is_err());
        assert!(SkeletonLayout::new(3, vec![(0, 1), (1, 3)], 0).is_err());
        assert!(SkeletonLayout::new(3, vec![(0, 1), (1, 2)], 5).is_err());
        assert!(SkeletonLayout::new(3, vec![(0, 1), (1, 2)], 2).is_ok());
    }

    #[test]
    fn two_node_path() {
        let l = SkeletonLayout::new(2, vec![(0, 1)], 0).unwrap();
        let a = build_partitioned_adjacency(&l).unwrap();
        let root = a.partition(Partition::Root as usize);
        let cp = a.partition(Partition::Centripetal as usize);
        let cf = a.partition(Partition::Centrifugal as usize);
        assert_eq!(root.data(), &[0.5, 0.0, 0.0, 0.5]);
        // joint 0 (center) aggregating from joint 1: closer to center
        assert_eq!(cp.get(&[1, 0]), 0.5);
        assert_eq!(cf.get(&[0, 1]), 0.5);
        assert_eq!(cp.sum() + cf.sum(), 1.0);
        assert_eq!(a.total(), normalized_adjacency(&l));
    }

    #[test]
    fn coco18_partitions_by_hand() {
        let l = SkeletonLayout::coco18();
        let a = build_partitioned_adjacency(&l).unwrap();
        let dist = l.hop_distances(1).unwrap();
        // elbow (3) aggregating from wrist (4): elbow is closer to the neck
        assert_eq!(classify_entry(&dist, 4, 3), Partition::Centripetal);
        assert!(a.partition(1).get(&[4, 3]) > 0.0);
        // wrist aggregating from elbow
        assert!(a.partition(2).get(&[3, 4]) > 0.0);
        // neck aggregating from nose is centripetal; nose from neck centrifugal
        assert!(a.partition(1).get(&[0, 1]) > 0.0);
        assert!(a.partition(2).get(&[1, 0]) > 0.0);
        // wrist column: wrist + elbow => 1/2 each
        assert_eq!(a.partition(0).get(&[4, 4]), 0.5);
        assert_eq!(a.partition(2).get(&[3, 4]), 0.5);
        // neck column: neck, nose, 2 shoulders, 2 hips => 1/6 each
        assert!((a.partition(0).get(&[1, 1]) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(a.total(), normalized_adjacency(&l));
    }

    #[test]
    fn json_roundtrip() {
        let l = SkeletonLayout::coco18();
        let s = serde_json::to_string(&l).unwrap();
        assert!(s.starts_with(r#"{"num_joints":18,"edges":[[0,1],[1,2]"#));
        assert!(s.ends_with(r#""center":1}"#));
        let back: SkeletonLayout = serde_json::from_str(&s).unwrap();
        assert_eq!(back, l);
    }
}
