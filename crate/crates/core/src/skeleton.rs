//! Human-body joint graphs and their partitioned, normalized adjacency.
//!
//! Each vertex's 1-hop neighborhood is split into three subsets: the vertex
//! itself, neighbors nearer the center joint (centripetal) and neighbors
//! farther from it (centrifugal). Nearness is the hop distance to a fixed
//! center joint of the template skeleton, so the partition is static.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Number of neighbor subsets.
pub const NUM_SUBSETS: usize = 3;

/// Diagonal regularizer added to every degree before normalization.
pub const DEGREE_REGULARIZER: f64 = 0.001;

/// NTU RGB+D 25-joint layout, one-based pairs as published with the dataset.
const NTU25_EDGES_ONE_BASED: [(usize, usize); 24] = [
    (1, 2),
    (2, 21),
    (3, 21),
    (4, 3),
    (5, 21),
    (6, 5),
    (7, 6),
    (8, 7),
    (9, 21),
    (10, 9),
    (11, 10),
    (12, 11),
    (13, 1),
    (14, 13),
    (15, 14),
    (16, 15),
    (17, 1),
    (18, 17),
    (19, 18),
    (20, 19),
    (22, 23),
    (23, 8),
    (24, 25),
    (25, 12),
];

/// OpenPose 18-joint layout used by Kinetics-Skeleton, zero-based.
const KINETICS18_EDGES: [(usize, usize); 17] = [
    (4, 3),
    (3, 2),
    (7, 6),
    (6, 5),
    (13, 12),
    (12, 11),
    (10, 9),
    (9, 8),
    (11, 5),
    (8, 2),
    (5, 1),
    (2, 1),
    (0, 1),
    (15, 0),
    (14, 0),
    (17, 15),
    (16, 14),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Ntu25,
    Kinetics18,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub num_joints: usize,
    /// Unordered 1-hop bones, stored with the smaller index first.
    pub edges: Vec<(usize, usize)>,
    pub center_joint: usize,
    pub preset: Preset,
}

impl SkeletonTopology {
    /// Builds and validates a topology. `Custom` needs both `edges` and
    /// `center_joint`; presets accept an optional center override.
    pub fn build(
        preset: Preset,
        custom_edges: Option<&[(usize, usize)]>,
        center_joint: Option<usize>,
    ) -> Result<Self> {
        let (num_joints, edges, default_center): (usize, Vec<(usize, usize)>, usize) = match preset {
            Preset::Ntu25 => (25, NTU25_EDGES_ONE_BASED.iter().map(|&(a, b)| (a - 1, b - 1)).collect(), 1),
            Preset::Kinetics18 => (18, KINETICS18_EDGES.to_vec(), 1),
            Preset::Custom => {
                let Some(edges) = custom_edges else {
                    return config_err("custom topology requires an edge list");
                };
                let Some(c) = center_joint else {
                    return config_err("custom topology requires a center joint");
                };
                let v = edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(1).max(c + 1);
                (v, edges.to_vec(), c)
            }
        };
        Self::from_parts(num_joints, &edges, center_joint.unwrap_or(default_center), preset)
    }

    pub fn ntu25() -> Self {
        Self::build(Preset::Ntu25, None, None).expect("ntu25 preset is valid")
    }

    pub fn kinetics18() -> Self {
        Self::build(Preset::Kinetics18, None, None).expect("kinetics18 preset is valid")
    }

    /// Validates an explicit joint count, edge list and center.
    pub fn from_parts(
        num_joints: usize,
        edges: &[(usize, usize)],
        center_joint: usize,
        preset: Preset,
    ) -> Result<Self> {
        if num_joints == 0 {
            return config_err("topology needs at least one joint");
        }
        if center_joint >= num_joints {
            return config_err(format!("center joint {center_joint} out of range for {num_joints} joints"));
        }
        let mut norm: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= num_joints || b >= num_joints {
                return config_err(format!("edge ({a}, {b}) out of range for {num_joints} joints"));
            }
            if a == b {
                return config_err(format!("self-loop edge ({a}, {a})"));
            }
            let e = (a.min(b), a.max(b));
            if !norm.contains(&e) {
                norm.push(e);
            }
        }
        let topo = Self { num_joints, edges: norm, center_joint, preset };
        if let Some(j) = topo.bfs_hops().iter().position(|h| h.is_none()) {
            return config_err(format!("joint {j} is not reachable from center joint {center_joint}"));
        }
        Ok(topo)
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_joints];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    fn bfs_hops(&self) -> Vec<Option<usize>> {
        let adj = self.neighbors();
        let mut hops = vec![None; self.num_joints];
        hops[self.center_joint] = Some(0);
        let mut queue = VecDeque::from([self.center_joint]);
        while let Some(i) = queue.pop_front() {
            let h = hops[i].unwrap();
            for &j in &adj[i] {
                if hops[j].is_none() {
                    hops[j] = Some(h + 1);
                    queue.push_back(j);
                }
            }
        }
        hops
    }

    /// Breadth-first hop count from every joint to the center joint.
    pub fn hop_distances(&self) -> Vec<usize> {
        self.bfs_hops().into_iter().map(|h| h.expect("validated topology is connected")).collect()
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.num_joints
    }

    /// Parent of every joint in the tree rooted at the center joint (the
    /// source joint of the bone ending there). The root has no parent.
    pub fn parents(&self) -> Result<Vec<Option<usize>>> {
        if !self.is_tree() {
            return config_err(format!(
                "bone derivation needs a tree; {} edges for {} joints",
                self.edges.len(),
                self.num_joints
            ));
        }
        let hops = self.hop_distances();
        let adj = self.neighbors();
        Ok((0..self.num_joints)
            .map(|j| adj[j].iter().copied().find(|&p| hops[p] + 1 == hops[j]))
            .collect())
    }

    /// Raw subset matrices: self, centripetal, centrifugal. Neighbors at
    /// equal hop distance join the self subset.
    pub fn partition(&self) -> [Tensor; NUM_SUBSETS] {
        let v = self.num_joints;
        let hops = self.hop_distances();
        let mut own = Tensor::eye(v);
        let mut centripetal = Tensor::zeros(&[v, v]);
        let mut centrifugal = Tensor::zeros(&[v, v]);
        for &(a, b) in &self.edges {
            for (i, j) in [(a, b), (b, a)] {
                let target = match hops[j].cmp(&hops[i]) {
                    std::cmp::Ordering::Less => &mut centripetal,
                    std::cmp::Ordering::Greater => &mut centrifugal,
                    std::cmp::Ordering::Equal => &mut own,
                };
                target.set(&[i, j], 1.0);
            }
        }
        [own, centripetal, centrifugal]
    }
}

/// `Λ^{-1/2} Ā Λ^{-1/2}` with `Λ_ii = Σ_j Ā_ij + alpha`.
pub fn normalize_adjacency(raw: &Tensor, alpha: f64) -> Tensor {
    let v = raw.shape()[0];
    let d = raw.data();
    let inv_sqrt: Vec<f64> = (0..v).map(|i| 1.0 / (d[i * v..(i + 1) * v].iter().sum::<f64>() + alpha).sqrt()).collect();
    Tensor::from_fn(&[v, v], |k| {
        let (i, j) = (k / v, k % v);
        inv_sqrt[i] * d[k] * inv_sqrt[j]
    })
}

/// Partitioned raw and normalized adjacency of one topology.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedAdjacency {
    pub raw: Vec<Tensor>,
    pub normalized: Vec<Tensor>,
    pub alpha_reg: f64,
}

impl PartitionedAdjacency {
    pub fn from_topology(topo: &SkeletonTopology) -> Self {
        let raw: Vec<Tensor> = topo.partition().into_iter().collect();
        let normalized = raw.iter().map(|a| normalize_adjacency(a, DEGREE_REGULARIZER)).collect();
        Self { raw, normalized, alpha_reg: DEGREE_REGULARIZER }
    }

    pub fn num_joints(&self) -> usize {
        self.raw[0].shape()[0]
    }

    /// Normalized matrices stacked as `[K, V, V]`.
    pub fn stacked(&self) -> Tensor {
        let v = self.num_joints();
        let data = self.normalized.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(&[self.normalized.len(), v, v], data).expect("stacked adjacency")
    }
}
