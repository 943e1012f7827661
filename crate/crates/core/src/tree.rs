//! Complete binary trees with soft multivariate splits.
//!
//! Nodes are heap-indexed: the root is 1 and node `n` has children `2n` and
//! `2n + 1`. For depth `D` the branch nodes are `1..2^D` and the leaves are
//! `2^D..2^(D+1)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::leaf::LeafModelSpec;
use crate::numeric::{dot, sigmoid};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("parameter block count mismatch")]
    BlockCount,
    #[error("non-finite parameter")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreeTopology {
    depth: u32,
}

impl TreeTopology {
    pub fn new(depth: u32) -> Result<Self, TreeError> {
        if depth == 0 {
            Err(TreeError::ZeroDepth)
        } else {
            Ok(Self { depth })
        }
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn n_branch(&self) -> usize {
        (1usize << self.depth) - 1
    }

    pub fn n_leaves(&self) -> usize {
        1usize << self.depth
    }

    pub fn first_leaf(&self) -> usize {
        1usize << self.depth
    }

    pub fn branch_nodes(&self) -> std::ops::Range<usize> {
        1..self.first_leaf()
    }

    pub fn leaves(&self) -> std::ops::Range<usize> {
        self.first_leaf()..2 * self.first_leaf()
    }

    pub fn is_leaf(&self, n: usize) -> bool {
        self.leaves().contains(&n)
    }

    /// Position of leaf `n` in leaf order.
    pub fn leaf_pos(&self, n: usize) -> usize {
        n - self.first_leaf()
    }

    /// Ancestors of `n` from the root down, each with `true` when `n` lies in
    /// its left subtree.
    pub fn ancestors(&self, n: usize) -> Vec<(usize, bool)> {
        let mut out = Vec::new();
        let mut c = n;
        while c > 1 {
            out.push((c / 2, c % 2 == 0));
            c /= 2;
        }
        out.reverse();
        out
    }

    /// Branch descendants of `s` (excluding `s`) in heap order.
    pub fn branch_descendants(&self, s: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let (mut lo, mut hi) = (2 * s, 2 * s + 1);
        while lo < self.first_leaf() {
            out.extend(lo..=hi);
            lo *= 2;
            hi = 2 * hi + 1;
        }
        out
    }

    /// Leaves in the subtree of `s`, left to right.
    pub fn leaf_descendants(&self, s: usize) -> std::ops::RangeInclusive<usize> {
        let mut lo = s;
        let mut hi = s;
        while lo < self.first_leaf() {
            lo *= 2;
            hi = 2 * hi + 1;
        }
        lo..=hi
    }

    /// Whether `a` lies in the subtree rooted at `s` (including `s`).
    pub fn in_subtree(&self, s: usize, mut a: usize) -> bool {
        while a > s {
            a /= 2;
        }
        a == s
    }
}

/// Read access to tree parameters, used by prediction.
pub trait TreeView {
    fn topology(&self) -> TreeTopology;
    fn omega(&self, n: usize) -> &[f64];
    fn beta(&self, leaf: usize) -> &[f64];
}

/// Split vectors `ω_n = (ω_0n, ω_1n..ω_pn)` and leaf vectors `β_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub topology: TreeTopology,
    /// Indexed by `n - 1` for branch node `n`.
    pub omega: Vec<Vec<f64>>,
    /// Indexed by leaf position.
    pub beta: Vec<Vec<f64>>,
}

impl TreeParams {
    pub fn zeros(topology: TreeTopology, p: usize, n_beta: usize) -> Self {
        Self {
            topology,
            omega: vec![vec![0.0; p + 1]; topology.n_branch()],
            beta: vec![vec![0.0; n_beta]; topology.n_leaves()],
        }
    }

    pub fn new(topology: TreeTopology, omega: Vec<Vec<f64>>, beta: Vec<Vec<f64>>) -> Result<Self, TreeError> {
        if omega.len() != topology.n_branch() || beta.len() != topology.n_leaves() {
            return Err(TreeError::BlockCount);
        }
        let p1 = omega[0].len();
        let nb = beta[0].len();
        for w in &omega {
            if w.len() != p1 {
                return Err(TreeError::DimensionMismatch {
                    expected: p1,
                    actual: w.len(),
                });
            }
        }
        for b in &beta {
            if b.len() != nb {
                return Err(TreeError::DimensionMismatch {
                    expected: nb,
                    actual: b.len(),
                });
            }
        }
        if omega.iter().chain(&beta).flatten().any(|v| !v.is_finite()) {
            return Err(TreeError::NonFinite);
        }
        Ok(Self { topology, omega, beta })
    }

    /// Number of features.
    pub fn p(&self) -> usize {
        self.omega[0].len() - 1
    }

    pub fn omega_mut(&mut self, n: usize) -> &mut Vec<f64> {
        &mut self.omega[n - 1]
    }

    pub fn beta_mut(&mut self, leaf: usize) -> &mut Vec<f64> {
        let pos = self.topology.leaf_pos(leaf);
        &mut self.beta[pos]
    }
}

impl TreeView for TreeParams {
    fn topology(&self) -> TreeTopology {
        self.topology
    }

    fn omega(&self, n: usize) -> &[f64] {
        &self.omega[n - 1]
    }

    fn beta(&self, leaf: usize) -> &[f64] {
        &self.beta[self.topology.leaf_pos(leaf)]
    }
}

/// `F(Σ_j ω_j x_j − ω_0)` without a length check.
#[inline]
pub fn branch_prob_unchecked(omega_n: &[f64], x: &[f64]) -> f64 {
    sigmoid(dot(&omega_n[1..], x) - omega_n[0])
}

/// Probability of routing `x` left at a node with split vector `omega_n`.
pub fn branch_prob(omega_n: &[f64], x: &[f64]) -> Result<f64, TreeError> {
    if omega_n.len() != x.len() + 1 {
        return Err(TreeError::DimensionMismatch {
            expected: omega_n.len().saturating_sub(1),
            actual: x.len(),
        });
    }
    Ok(branch_prob_unchecked(omega_n, x))
}

/// Branch probabilities of `x` at every branch node, indexed by `n - 1`.
pub fn all_branch_probs<V: TreeView + ?Sized>(params: &V, x: &[f64]) -> Vec<f64> {
    params
        .topology()
        .branch_nodes()
        .map(|n| branch_prob_unchecked(params.omega(n), x))
        .collect()
}

/// Leaf probabilities of the subtree rooted at `s`, relative to `s`, in
/// left-to-right leaf order.
pub fn subtree_leaf_probs_from(topo: TreeTopology, probs: &[f64], s: usize) -> Vec<f64> {
    let mut level = vec![1.0];
    let mut first = s;
    while first < topo.first_leaf() {
        let mut next = Vec::with_capacity(level.len() * 2);
        for (k, &q) in level.iter().enumerate() {
            let pl = probs[first + k - 1];
            next.push(q * pl);
            next.push(q * (1.0 - pl));
        }
        level = next;
        first *= 2;
    }
    level
}

/// `P_xn` for every leaf, in leaf order.
pub fn leaf_probs<V: TreeView + ?Sized>(params: &V, x: &[f64]) -> Vec<f64> {
    let probs = all_branch_probs(params, x);
    subtree_leaf_probs_from(params.topology(), &probs, 1)
}

/// Leaf reached by following the ≥ 0.5 branch from the root.
pub fn hbp_leaf<V: TreeView + ?Sized>(params: &V, x: &[f64]) -> usize {
    let topo = params.topology();
    let mut n = 1;
    while n < topo.first_leaf() {
        n = if branch_prob_unchecked(params.omega(n), x) >= 0.5 {
            2 * n
        } else {
            2 * n + 1
        };
    }
    n
}

/// HBP leaf from precomputed branch probabilities.
pub fn hbp_leaf_from(topo: TreeTopology, probs: &[f64]) -> usize {
    let mut n = 1;
    while n < topo.first_leaf() {
        n = if probs[n - 1] >= 0.5 { 2 * n } else { 2 * n + 1 };
    }
    n
}

/// Survival of `x` at each time in `ts`, using only the HBP leaf.
pub fn predict_survival<V: TreeView + ?Sized>(
    params: &V,
    spec: &LeafModelSpec,
    x: &[f64],
    ts: &[f64],
) -> Vec<f64> {
    let leaf = hbp_leaf(params, x);
    let beta = params.beta(leaf);
    ts.iter().map(|&t| spec.survival(beta, x, t)).collect()
}
