//! Training error, restricted subtree errors, gradients and the group
//! fairness penalty.
//!
//! The training error is
//! `E(ω, β) = (1/N) Σ_i Σ_n P_in(ω) L_n(x_i, t_i, c_i; β_n) + (λ/2)‖β‖²`,
//! where `P_in` are the soft leaf probabilities and `L_n` the leaf NLL.
//! Event terms of spline leaves whose slope `ds/dy` is not positive at `t_i`
//! are excluded from the sum.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::data::SurvivalDataset;
use crate::leaf::{LeafError, LeafModelSpec};
use crate::tree::{all_branch_probs, hbp_leaf, subtree_leaf_probs_from, TreeParams, TreeView};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("non-finite objective value ({0})")]
    NonFinite(String),
    #[error("restricted set of node {0} is empty")]
    EmptyRestrictedSet(usize),
    #[error("fairness penalty needs a group column")]
    MissingGroupColumn,
    #[error(transparent)]
    Leaf(#[from] LeafError),
}

/// Time grid and weights for the discretized fairness integral.
#[derive(Debug, Clone, PartialEq)]
pub struct FairGrid {
    pub times: Vec<f64>,
    pub weights: Vec<f64>,
}

impl FairGrid {
    /// Sorted distinct times with unit weights.
    pub fn unit(times: &[f64]) -> Self {
        let mut ts = times.to_vec();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let weights = vec![1.0; ts.len()];
        Self { times: ts, weights }
    }

    /// Sorted distinct times with trapezoid quadrature weights.
    pub fn trapezoid(times: &[f64]) -> Self {
        let mut g = Self::unit(times);
        let t = &g.times;
        let k = t.len();
        for j in 0..k {
            let lo = if j == 0 { t[0] } else { t[j - 1] };
            let hi = if j + 1 == k { t[k - 1] } else { t[j + 1] };
            g.weights[j] = 0.5 * (hi - lo);
        }
        g
    }
}

/// Data, leaf family and penalty weights shared by every evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveContext<'a> {
    pub ds: &'a SurvivalDataset,
    pub spec: &'a LeafModelSpec,
    pub lambda_beta: f64,
    pub rho: f64,
    pub grid: FairGrid,
}

impl<'a> ObjectiveContext<'a> {
    pub fn new(ds: &'a SurvivalDataset, spec: &'a LeafModelSpec, lambda_beta: f64, rho: f64) -> Self {
        assert!(lambda_beta >= 0.0 && rho >= 0.0);
        Self {
            ds,
            spec,
            lambda_beta,
            rho,
            grid: FairGrid::unit(ds.times()),
        }
    }

    pub fn with_grid(mut self, grid: FairGrid) -> Self {
        self.grid = grid;
        self
    }
}

/// `(point, leaf)` pairs excluded because of a non-positive spline slope.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExclusionMask {
    pairs: BTreeSet<(usize, usize)>,
}

impl ExclusionMask {
    /// Pairs excluded at the current leaf parameters.
    pub fn compute(ds: &SurvivalDataset, params: &TreeParams, spec: &LeafModelSpec) -> Self {
        let mut pairs = BTreeSet::new();
        if spec.family.is_spline() {
            let p = ds.p();
            for leaf in params.topology.leaves() {
                let beta = params.beta(leaf);
                for i in 0..ds.n() {
                    if ds.events()[i] == 1 {
                        let slope = spec.spline_slope(beta, p, ds.times()[i]).unwrap();
                        if !(slope > 0.0) {
                            pairs.insert((i, leaf));
                        }
                    }
                }
            }
        }
        Self { pairs }
    }

    pub fn contains(&self, i: usize, leaf: usize) -> bool {
        self.pairs.contains(&(i, leaf))
    }

    pub fn insert(&mut self, i: usize, leaf: usize) {
        self.pairs.insert((i, leaf));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// How excluded terms are handled.
#[derive(Debug, Clone, Copy)]
pub enum Masking<'m> {
    /// Any term with a non-positive slope contributes zero.
    Dynamic,
    /// Only listed pairs contribute zero; a new violation makes the value
    /// infinite, which keeps a solver inside the region where the mask is
    /// valid.
    Frozen(&'m ExclusionMask),
}

/// Per-point leaf NLL honoring the exclusion rule; accumulates
/// `weight · ∇L` into `grad` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn leaf_term(
    spec: &LeafModelSpec,
    beta: &[f64],
    x: &[f64],
    t: f64,
    c: u8,
    i: usize,
    leaf: usize,
    masking: Masking,
    weight: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64, ObjectiveError> {
    let r = match grad {
        Some(g) => spec.nll_grad_acc(beta, x, t, c, weight, g),
        None => spec.nll(beta, x, t, c),
    };
    match r {
        Ok(v) => Ok(v),
        Err(LeafError::NonPositiveDerivative) => match masking {
            Masking::Frozen(m) if !m.contains(i, leaf) => Ok(f64::INFINITY),
            _ => Ok(0.0),
        },
        Err(e) => Err(e.into()),
    }
}

/// Indices of points whose HBP path passes through `s`.
pub fn restricted_set(ds: &SurvivalDataset, params: &TreeParams, s: usize) -> Vec<usize> {
    let topo = params.topology;
    (0..ds.n())
        .filter(|&i| topo.in_subtree(s, hbp_leaf(params, ds.row(i))))
        .collect()
}

/// HBP leaf of every point.
pub fn hbp_assignments(ds: &SurvivalDataset, params: &TreeParams) -> Vec<usize> {
    (0..ds.n()).map(|i| hbp_leaf(params, ds.row(i))).collect()
}

fn regularizer(params: &TreeParams, lambda: f64) -> f64 {
    0.5 * lambda * params.beta.iter().flatten().map(|b| b * b).sum::<f64>()
}

/// Restricted error with optional gradient blocks.
#[derive(Debug, Clone)]
pub struct SubtreeEval {
    pub value: f64,
    /// Indexed by `n - 1`; zero outside the subtree.
    pub grad_omega: Option<Vec<Vec<f64>>>,
    /// Indexed by leaf position; zero outside the subtree.
    pub grad_beta: Option<Vec<Vec<f64>>>,
}

/// `(1/|idx|) Σ_{i∈idx} Σ_{n∈D_L(s)} P_in^{(s)} L_in` with probabilities
/// relative to `s`, plus gradients on request.
pub fn subtree_eval(
    ctx: &ObjectiveContext,
    params: &TreeParams,
    s: usize,
    idx: &[usize],
    masking: Masking,
    want_omega: bool,
    want_beta: bool,
) -> Result<SubtreeEval, ObjectiveError> {
    if idx.is_empty() {
        return Err(ObjectiveError::EmptyRestrictedSet(s));
    }
    let topo = params.topology;
    let ds = ctx.ds;
    let p = ds.p();
    let leaves = topo.leaf_descendants(s);
    let lo = *leaves.start();
    let inv = 1.0 / idx.len() as f64;
    let mut g_omega = want_omega.then(|| vec![vec![0.0; p + 1]; topo.n_branch()]);
    let mut g_beta = want_beta.then(|| vec![vec![0.0; params.beta[0].len()]; topo.n_leaves()]);
    let mut nodes = vec![s];
    nodes.extend(topo.branch_descendants(s));
    let mut acc = vec![0.0; 2 * topo.first_leaf()];
    let mut total = 0.0;
    for &i in idx {
        let x = ds.row(i);
        let (t, c) = (ds.times()[i], ds.events()[i]);
        let probs = all_branch_probs(params, x);
        let rel = subtree_leaf_probs_from(topo, &probs, s);
        for leaf in leaves.clone() {
            let pn = rel[leaf - lo];
            if pn == 0.0 {
                acc[leaf] = 0.0;
                continue;
            }
            let g = g_beta.as_mut().map(|g| g[topo.leaf_pos(leaf)].as_mut_slice());
            let l = leaf_term(ctx.spec, params.beta(leaf), x, t, c, i, leaf, masking, pn * inv, g)?;
            acc[leaf] = pn * l;
            total += pn * l;
        }
        if let Some(go) = g_omega.as_mut() {
            for &b in nodes.iter().rev() {
                acc[b] = acc[2 * b] + acc[2 * b + 1];
            }
            for &b in &nodes {
                let pb = probs[b - 1];
                let dv = ((1.0 - pb) * acc[2 * b] - pb * acc[2 * b + 1]) * inv;
                let gb = &mut go[b - 1];
                gb[0] -= dv;
                for (gj, xj) in gb[1..].iter_mut().zip(x) {
                    *gj += dv * xj;
                }
            }
        }
    }
    let value = total * inv;
    if value.is_nan() {
        return Err(ObjectiveError::NonFinite(format!("subtree error at node {s}")));
    }
    Ok(SubtreeEval {
        value,
        grad_omega: g_omega,
        grad_beta: g_beta,
    })
}

/// Per-point restricted error `Σ_{n∈D_L(s)} P_in^{(s)} L_in`.
pub fn point_error(ctx: &ObjectiveContext, params: &TreeParams, s: usize, i: usize) -> Result<f64, ObjectiveError> {
    let topo = params.topology;
    let ds = ctx.ds;
    let x = ds.row(i);
    let probs = all_branch_probs(params, x);
    let rel = subtree_leaf_probs_from(topo, &probs, s);
    let leaves = topo.leaf_descendants(s);
    let lo = *leaves.start();
    let mut total = 0.0;
    for leaf in leaves {
        let pn = rel[leaf - lo];
        if pn > 0.0 {
            let l = leaf_term(
                ctx.spec,
                params.beta(leaf),
                x,
                ds.times()[i],
                ds.events()[i],
                i,
                leaf,
                Masking::Dynamic,
                0.0,
                None,
            )?;
            total += pn * l;
        }
    }
    Ok(total)
}

/// Regularized training error `E(ω, β)`.
pub fn tree_error(ctx: &ObjectiveContext, params: &TreeParams) -> Result<f64, ObjectiveError> {
    let all: Vec<usize> = (0..ctx.ds.n()).collect();
    let e = subtree_eval(ctx, params, 1, &all, Masking::Dynamic, false, false)?;
    let v = e.value + regularizer(params, ctx.lambda_beta);
    if !v.is_finite() {
        return Err(ObjectiveError::NonFinite("tree error".into()));
    }
    Ok(v)
}

/// Restricted error of the subtree rooted at `s` over its restricted set.
pub fn subtree_error(ctx: &ObjectiveContext, params: &TreeParams, s: usize) -> Result<f64, ObjectiveError> {
    let idx = restricted_set(ctx.ds, params, s);
    Ok(subtree_eval(ctx, params, s, &idx, Masking::Dynamic, false, false)?.value)
}

/// Gradient of [`tree_error`] with respect to `ω_n`, `n ∈ wb`.
pub fn grad_omega(
    ctx: &ObjectiveContext,
    params: &TreeParams,
    wb: &[usize],
) -> Result<Vec<Vec<f64>>, ObjectiveError> {
    let all: Vec<usize> = (0..ctx.ds.n()).collect();
    let g = subtree_eval(ctx, params, 1, &all, Masking::Dynamic, true, false)?
        .grad_omega
        .unwrap();
    Ok(wb.iter().map(|&n| g[n - 1].clone()).collect())
}

/// Gradient of [`tree_error`] with respect to `β_n`, `n ∈ wl`.
pub fn grad_beta(
    ctx: &ObjectiveContext,
    params: &TreeParams,
    wl: &[usize],
) -> Result<Vec<Vec<f64>>, ObjectiveError> {
    let all: Vec<usize> = (0..ctx.ds.n()).collect();
    let g = subtree_eval(ctx, params, 1, &all, Masking::Dynamic, false, true)?
        .grad_beta
        .unwrap();
    Ok(wl
        .iter()
        .map(|&n| {
            let beta = params.beta(n);
            g[params.topology.leaf_pos(n)]
                .iter()
                .zip(beta)
                .map(|(gi, b)| gi + ctx.lambda_beta * b)
                .collect()
        })
        .collect())
}

fn group_of(ds: &SurvivalDataset) -> Result<&[u8], ObjectiveError> {
    ds.group().ok_or(ObjectiveError::MissingGroupColumn)
}

/// Per-grid-time sums behind the fairness penalty; additive over points.
#[derive(Debug, Clone)]
struct FairSums {
    a: Vec<f64>,
    b: Vec<f64>,
    sq: Vec<f64>,
}

struct FairFrame<'a> {
    group: &'a [u8],
    n_g: f64,
    n_c: f64,
}

impl<'a> FairFrame<'a> {
    fn new(ds: &'a SurvivalDataset) -> Result<Self, ObjectiveError> {
        let group = group_of(ds)?;
        let n_g = group.iter().filter(|&&g| g == 1).count() as f64;
        Ok(Self {
            group,
            n_g,
            n_c: ds.n() as f64 - n_g,
        })
    }

    fn sums(
        &self,
        ds: &SurvivalDataset,
        spec: &LeafModelSpec,
        params: &TreeParams,
        assign: &[usize],
        grid: &FairGrid,
        pts: impl Iterator<Item = usize>,
    ) -> FairSums {
        let nt = grid.times.len();
        let mut out = FairSums {
            a: vec![0.0; nt],
            b: vec![0.0; nt],
            sq: vec![0.0; nt],
        };
        for i in pts {
            let beta = params.beta(assign[i]);
            let x = ds.row(i);
            for (k, &t) in grid.times.iter().enumerate() {
                let s = spec.survival(beta, x, t);
                if self.group[i] == 1 {
                    out.a[k] += s;
                    out.sq[k] += self.n_c * s * s;
                } else {
                    out.b[k] += s;
                    out.sq[k] += self.n_g * s * s;
                }
            }
        }
        out
    }

    fn value(grid: &FairGrid, sums: &FairSums) -> f64 {
        let v: f64 = (0..grid.times.len())
            .map(|k| grid.weights[k] * (sums.sq[k] - 2.0 * sums.a[k] * sums.b[k]))
            .sum();
        if v.is_nan() {
            v
        } else {
            v.max(0.0)
        }
    }

    /// Adds the gradient contributions of `pts` into `grads` (by leaf
    /// position), given the full-data sums.
    #[allow(clippy::too_many_arguments)]
    fn grad_acc(
        &self,
        ds: &SurvivalDataset,
        spec: &LeafModelSpec,
        params: &TreeParams,
        assign: &[usize],
        grid: &FairGrid,
        sums: &FairSums,
        pts: impl Iterator<Item = usize>,
        grads: &mut [Vec<f64>],
    ) {
        let topo = params.topology;
        let mut ds_db = vec![0.0; params.beta[0].len()];
        for i in pts {
            let leaf = assign[i];
            let beta = params.beta(leaf);
            let x = ds.row(i);
            let g = &mut grads[topo.leaf_pos(leaf)];
            for (k, &t) in grid.times.iter().enumerate() {
                let s = spec.survival_grad(beta, x, t, &mut ds_db);
                let coef = if self.group[i] == 1 {
                    2.0 * (self.n_c * s - sums.b[k])
                } else {
                    2.0 * (self.n_g * s - sums.a[k])
                } * grid.weights[k];
                for (gj, d) in g.iter_mut().zip(&ds_db) {
                    *gj += coef * d;
                }
            }
        }
    }
}

impl FairSums {
    fn add(&mut self, other: &FairSums) {
        for (v, o) in [(&mut self.a, &other.a), (&mut self.b, &other.b), (&mut self.sq, &other.sq)] {
            v.iter_mut().zip(o).for_each(|(x, y)| *x += y);
        }
    }
}

/// Fairness penalty for given leaf vectors and frozen leaf assignments,
/// with the gradient with respect to each leaf vector on request.
///
/// `Σ_{i∈G} Σ_{j∈Ḡ} Σ_k w_k (S_i(t_k) − S_j(t_k))²`, evaluated in
/// `O(N·T)` through the expansion
/// `|Ḡ| Σ_i a_i² − 2 (Σ_i a_i)(Σ_j b_j) + |G| Σ_j b_j²` at each grid time.
pub fn fairness_eval(
    ds: &SurvivalDataset,
    spec: &LeafModelSpec,
    params: &TreeParams,
    assign: &[usize],
    grid: &FairGrid,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>), ObjectiveError> {
    let frame = FairFrame::new(ds)?;
    let sums = frame.sums(ds, spec, params, assign, grid, 0..ds.n());
    let value = FairFrame::value(grid, &sums);
    if !want_grad {
        return Ok((value, None));
    }
    let mut grads = vec![vec![0.0; params.beta[0].len()]; params.topology.n_leaves()];
    frame.grad_acc(ds, spec, params, assign, grid, &sums, 0..ds.n(), &mut grads);
    Ok((value, Some(grads)))
}

/// Fairness penalty of the current tree on the context data, using HBP
/// leaf assignments.
pub fn fairness_penalty(ctx: &ObjectiveContext, params: &TreeParams) -> Result<f64, ObjectiveError> {
    let assign = hbp_assignments(ctx.ds, params);
    Ok(fairness_eval(ctx.ds, ctx.spec, params, &assign, &ctx.grid, false)?.0)
}

/// `E(ω, β) + ρ · fairness_penalty`; equals [`tree_error`] when `ρ = 0`.
pub fn fair_objective(ctx: &ObjectiveContext, params: &TreeParams) -> Result<f64, ObjectiveError> {
    let e = tree_error(ctx, params)?;
    if ctx.rho == 0.0 {
        return Ok(e);
    }
    Ok(e + ctx.rho * fairness_penalty(ctx, params)?)
}

/// Restricted error as a function of the split vectors of `nodes`, with the
/// leaf NLLs precomputed (the leaf vectors are fixed during a branch step).
#[derive(Debug, Clone)]
pub struct BranchBlock {
    s: usize,
    nodes: Vec<usize>,
    base: TreeParams,
    idx: Vec<usize>,
    /// `L_in` per restricted point, over the leaves of the subtree.
    nll: Vec<Vec<f64>>,
}

impl BranchBlock {
    pub fn new(
        ctx: &ObjectiveContext,
        params: &TreeParams,
        s: usize,
        idx: &[usize],
        nodes: &[usize],
    ) -> Result<Self, ObjectiveError> {
        if idx.is_empty() {
            return Err(ObjectiveError::EmptyRestrictedSet(s));
        }
        let ds = ctx.ds;
        let leaves = params.topology.leaf_descendants(s);
        let mut nll = Vec::with_capacity(idx.len());
        for &i in idx {
            let x = ds.row(i);
            let row = leaves
                .clone()
                .map(|leaf| {
                    leaf_term(
                        ctx.spec,
                        params.beta(leaf),
                        x,
                        ds.times()[i],
                        ds.events()[i],
                        i,
                        leaf,
                        Masking::Dynamic,
                        0.0,
                        None,
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            nll.push(row);
        }
        Ok(Self {
            s,
            nodes: nodes.to_vec(),
            base: params.clone(),
            idx: idx.to_vec(),
            nll,
        })
    }

    pub fn dim(&self) -> usize {
        self.nodes.len() * (self.base.p() + 1)
    }

    /// Current split vectors of the block, concatenated.
    pub fn theta0(&self) -> Vec<f64> {
        self.nodes.iter().flat_map(|&n| self.base.omega(n).to_vec()).collect()
    }

    /// Writes `theta` back into `params`.
    pub fn apply(&self, theta: &[f64], params: &mut TreeParams) {
        let w = self.base.p() + 1;
        for (k, &n) in self.nodes.iter().enumerate() {
            params.omega_mut(n).copy_from_slice(&theta[k * w..(k + 1) * w]);
        }
    }

    /// Restricted error at `theta`; fills `grad`.
    pub fn eval(&self, ds: &SurvivalDataset, theta: &[f64], grad: &mut [f64]) -> f64 {
        let topo = self.base.topology;
        let w = self.base.p() + 1;
        let mut params = self.base.clone();
        self.apply(theta, &mut params);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let inv = 1.0 / self.idx.len() as f64;
        let lo = *topo.leaf_descendants(self.s).start();
        let mut sub = vec![self.s];
        sub.extend(topo.branch_descendants(self.s));
        let mut acc = vec![0.0; 2 * topo.first_leaf()];
        let mut total = 0.0;
        for (r, &i) in self.idx.iter().enumerate() {
            let x = ds.row(i);
            let probs = all_branch_probs(&params, x);
            let rel = subtree_leaf_probs_from(topo, &probs, self.s);
            for (k, (&pn, &l)) in rel.iter().zip(&self.nll[r]).enumerate() {
                let v = if pn == 0.0 { 0.0 } else { pn * l };
                acc[lo + k] = v;
                total += v;
            }
            for &b in sub.iter().rev() {
                acc[b] = acc[2 * b] + acc[2 * b + 1];
            }
            for (k, &b) in self.nodes.iter().enumerate() {
                let pb = probs[b - 1];
                let dv = ((1.0 - pb) * acc[2 * b] - pb * acc[2 * b + 1]) * inv;
                let gb = &mut grad[k * w..(k + 1) * w];
                gb[0] -= dv;
                for (gj, xj) in gb[1..].iter_mut().zip(x) {
                    *gj += dv * xj;
                }
            }
        }
        total * inv
    }
}

/// Leaf-step objective over the leaf vectors of `leaves` with the split
/// vectors frozen: the mean P-weighted NLL over the restricted set, the ridge
/// term on each block vector and, when `ρ > 0`, the fairness penalty on the
/// full data with frozen HBP assignments.
#[derive(Debug, Clone)]
pub struct LeafBlock {
    leaves: Vec<usize>,
    base: TreeParams,
    idx: Vec<usize>,
    /// Routing weight of each restricted point, per block leaf.
    weights: Vec<Vec<f64>>,
    mask: ExclusionMask,
    lambda: f64,
    rho: f64,
    assign: Vec<usize>,
    /// Points whose HBP leaf is in the block.
    movable: Vec<usize>,
    /// Fairness sums of the remaining points, which the block cannot change.
    fixed: Option<FairSums>,
}

impl LeafBlock {
    pub fn new(
        ctx: &ObjectiveContext,
        params: &TreeParams,
        s: usize,
        idx: &[usize],
        leaves: &[usize],
    ) -> Result<Self, ObjectiveError> {
        if idx.is_empty() {
            return Err(ObjectiveError::EmptyRestrictedSet(s));
        }
        let topo = params.topology;
        let lo = *topo.leaf_descendants(s).start();
        let mut weights = vec![Vec::with_capacity(idx.len()); leaves.len()];
        for &i in idx {
            let probs = all_branch_probs(params, ctx.ds.row(i));
            let rel = subtree_leaf_probs_from(topo, &probs, s);
            for (k, &leaf) in leaves.iter().enumerate() {
                weights[k].push(rel[leaf - lo]);
            }
        }
        let (assign, movable, fixed) = if ctx.rho > 0.0 {
            let frame = FairFrame::new(ctx.ds)?;
            let assign = hbp_assignments(ctx.ds, params);
            let (movable, rest): (Vec<usize>, Vec<usize>) =
                (0..ctx.ds.n()).partition(|&i| leaves.contains(&assign[i]));
            let fixed = frame.sums(ctx.ds, ctx.spec, params, &assign, &ctx.grid, rest.into_iter());
            (assign, movable, Some(fixed))
        } else {
            (Vec::new(), Vec::new(), None)
        };
        Ok(Self {
            leaves: leaves.to_vec(),
            base: params.clone(),
            idx: idx.to_vec(),
            weights,
            mask: ExclusionMask::compute(ctx.ds, params, ctx.spec),
            lambda: ctx.lambda_beta,
            rho: ctx.rho,
            assign,
            movable,
            fixed,
        })
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    /// Whether the block decomposes into independent per-leaf problems.
    pub fn separable(&self) -> bool {
        self.rho == 0.0
    }

    pub fn block_len(&self) -> usize {
        self.base.beta[0].len()
    }

    pub fn theta0(&self) -> Vec<f64> {
        self.leaves.iter().flat_map(|&n| self.base.beta(n).to_vec()).collect()
    }

    pub fn apply(&self, theta: &[f64], params: &mut TreeParams) {
        let m = self.block_len();
        for (k, &n) in self.leaves.iter().enumerate() {
            params.beta_mut(n).copy_from_slice(&theta[k * m..(k + 1) * m]);
        }
    }

    /// Objective of the single leaf at block position `k` (no fairness term).
    pub fn eval_leaf(&self, ctx: &ObjectiveContext, k: usize, beta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let ds = ctx.ds;
        let leaf = self.leaves[k];
        let inv = 1.0 / self.idx.len() as f64;
        let mut total = 0.0;
        for (&i, &w) in self.idx.iter().zip(&self.weights[k]) {
            if w == 0.0 {
                continue;
            }
            let r = leaf_term(
                ctx.spec,
                beta,
                ds.row(i),
                ds.times()[i],
                ds.events()[i],
                i,
                leaf,
                Masking::Frozen(&self.mask),
                w * inv,
                Some(grad),
            );
            match r {
                Ok(v) => total += w * v,
                Err(_) => return f64::NAN,
            }
        }
        let mut reg = 0.0;
        for (g, b) in grad.iter_mut().zip(beta) {
            *g += self.lambda * b;
            reg += b * b;
        }
        total * inv + 0.5 * self.lambda * reg
    }

    /// Joint objective over all block leaves.
    pub fn eval(&self, ctx: &ObjectiveContext, theta: &[f64], grad: &mut [f64]) -> f64 {
        let m = self.block_len();
        let mut total = 0.0;
        for k in 0..self.leaves.len() {
            total += self.eval_leaf(ctx, k, &theta[k * m..(k + 1) * m], &mut grad[k * m..(k + 1) * m]);
        }
        if let (Some(fixed), true) = (&self.fixed, total.is_finite()) {
            let ds = ctx.ds;
            let frame = FairFrame::new(ds).expect("group column checked at construction");
            let mut params = self.base.clone();
            self.apply(theta, &mut params);
            let mut sums = frame.sums(ds, ctx.spec, &params, &self.assign, &ctx.grid, self.movable.iter().copied());
            sums.add(fixed);
            let pen = FairFrame::value(&ctx.grid, &sums);
            let topo = params.topology;
            let mut g = vec![vec![0.0; m]; topo.n_leaves()];
            frame.grad_acc(
                ds,
                ctx.spec,
                &params,
                &self.assign,
                &ctx.grid,
                &sums,
                self.movable.iter().copied(),
                &mut g,
            );
            total += self.rho * pen;
            for (k, &n) in self.leaves.iter().enumerate() {
                for (a, b) in grad[k * m..(k + 1) * m].iter_mut().zip(&g[topo.leaf_pos(n)]) {
                    *a += self.rho * b;
                }
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leaf::Family;
    use crate::tree::TreeTopology;

    fn one_point(t: f64, c: u8) -> SurvivalDataset {
        SurvivalDataset::new(vec![0.5], 1, vec![t], vec![c], Some(vec![1]), None).unwrap()
    }

    #[test]
    fn hand_example_tree_error() {
        let ds = one_point(2.0, 0);
        let spec = LeafModelSpec::parametric(Family::Exp);
        let ctx = ObjectiveContext::new(&ds, &spec, 0.0, 0.0);
        let params = TreeParams::zeros(TreeTopology::new(1).unwrap(), 1, 2);
        assert_eq!(tree_error(&ctx, &params).unwrap(), 2.0);
        let ctx = ObjectiveContext::new(&ds, &spec, 4.0, 0.0);
        assert_eq!(tree_error(&ctx, &params).unwrap(), 2.0);
        assert_eq!(subtree_error(&ctx, &params, 1).unwrap(), 2.0);
    }

    #[test]
    fn empty_restricted_set_is_an_error() {
        let ds = one_point(2.0, 1);
        let spec = LeafModelSpec::parametric(Family::Exp);
        let ctx = ObjectiveContext::new(&ds, &spec, 0.0, 0.0);
        let params = TreeParams::zeros(TreeTopology::new(2).unwrap(), 1, 2);
        assert_eq!(
            subtree_error(&ctx, &params, 3),
            Err(ObjectiveError::EmptyRestrictedSet(3))
        );
    }

    #[test]
    fn saturated_branch_has_vanishing_gradient() {
        let ds = one_point(1.0, 1);
        let spec = LeafModelSpec::parametric(Family::Exp);
        let ctx = ObjectiveContext::new(&ds, &spec, 0.0, 0.0);
        let mut params = TreeParams::zeros(TreeTopology::new(1).unwrap(), 1, 2);
        params.omega[0] = vec![-60.0, 0.0];
        params.beta[1] = vec![1.0, 0.0];
        let g = grad_omega(&ctx, &params, &[1]).unwrap();
        assert!(g[0].iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn unreachable_leaf_gradient_is_pure_ridge() {
        let ds = one_point(1.0, 1);
        let spec = LeafModelSpec::parametric(Family::Exp);
        let ctx = ObjectiveContext::new(&ds, &spec, 4.0, 0.0);
        let mut params = TreeParams::zeros(TreeTopology::new(1).unwrap(), 1, 2);
        params.omega[0] = vec![-1e4, 0.0];
        params.beta[1] = vec![0.3, -0.2];
        let g = grad_beta(&ctx, &params, &[3]).unwrap();
        assert_eq!(g[0], vec![4.0 * 0.3, 4.0 * -0.2]);
    }

    #[test]
    fn fairness_single_pair_on_five_times() {
        // Exp leaves: S ≡ 1 (rate e^-700) and S ≈ 0 (rate e^700).
        let ds = SurvivalDataset::new(
            vec![0.0, 1.0],
            1,
            vec![1.0, 2.0],
            vec![1, 1],
            Some(vec![1, 0]),
            None,
        )
        .unwrap();
        let spec = LeafModelSpec::parametric(Family::Exp);
        let mut params = TreeParams::zeros(TreeTopology::new(1).unwrap(), 1, 2);
        params.beta[0] = vec![-700.0, 0.0];
        params.beta[1] = vec![700.0, 0.0];
        let grid = FairGrid {
            times: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            weights: vec![1.0; 5],
        };
        let (v, _) = fairness_eval(&ds, &spec, &params, &[2, 3], &grid, false).unwrap();
        assert!((v - 5.0).abs() < 1e-12);
        let (v, _) = fairness_eval(&ds, &spec, &params, &[2, 2], &grid, false).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn fairness_requires_group() {
        let ds = SurvivalDataset::new(vec![0.0], 1, vec![1.0], vec![1], None, None).unwrap();
        let spec = LeafModelSpec::parametric(Family::Exp);
        let ctx = ObjectiveContext::new(&ds, &spec, 0.0, 1.0);
        let params = TreeParams::zeros(TreeTopology::new(1).unwrap(), 1, 2);
        assert_eq!(
            fairness_penalty(&ctx, &params),
            Err(ObjectiveError::MissingGroupColumn)
        );
    }

    #[test]
    fn trapezoid_weights_integrate_linear_function() {
        let g = FairGrid::trapezoid(&[0.0, 1.0, 3.0, 3.0, 4.0]);
        assert_eq!(g.times, vec![0.0, 1.0, 3.0, 4.0]);
        let integral: f64 = g.times.iter().zip(&g.weights).map(|(t, w)| t * w).sum();
        assert!((integral - 8.0).abs() < 1e-12);
    }
}
