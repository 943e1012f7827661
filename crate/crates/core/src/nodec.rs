//! Node-based decomposition training with data-point reassignment.
//!
//! Each macro iteration visits every branch node `s` in heap order. The
//! branch step updates the split vectors of the subtree rooted at `s` (only
//! `ω_1` when `s` is the root of a deeper tree), either by minimizing the
//! restricted error or, when the deterministic routing at `s` is imbalanced,
//! by fitting a weighted logistic regression that pushes points toward the
//! minority child. The leaf step then refits the leaves of the subtree. The
//! best iterate by the full objective is returned.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SurvivalDataset;
use crate::leaf::{LeafError, LeafModelSpec};
use crate::metrics::kaplan_meier;
use crate::numeric::{dot, least_squares, softplus};
use crate::objective::{
    fair_objective, hbp_assignments, leaf_term, point_error, restricted_set, BranchBlock, FairGrid,
    LeafBlock, Masking, ObjectiveContext, ObjectiveError,
};
use crate::optimizer::{minimize, SolveOptions, SolveReport};
use crate::splines::{basis, spline_deriv};
use crate::tree::{branch_prob_unchecked, hbp_leaf, TreeParams, TreeTopology, TreeView};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Leaf(#[from] LeafError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least {need} points for depth {depth}, got {got}")]
    TooFewPoints { need: usize, depth: u32, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Random,
    Clustering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairWeights {
    Unit,
    Trapezoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub depth: u32,
    pub max_it: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub theta: f64,
    /// Ridge weight on the mean NLL. `None` uses `4/N`, a penalty of
    /// `2‖β‖²` on the summed NLL.
    pub lambda_beta: Option<f64>,
    pub rho: f64,
    pub restarts: usize,
    pub seed: u64,
    pub tol_rel: f64,
    pub init_mode: InitMode,
    pub clustering_repeats: usize,
    /// Internal spline knots.
    pub knots: usize,
    pub fair_weights: FairWeights,
    /// Iteration cap for each subproblem solve.
    pub solver_max_iter: usize,
    pub solver_gtol: f64,
    /// Relative objective decrease below which a subproblem solve stops.
    pub solver_ftol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            max_it: 10,
            eps1: 0.1,
            eps2: 0.3,
            eps3: 0.4,
            theta: 0.8,
            lambda_beta: None,
            rho: 0.0,
            restarts: 20,
            seed: 0,
            tol_rel: 1e-6,
            init_mode: InitMode::Random,
            clustering_repeats: 5,
            knots: 2,
            fair_weights: FairWeights::Unit,
            solver_max_iter: 500,
            solver_gtol: 1e-5,
            solver_ftol: 2.2e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        for (name, v) in [("eps1", self.eps1), ("eps2", self.eps2), ("eps3", self.eps3), ("theta", self.theta)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(&format!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.lambda_beta.unwrap_or(0.0) >= 0.0) || !(self.rho >= 0.0) {
            return bad("penalty weights must be nonnegative");
        }
        if self.restarts == 0 || self.clustering_repeats == 0 {
            return bad("restarts and clustering repeats must be positive");
        }
        Ok(())
    }

    /// Thresholds in effect during macro iteration `it` (1-based).
    pub fn thresholds(&self, it: usize) -> Thresholds {
        let f = self.theta.powi(it as i32 - 1);
        Thresholds {
            eps1: self.eps1 * f,
            eps2: self.eps2 * f,
            eps3: self.eps3 * f,
        }
    }

    /// Ridge weight in effect on `n` training points.
    pub fn lambda(&self, n: usize) -> f64 {
        self.lambda_beta.unwrap_or(4.0 / n.max(1) as f64)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            gtol: self.solver_gtol,
            max_iter: self.solver_max_iter,
            ftol: self.solver_ftol,
            ..SolveOptions::default()
        }
    }

    pub fn fair_grid(&self, ds: &SurvivalDataset) -> FairGrid {
        match self.fair_weights {
            FairWeights::Unit => FairGrid::unit(ds.times()),
            FairWeights::Trapezoid => FairGrid::trapezoid(ds.times()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
}

/// Which branch-step variant ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchTaken {
    Balanced,
    Moderate,
    High,
    /// No point reaches `s`.
    Skipped,
}

impl BranchTaken {
    pub fn name(self) -> &'static str {
        match self {
            BranchTaken::Balanced => "balanced",
            BranchTaken::Moderate => "moderate",
            BranchTaken::High => "high",
            BranchTaken::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub it: usize,
    pub k: usize,
    pub s: usize,
    pub error: f64,
    pub error_best: f64,
    pub branch_taken: BranchTaken,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_error: f64,
    pub rows: Vec<HistoryRow>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn error_best(&self) -> f64 {
        self.rows.last().map_or(self.initial_error, |r| r.error_best)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["it", "k", "s", "E", "error_best", "branch_taken", "eps1", "eps2", "eps3"])?;
        for r in &self.rows {
            wr.write_record([
                r.it.to_string(),
                r.k.to_string(),
                r.s.to_string(),
                r.error.to_string(),
                r.error_best.to_string(),
                r.branch_taken.name().to_string(),
                r.eps1.to_string(),
                r.eps2.to_string(),
                r.eps3.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Branch and leaf working sets for inner iteration at `s`.
pub fn working_sets(topo: TreeTopology, s: usize) -> (Vec<usize>, Vec<usize>) {
    if s == 1 && topo.depth() > 1 {
        (vec![1], Vec::new())
    } else {
        let mut wb = vec![s];
        wb.extend(topo.branch_descendants(s));
        (wb, topo.leaf_descendants(s).collect())
    }
}

fn event_stats(ds: &SurvivalDataset) -> (f64, f64) {
    let d = ds.events().iter().map(|&c| f64::from(c)).sum::<f64>().max(1.0);
    (d, ds.times().iter().sum())
}

/// Default leaf vector: covariate-free marginal fit for parametric leaves,
/// `s(y) = y` for spline leaves.
pub fn default_leaf(ds: &SurvivalDataset, spec: &LeafModelSpec) -> Vec<f64> {
    let p = ds.p();
    let mut beta = vec![0.0; spec.n_params(p)];
    if spec.family.is_spline() {
        beta[p + 1] = 1.0;
    } else {
        let (d, total) = event_stats(ds);
        beta[0] = match spec.family {
            crate::leaf::Family::Exp => (d / total).ln(),
            _ => (total / d).ln(),
        };
    }
    beta
}

/// Split vectors uniform on `(−1, 1)`, default leaves.
pub fn init_random(ds: &SurvivalDataset, spec: &LeafModelSpec, depth: u32, seed: u64) -> Result<TreeParams, TrainError> {
    let topo = TreeTopology::new(depth).map_err(|e| TrainError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ds.p();
    let omega = (0..topo.n_branch())
        .map(|_| (0..=p).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let beta = vec![default_leaf(ds, spec); topo.n_leaves()];
    Ok(TreeParams::new(topo, omega, beta).expect("consistent blocks"))
}

fn spline_slope_ok(spec: &LeafModelSpec, eta: &[f64], check_ys: &[f64]) -> bool {
    let ks = spec.knots.as_ref().unwrap();
    eta[1] > 0.0 && check_ys.iter().all(|&y| spline_deriv(ks, eta, y) > 0.0)
}

fn slope_check_points(ds: &SurvivalDataset, spec: &LeafModelSpec) -> Vec<f64> {
    let ks = spec.knots.as_ref().unwrap();
    let mut ys: Vec<f64> = (0..=64)
        .map(|j| ks.k_min + (ks.k_max - ks.k_min) * f64::from(j) / 64.0)
        .collect();
    ys.extend(
        ds.times()
            .iter()
            .zip(ds.events())
            .filter(|(_, &c)| c == 1)
            .map(|(t, _)| t.ln()),
    );
    ys
}

/// Spline coefficients from a least-squares fit of the transformed
/// Kaplan-Meier curve of `sample`: `log(−log S)` for PH, `log((1−S)/S)`
/// for PO. Falls back to a linear fit and then to `s(y) = y` when the fit
/// does not have a positive slope.
pub fn km_spline_fit(ds: &SurvivalDataset, spec: &LeafModelSpec, sample: &[usize], check_ys: &[f64]) -> Vec<f64> {
    let ks = spec.knots.as_ref().expect("spline spec");
    let m = ks.m();
    let times: Vec<f64> = sample.iter().map(|&i| ds.times()[i]).collect();
    let events: Vec<u8> = sample.iter().map(|&i| ds.events()[i]).collect();
    let km = kaplan_meier(&times, &events);
    let ph = spec.family == crate::leaf::Family::SplinePh;
    let mut ys = Vec::new();
    let mut targets = Vec::new();
    for (&t, &s) in km.times.iter().zip(&km.values) {
        if s > 0.0 && s < 1.0 {
            ys.push(t.ln());
            targets.push(if ph { (-s.ln()).ln() } else { ((1.0 - s) / s).ln() });
        }
    }
    let mut fallback = vec![0.0; m + 2];
    fallback[1] = 1.0;
    if ys.len() >= m + 2 {
        let rows: Vec<Vec<f64>> = ys
            .iter()
            .map(|&y| {
                let mut r = vec![1.0, y];
                r.extend((1..=m).map(|j| basis(ks, j, y)));
                r
            })
            .collect();
        if let Some(eta) = least_squares(&rows, &targets, 1e-8) {
            if spline_slope_ok(spec, &eta, check_ys) {
                return eta;
            }
        }
    }
    if ys.len() >= 2 {
        let rows: Vec<Vec<f64>> = ys.iter().map(|&y| vec![1.0, y]).collect();
        if let Some(lin) = least_squares(&rows, &targets, 1e-8) {
            if lin[1] > 0.0 {
                let mut eta = vec![0.0; m + 2];
                eta[..2].copy_from_slice(&lin);
                return eta;
            }
        }
    }
    fallback
}

/// Replaces the spline coefficients of each leaf by a Kaplan-Meier
/// least-squares fit on `N / 2^D` points drawn with replacement from the
/// leaf's HBP cluster.
pub fn init_spline_km(ds: &SurvivalDataset, spec: &LeafModelSpec, params: &mut TreeParams, seed: u64) {
    if !spec.family.is_spline() {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = params.topology;
    let p = ds.p();
    let assign = hbp_assignments(ds, params);
    let size = (ds.n() / topo.n_leaves()).max(1);
    let all: Vec<usize> = (0..ds.n()).collect();
    let check = slope_check_points(ds, spec);
    for leaf in topo.leaves() {
        let members: Vec<usize> = (0..ds.n()).filter(|&i| assign[i] == leaf).collect();
        let pool = if members.is_empty() { &all } else { &members };
        let sample: Vec<usize> = (0..size).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        let eta = km_spline_fit(ds, spec, &sample, &check);
        let beta = params.beta_mut(leaf);
        beta[..p].iter_mut().for_each(|g| *g = 0.0);
        beta[p..].copy_from_slice(&eta);
    }
}

/// Weighted ridge logistic regression for the split at one node, with
/// `r_i = 1` meaning "route left":
/// `(1/n) Σ w_i ℓ(r_i, p_i) + (1/(2n)) ‖ω_{1..p}‖²`.
pub fn wlr_objective(xs: &[&[f64]], r: &[f64], w: &[f64], omega: &[f64], grad: &mut [f64]) -> f64 {
    let n = xs.len() as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    for ((x, &ri), &wi) in xs.iter().zip(r).zip(w) {
        let v = dot(&omega[1..], x) - omega[0];
        total += wi * (ri * softplus(-v) + (1.0 - ri) * softplus(v));
        let d = wi * (branch_prob_unchecked(omega, x) - ri) / n;
        grad[0] -= d;
        for (g, xj) in grad[1..].iter_mut().zip(*x) {
            *g += d * xj;
        }
    }
    let mut reg = 0.0;
    for (g, o) in grad[1..].iter_mut().zip(&omega[1..]) {
        *g += o / n;
        reg += o * o;
    }
    total / n + 0.5 * reg / n
}

/// Fits one split vector by [`wlr_objective`], starting from `omega0`.
pub fn fit_wlr(xs: &[&[f64]], r: &[f64], w: &[f64], omega0: &[f64], opts: &SolveOptions) -> Vec<f64> {
    match minimize(|o, g| wlr_objective(xs, r, w, o, g), omega0, opts) {
        Ok(rep) => rep.x,
        Err(_) => omega0.to_vec(),
    }
}

/// Leaf reached by `x` when forced to the child of `s` opposite to its
/// current routing, then following the HBP rule.
fn rerouted_leaf(params: &TreeParams, s: usize, x: &[f64]) -> usize {
    let topo = params.topology;
    let mut n = if branch_prob_unchecked(params.omega(s), x) >= 0.5 {
        2 * s + 1
    } else {
        2 * s
    };
    while n < topo.first_leaf() {
        n = if branch_prob_unchecked(params.omega(n), x) >= 0.5 { 2 * n } else { 2 * n + 1 };
    }
    n
}

/// Outcome of a branch step.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchUpdate {
    pub taken: BranchTaken,
    pub left_ratio: f64,
    pub weights: Option<(f64, f64)>,
    pub flipped: Vec<usize>,
}

/// Branch step on `wb` (whose minimum is the subtree root `s`).
pub fn update_branch_node(
    ctx: &ObjectiveContext,
    params: &mut TreeParams,
    wb: &[usize],
    eps: Thresholds,
    opts: &SolveOptions,
) -> Result<BranchUpdate, TrainError> {
    let ds = ctx.ds;
    let s = *wb.iter().min().expect("nonempty working set");
    let idx = restricted_set(ds, params, s);
    if idx.is_empty() {
        return Ok(BranchUpdate {
            taken: BranchTaken::Skipped,
            left_ratio: f64::NAN,
            weights: None,
            flipped: Vec::new(),
        });
    }
    let left: Vec<bool> = idx
        .iter()
        .map(|&i| branch_prob_unchecked(params.omega(s), ds.row(i)) >= 0.5)
        .collect();
    let n_left = left.iter().filter(|&&l| l).count();
    let n_s = idx.len() as f64;
    let l_s = n_left as f64 / n_s;
    let imbalanced = (l_s <= eps.eps1 || l_s >= 1.0 - eps.eps1) && eps.eps1 * n_s >= 1.0;
    if !imbalanced {
        let block = BranchBlock::new(ctx, params, s, &idx, wb)?;
        let theta0 = block.theta0();
        if let Ok(rep) = minimize(|th, g| block.eval(ds, th, g), &theta0, opts) {
            block.apply(&rep.x, params);
        }
        return Ok(BranchUpdate {
            taken: BranchTaken::Balanced,
            left_ratio: l_s,
            weights: None,
            flipped: Vec::new(),
        });
    }
    let w_left = 1.0 / (2.0 * l_s);
    let w_right = 1.0 / (2.0 * (1.0 - l_s));
    let mut r: Vec<f64> = left.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let w: Vec<f64> = left.iter().map(|&l| if l { w_left } else { w_right }).collect();
    let high = l_s <= eps.eps2 || l_s >= 1.0 - eps.eps2;
    let mut flipped = Vec::new();
    if high {
        let dmax_left = 2 * n_left >= idx.len();
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (pos, &i) in idx.iter().enumerate() {
            if left[pos] == dmax_left {
                cand.push((point_error(ctx, params, s, i)?, i, pos));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let quota = (eps.eps3 * n_s).ceil() as usize;
        let p = ds.p();
        for &(_, i, pos) in &cand {
            if flipped.len() >= quota {
                break;
            }
            if ds.events()[i] == 1 {
                let target = rerouted_leaf(params, s, ds.row(i));
                if let Some(slope) = ctx.spec.spline_slope(params.beta(target), p, ds.times()[i]) {
                    if !(slope > 0.0) {
                        continue;
                    }
                }
            }
            r[pos] = 1.0 - r[pos];
            flipped.push(i);
        }
    }
    let xs: Vec<&[f64]> = idx.iter().map(|&i| ds.row(i)).collect();
    let omega = fit_wlr(&xs, &r, &w, params.omega(s), opts);
    params.omega_mut(s).copy_from_slice(&omega);
    Ok(BranchUpdate {
        taken: if high { BranchTaken::High } else { BranchTaken::Moderate },
        left_ratio: l_s,
        weights: Some((w_left, w_right)),
        flipped,
    })
}

/// Leaf step on `wl` over the restricted set of `s`. With `ρ = 0` each leaf
/// is solved on its own unless `joint` is set.
pub fn ln_step(
    ctx: &ObjectiveContext,
    params: &mut TreeParams,
    s: usize,
    wl: &[usize],
    opts: &SolveOptions,
    joint: bool,
) -> Result<Vec<SolveReport>, TrainError> {
    if wl.is_empty() {
        return Ok(Vec::new());
    }
    let idx = restricted_set(ctx.ds, params, s);
    if idx.is_empty() {
        return Ok(Vec::new());
    }
    let block = LeafBlock::new(ctx, params, s, &idx, wl)?;
    let mut reports = Vec::new();
    if block.separable() && !joint {
        let m = block.block_len();
        let mut theta = block.theta0();
        for k in 0..wl.len() {
            let b0 = theta[k * m..(k + 1) * m].to_vec();
            match minimize(|b, g| block.eval_leaf(ctx, k, b, g), &b0, opts) {
                Ok(rep) => {
                    theta[k * m..(k + 1) * m].copy_from_slice(&rep.x);
                    reports.push(rep);
                }
                Err(e) => log::debug!("leaf {} kept: {e}", wl[k]),
            }
        }
        block.apply(&theta, params);
    } else {
        match minimize(|th, g| block.eval(ctx, th, g), &block.theta0(), opts) {
            Ok(rep) => {
                block.apply(&rep.x, params);
                reports.push(rep);
            }
            Err(e) => log::debug!("leaf block at {s} kept: {e}"),
        }
    }
    Ok(reports)
}

/// Regularized maximum likelihood of one leaf on `idx`.
pub fn fit_leaf_mle(
    ds: &SurvivalDataset,
    spec: &LeafModelSpec,
    idx: &[usize],
    beta0: &[f64],
    lambda: f64,
    opts: &SolveOptions,
) -> Vec<f64> {
    if idx.is_empty() {
        return beta0.to_vec();
    }
    let inv = 1.0 / idx.len() as f64;
    let f = |b: &[f64], g: &mut [f64]| {
        g.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for &i in idx {
            match leaf_term(
                spec,
                b,
                ds.row(i),
                ds.times()[i],
                ds.events()[i],
                i,
                0,
                Masking::Frozen(&Default::default()),
                inv,
                Some(g),
            ) {
                Ok(v) => total += v,
                Err(_) => return f64::NAN,
            }
        }
        let mut reg = 0.0;
        for (gj, bj) in g.iter_mut().zip(b) {
            *gj += lambda * bj;
            reg += bj * bj;
        }
        total * inv + 0.5 * lambda * reg
    };
    minimize(f, beta0, opts).map_or_else(|_| beta0.to_vec(), |r| r.x)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(ds: &SurvivalDataset, idx: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; ds.p()];
    for &i in idx {
        c.iter_mut().zip(ds.row(i)).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|a| *a /= idx.len().max(1) as f64);
    c
}

/// Two-means with k-means++ seeding; `true` marks the first cluster.
pub fn two_means(ds: &SurvivalDataset, idx: &[usize], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = idx.len();
    let first = idx[rng.gen_range(0..n)];
    let d2: Vec<f64> = idx.iter().map(|&i| sq_dist(ds.row(i), ds.row(first))).collect();
    let total: f64 = d2.iter().sum();
    if total == 0.0 {
        return vec![true; n];
    }
    let mut u = rng.gen_range(0.0..total);
    let mut second = idx[n - 1];
    for (k, &d) in d2.iter().enumerate() {
        if u < d {
            second = idx[k];
            break;
        }
        u -= d;
    }
    let mut c = [ds.row(first).to_vec(), ds.row(second).to_vec()];
    let mut lab = vec![true; n];
    for _ in 0..100 {
        let new: Vec<bool> = idx
            .iter()
            .map(|&i| sq_dist(ds.row(i), &c[0]) <= sq_dist(ds.row(i), &c[1]))
            .collect();
        let changed = new != lab;
        lab = new;
        let a: Vec<usize> = idx.iter().zip(&lab).filter(|(_, &l)| l).map(|(&i, _)| i).collect();
        let b: Vec<usize> = idx.iter().zip(&lab).filter(|(_, &l)| !l).map(|(&i, _)| i).collect();
        if a.is_empty() || b.is_empty() {
            break;
        }
        c = [centroid(ds, &a), centroid(ds, &b)];
        if !changed {
            break;
        }
    }
    lab
}

/// Median split on the first principal component; `true` is the lower half.
pub fn pca_median_split(ds: &SurvivalDataset, idx: &[usize]) -> Vec<bool> {
    let p = ds.p();
    let mu = centroid(ds, idx);
    let mut cov = vec![vec![0.0; p]; p];
    for &i in idx {
        let x = ds.row(i);
        for a in 0..p {
            for b in 0..p {
                cov[a][b] += (x[a] - mu[a]) * (x[b] - mu[b]);
            }
        }
    }
    let mut v = vec![1.0; p];
    for _ in 0..200 {
        let mut nv: Vec<f64> = (0..p).map(|a| dot(&cov[a], &v)).collect();
        let norm = nv.iter().map(|z| z * z).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        nv.iter_mut().for_each(|z| *z /= norm);
        v = nv;
    }
    let proj: Vec<f64> = idx.iter().map(|&i| dot(ds.row(i), &v)).collect();
    let mut order: Vec<usize> = (0..idx.len()).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    let mut lab = vec![false; idx.len()];
    for &k in &order[..idx.len().div_ceil(2)] {
        lab[k] = true;
    }
    lab
}

/// Davies-Bouldin index of the nonempty clusters (lower is better).
pub fn davies_bouldin(ds: &SurvivalDataset, clusters: &[Vec<usize>]) -> f64 {
    let cl: Vec<&Vec<usize>> = clusters.iter().filter(|c| !c.is_empty()).collect();
    if cl.len() < 2 {
        return f64::INFINITY;
    }
    let cents: Vec<Vec<f64>> = cl.iter().map(|c| centroid(ds, c)).collect();
    let scatter: Vec<f64> = cl
        .iter()
        .zip(&cents)
        .map(|(c, m)| c.iter().map(|&i| sq_dist(ds.row(i), m).sqrt()).sum::<f64>() / c.len() as f64)
        .collect();
    let k = cl.len();
    let mut total = 0.0;
    for a in 0..k {
        let mut worst: f64 = 0.0;
        for b in 0..k {
            if a != b {
                let d = sq_dist(&cents[a], &cents[b]).sqrt();
                let r = if d > 0.0 { (scatter[a] + scatter[b]) / d } else { f64::INFINITY };
                worst = worst.max(r);
            }
        }
        total += worst;
    }
    total / k as f64
}

/// One top-down clustering pass: the points at each node, heap-indexed.
pub fn cluster_tree(ds: &SurvivalDataset, topo: TreeTopology, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut at = vec![Vec::new(); 2 * topo.first_leaf()];
    at[1] = (0..ds.n()).collect();
    for n in topo.branch_nodes() {
        let idx = std::mem::take(&mut at[n]);
        let lab = if idx.len() < 2 {
            vec![true; idx.len()]
        } else {
            let l = two_means(ds, &idx, rng);
            if l.iter().all(|&v| v) || l.iter().all(|&v| !v) {
                pca_median_split(ds, &idx)
            } else {
                l
            }
        };
        for (&i, &l) in idx.iter().zip(&lab) {
            at[if l { 2 * n } else { 2 * n + 1 }].push(i);
        }
        at[n] = idx;
    }
    at
}

/// Clustering-based initialization: repeated top-down 2-means, keep the
/// run with the lowest Davies-Bouldin index over the leaf clusters, fit
/// each split by logistic regression and each leaf by regularized maximum
/// likelihood on its cluster.
pub fn init_clustering(
    ds: &SurvivalDataset,
    spec: &LeafModelSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TreeParams, Vec<f64>), TrainError> {
    let topo = TreeTopology::new(cfg.depth).map_err(|e| TrainError::Config(e.to_string()))?;
    if ds.n() < topo.n_leaves() {
        return Err(TrainError::TooFewPoints {
            need: topo.n_leaves(),
            depth: cfg.depth,
            got: ds.n(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut scores = Vec::with_capacity(cfg.clustering_repeats);
    for _ in 0..cfg.clustering_repeats {
        let at = cluster_tree(ds, topo, &mut rng);
        let db = davies_bouldin(ds, &at[topo.first_leaf()..]);
        scores.push(db);
        if best.as_ref().is_none_or(|(b, _)| db < *b) {
            best = Some((db, at));
        }
    }
    let at = best.unwrap().1;
    let opts = cfg.solve_options();
    let p = ds.p();
    let mut params = TreeParams::zeros(topo, p, spec.n_params(p));
    for n in topo.branch_nodes() {
        let leaves_l: Vec<usize> = topo.leaf_descendants(2 * n).flat_map(|l| at[l].clone()).collect();
        let leaves_r: Vec<usize> = topo.leaf_descendants(2 * n + 1).flat_map(|l| at[l].clone()).collect();
        let xs: Vec<&[f64]> = leaves_l.iter().chain(&leaves_r).map(|&i| ds.row(i)).collect();
        if xs.is_empty() {
            continue;
        }
        let r: Vec<f64> = leaves_l.iter().map(|_| 1.0).chain(leaves_r.iter().map(|_| 0.0)).collect();
        let w = vec![1.0; xs.len()];
        let omega = fit_wlr(&xs, &r, &w, &vec![0.0; p + 1], &opts);
        params.omega_mut(n).copy_from_slice(&omega);
    }
    let check = if spec.family.is_spline() { slope_check_points(ds, spec) } else { Vec::new() };
    let mut leaf_rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[1]));
    for leaf in topo.leaves() {
        let members = &at[leaf];
        let mut beta0 = default_leaf(ds, spec);
        if spec.family.is_spline() && !members.is_empty() {
            let size = (ds.n() / topo.n_leaves()).max(1);
            let sample: Vec<usize> = (0..size).map(|_| *members.choose(&mut leaf_rng).unwrap()).collect();
            let eta = km_spline_fit(ds, spec, &sample, &check);
            beta0[p..].copy_from_slice(&eta);
        }
        let beta = fit_leaf_mle(ds, spec, members, &beta0, cfg.lambda(ds.n()), &opts);
        params.beta_mut(leaf).copy_from_slice(&beta);
    }
    Ok((params, scores))
}

/// Initial solution for one run.
pub fn initialize(ds: &SurvivalDataset, spec: &LeafModelSpec, cfg: &TrainConfig, seed: u64) -> Result<TreeParams, TrainError> {
    match cfg.init_mode {
        InitMode::Random => {
            let mut params = init_random(ds, spec, cfg.depth, seed)?;
            init_spline_km(ds, spec, &mut params, crate::derive_seed(seed, &[1]));
            Ok(params)
        }
        InitMode::Clustering => Ok(init_clustering(ds, spec, cfg, seed)?.0),
    }
}

/// Runs the decomposition trainer from `init` and returns the best iterate.
pub fn train(
    ds: &SurvivalDataset,
    spec: &LeafModelSpec,
    cfg: &TrainConfig,
    init: &TreeParams,
) -> Result<(TreeParams, TrainHistory), TrainError> {
    cfg.validate()?;
    spec.validate()?;
    let ctx = ObjectiveContext::new(ds, spec, cfg.lambda(ds.n()), cfg.rho).with_grid(cfg.fair_grid(ds));
    let opts = cfg.solve_options();
    let topo = init.topology;
    let mut params = init.clone();
    let mut best = init.clone();
    let mut error_best = fair_objective(&ctx, &params)?;
    let mut history = TrainHistory {
        initial_error: error_best,
        ..TrainHistory::default()
    };
    let mut k = 0;
    for it in 1..=cfg.max_it {
        let eps = cfg.thresholds(it);
        let prev_best = error_best;
        for s in topo.branch_nodes() {
            k += 1;
            let (wb, wl) = working_sets(topo, s);
            let upd = update_branch_node(&ctx, &mut params, &wb, eps, &opts)?;
            ln_step(&ctx, &mut params, s, &wl, &opts, false)?;
            let e = fair_objective(&ctx, &params).unwrap_or(f64::INFINITY);
            if e < error_best {
                error_best = e;
                best.clone_from(&params);
            }
            history.rows.push(HistoryRow {
                it,
                k,
                s,
                error: e,
                error_best,
                branch_taken: upd.taken,
                eps1: eps.eps1,
                eps2: eps.eps2,
                eps3: eps.eps3,
            });
        }
        if prev_best - error_best <= cfg.tol_rel * prev_best.abs().max(f64::MIN_POSITIVE) {
            history.stopped_early = it < cfg.max_it;
            break;
        }
    }
    Ok((best, history))
}

/// HBP leaf of each point under `params`.
pub fn leaf_assignment(ds: &SurvivalDataset, params: &TreeParams) -> Vec<usize> {
    (0..ds.n()).map(|i| hbp_leaf(params, ds.row(i))).collect()
}
