//! Randomized checks shared by the integration tests and the acceptance
//! target. Each returns the worst observed error per check.

use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sst_core::metrics;
use sst_core::objective::{self, FairGrid, ObjectiveContext};
use sst_core::splines::KnotSet;
use sst_core::tree::{leaf_probs, predict_survival, TreeView};
use sst_core::{Family, LeafModelSpec, TreeParams, TreeTopology};

use super::*;

/// Worst error of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub cases: usize,
}

impl Check {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            worst: 0.0,
            cases: 0,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
        }
    }
}

/// Relative error with a mismatch in definedness counted as infinite.
fn opt_err(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() / b.abs().max(1.0),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

fn val_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Leaf NLL and survival gradients per family, and the split and leaf
/// blocks of the training error.
pub fn gradients(seed: u64, configs: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for family in Family::ALL {
        let mut nll_check = Check::new(format!("nll gradient {}", family.name()));
        let mut surv_check = Check::new(format!("survival gradient {}", family.name()));
        for _ in 0..configs {
            let spec = random_spec(&mut rng, family);
            let p = rng.gen_range(1..=3);
            let x: Vec<f64> = (0..p).map(|_| rng.gen()).collect();
            let t = rng.gen_range(0.3..3.5);
            let c = u8::from(rng.gen_bool(0.6));
            let beta = random_beta(&mut rng, &spec, p, &[t]);
            let mut g = vec![0.0; beta.len()];
            spec.nll_grad_acc(&beta, &x, t, c, 1.0, &mut g).unwrap();
            let fd = numeric_grad(|b| spec.nll(b, &x, t, c).unwrap(), &beta);
            nll_check.record(rel_err(&g, &fd));
            spec.survival_grad(&beta, &x, t, &mut g);
            let fd = numeric_grad(|b| spec.survival(b, &x, t), &beta);
            surv_check.record(rel_err(&g, &fd));
        }
        out.push(nll_check);
        out.push(surv_check);
    }

    let mut omega_check = Check::new("tree error split blocks");
    let mut beta_check = Check::new("tree error leaf blocks");
    let mut fair_check = Check::new("fairness leaf blocks");
    for k in 0..configs {
        let family = Family::ALL[k % Family::ALL.len()];
        let spec = random_spec(&mut rng, family);
        let n = rng.gen_range(5..=20);
        let p = rng.gen_range(1..=3);
        let depth = rng.gen_range(1..=3);
        let ds = random_dataset(&mut rng, n, p, false, true);
        let params = random_params(&mut rng, depth, &spec, p, ds.times(), 2.0);
        let lambda = rng.gen_range(0.0..0.5);
        let ctx = ObjectiveContext::new(&ds, &spec, lambda, 0.0);
        let topo = params.topology;

        let nodes: Vec<usize> = topo.branch_nodes().collect();
        let g = objective::grad_omega(&ctx, &params, &nodes).unwrap();
        for (b, gb) in nodes.iter().zip(&g) {
            let fd = numeric_grad(
                |w| {
                    let mut q = params.clone();
                    q.omega_mut(*b).copy_from_slice(w);
                    objective::tree_error(&ctx, &q).unwrap()
                },
                params.omega(*b),
            );
            omega_check.record(rel_err(gb, &fd));
        }

        let wl: Vec<usize> = topo.leaves().collect();
        let g = objective::grad_beta(&ctx, &params, &wl).unwrap();
        for (leaf, gl) in wl.iter().zip(&g) {
            let fd = numeric_grad(
                |b| {
                    let mut q = params.clone();
                    q.beta_mut(*leaf).copy_from_slice(b);
                    objective::tree_error(&ctx, &q).unwrap()
                },
                params.beta(*leaf),
            );
            beta_check.record(rel_err(gl, &fd));
        }

        let assign = objective::hbp_assignments(&ds, &params);
        let grid = FairGrid::unit(ds.times());
        let (_, g) = objective::fairness_eval(&ds, &spec, &params, &assign, &grid, true).unwrap();
        let g = g.unwrap();
        for leaf in topo.leaves() {
            let fd = numeric_grad(
                |b| {
                    let mut q = params.clone();
                    q.beta_mut(leaf).copy_from_slice(b);
                    objective::fairness_eval(&ds, &spec, &q, &assign, &grid, false).unwrap().0
                },
                params.beta(leaf),
            );
            fair_check.record(rel_err(&g[topo.leaf_pos(leaf)], &fd));
        }
    }
    out.extend([omega_check, beta_check, fair_check]);
    out
}

fn curves(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
    let tied = rng.gen_bool(0.3);
    (0..n)
        .map(|_| {
            let rate = if tied { f64::from(rng.gen_range(1..=3)) } else { rng.gen_range(0.2..3.0) };
            (rate, rng.gen_range(0.5..2.0))
        })
        .collect()
}

/// Library objective and metrics against the brute-force versions.
pub fn oracles(seed: u64, cases: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "tree_error",
        "subtree_error",
        "fairness_penalty",
        "kaplan_meier",
        "c_harrell",
        "c_uno",
        "auc_at",
        "cd_auc",
        "brier_at",
        "ibs",
    ];
    let mut checks: Vec<Check> = names.iter().map(|n| Check::new(*n)).collect();
    for k in 0..cases {
        let n = rng.gen_range(2..=30);
        let p = rng.gen_range(1..=3);
        let ties = rng.gen_bool(0.5);
        let ds = random_dataset(&mut rng, n, p, ties, true);
        let family = Family::ALL[k % Family::ALL.len()];
        let spec = random_spec(&mut rng, family);
        let depth = rng.gen_range(1..=3);
        // Spline leaves are drawn without a slope guarantee at the data so
        // that excluded terms occur.
        let check: &[f64] = if k % 2 == 0 { ds.times() } else { &[] };
        let mut params = random_params(&mut rng, depth, &spec, p, check, 3.0);
        if family.is_spline() && check.is_empty() {
            for b in &mut params.beta {
                b[p + 2..].iter_mut().for_each(|v| *v *= 20.0);
            }
        }
        let lambda = rng.gen_range(0.0..1.0);
        let ctx = ObjectiveContext::new(&ds, &spec, lambda, 0.0);

        checks[0].record(val_err(
            objective::tree_error(&ctx, &params).unwrap(),
            super::tree_error(&ds, &spec, &params, lambda),
        ));
        for s in params.topology.branch_nodes() {
            checks[1].record(opt_err(
                objective::subtree_error(&ctx, &params, s).ok(),
                super::subtree_error(&ds, &spec, &params, s),
            ));
        }
        checks[2].record(val_err(
            objective::fairness_penalty(&ctx, &params).unwrap(),
            super::fairness_penalty(&ds, &spec, &params),
        ));

        let times = ds.times();
        let events = ds.events();
        let km = metrics::kaplan_meier(times, events);
        let mut probes: Vec<f64> = times.iter().flat_map(|&t| [t, t - 0.01, t + 0.01]).collect();
        probes.push(0.0);
        for &t in &probes {
            checks[3].record(val_err(km.eval(t), super::km(times, events, t)));
        }

        let shape = curves(&mut rng, n);
        let s = move |i: usize, t: f64| (-shape[i].0 * t.max(0.0).powf(shape[i].1)).exp();
        checks[4].record(opt_err(metrics::c_harrell(&s, times, events).ok(), super::c_harrell(&s, times, events)));
        let g_hat = metrics::censoring_km(times, events);
        checks[5].record(opt_err(
            metrics::c_uno(&s, times, events, &g_hat).ok(),
            super::c_uno(&s, times, events),
        ));
        for &t in times {
            checks[6].record(opt_err(
                metrics::auc_at(&s, times, events, &g_hat, t).ok(),
                super::auc_at(&s, times, events, t),
            ));
            checks[8].record(val_err(
                metrics::brier_at(&s, times, events, &g_hat, t),
                super::brier_at(&s, times, events, t),
            ));
        }
        checks[7].record(opt_err(metrics::cd_auc(&s, times, events).ok(), super::cd_auc(&s, times, events)));
        checks[9].record(opt_err(metrics::ibs(&s, times, events).ok(), Some(super::ibs(&s, times, events))));
    }
    checks
}

/// Weibull with unit shape against Exp, and a linear SplinePH baseline
/// against Weibull, on random points. Returns the worst absolute NLL gaps.
pub fn reductions(seed: u64, evals: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = LeafModelSpec::parametric(Family::Exp);
    let weibull = LeafModelSpec::parametric(Family::Weibull);
    let mut to_exp = Check::new("Weibull(shape 1) vs Exp");
    let mut to_weibull = Check::new("SplinePH(linear) vs Weibull");
    for _ in 0..evals {
        let p = rng.gen_range(1..=4);
        let x: Vec<f64> = (0..p).map(|_| rng.gen()).collect();
        let t = rng.gen_range(0.05..5.0);
        let c = u8::from(rng.gen_bool(0.5));
        let gamma0: f64 = rng.gen_range(-1.5..1.5);
        let gamma: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.5..1.5)).collect();

        // Weibull scale μ = e^{γ0+γᵀx} is an Exp rate of e^{−γ0−γᵀx}.
        let mut wb: Vec<f64> = std::iter::once(gamma0).chain(gamma.iter().copied()).collect();
        wb.push(0.0);
        let eb: Vec<f64> = wb[..=p].iter().map(|v| -v).collect();
        to_exp.record((weibull.nll(&wb, &x, t, c).unwrap() - exp.nll(&eb, &x, t, c).unwrap()).abs());

        // log H = α log t − αγ0 − αγᵀx, i.e. η = (−αγ0, α, 0, ...).
        let a = rng.gen_range(-1.0..1.0);
        let alpha = f64::exp(a);
        let ks = if rng.gen_bool(0.5) {
            KnotSet::new(-2.0, 2.0, Vec::new()).unwrap()
        } else {
            random_knots(&mut rng)
        };
        let ph = LeafModelSpec::spline(Family::SplinePh, ks.clone());
        let mut pb: Vec<f64> = gamma.iter().map(|g| -alpha * g).collect();
        pb.extend([-alpha * gamma0, alpha]);
        pb.extend(std::iter::repeat(0.0).take(ks.internal.len()));
        wb[p + 1] = a;
        to_weibull.record((ph.nll(&pb, &x, t, c).unwrap() - weibull.nll(&wb, &x, t, c).unwrap()).abs());
    }
    vec![to_exp, to_weibull]
}

/// Records every parameter block a prediction reads.
pub struct Recording<'a> {
    pub inner: &'a TreeParams,
    pub omega_reads: RefCell<BTreeSet<usize>>,
    pub beta_reads: RefCell<BTreeSet<usize>>,
}

impl<'a> Recording<'a> {
    pub fn new(inner: &'a TreeParams) -> Self {
        Self {
            inner,
            omega_reads: RefCell::default(),
            beta_reads: RefCell::default(),
        }
    }
}

impl TreeView for Recording<'_> {
    fn topology(&self) -> TreeTopology {
        self.inner.topology
    }

    fn omega(&self, n: usize) -> &[f64] {
        self.omega_reads.borrow_mut().insert(n);
        self.inner.omega(n)
    }

    fn beta(&self, leaf: usize) -> &[f64] {
        self.beta_reads.borrow_mut().insert(leaf);
        self.inner.beta(leaf)
    }
}

/// Leaf probabilities summing to one, and predictions touching only the
/// HBP path. Returns the worst `|Σ P − 1|` and the number of predictions
/// that read anything off their path.
pub fn routing(seed: u64, draws: usize) -> (Check, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = Check::new("leaf probabilities sum to one");
    let mut violations = 0;
    let exp = LeafModelSpec::parametric(Family::Exp);
    for _ in 0..draws {
        let depth = rng.gen_range(1..=5);
        let p = rng.gen_range(1..=4);
        let scale = [0.1, 2.0, 20.0][rng.gen_range(0..3)];
        let params = random_params(&mut rng, depth, &exp, p, &[], scale);
        let x: Vec<f64> = (0..p).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let probs = leaf_probs(&params, &x);
        sums.record((probs.iter().sum::<f64>() - 1.0).abs());

        let view = Recording::new(&params);
        predict_survival(&view, &exp, &x, &[0.5, 1.0, 2.0]);
        let leaf = hbp(&params, &x);
        let mut path = BTreeSet::new();
        let mut n = leaf / 2;
        while n >= 1 {
            path.insert(n);
            n /= 2;
        }
        let beta_ok = *view.beta_reads.borrow() == BTreeSet::from([leaf]);
        if !view.omega_reads.borrow().is_subset(&path) || !beta_ok {
            violations += 1;
        }
    }
    (sums, violations)
}
