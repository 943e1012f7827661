//! Random instance generators and brute-force reference implementations.
//!
//! Everything here is written from the model definitions directly, without
//! calling into the library code under test, so that it can serve as an
//! independent oracle.

#![allow(dead_code)]

pub mod suites;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sst_core::splines::KnotSet;
use sst_core::{Family, LeafModelSpec, SurvivalDataset, TreeParams, TreeTopology};

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn opt_close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => close(a, b, tol),
        (None, None) => true,
        _ => false,
    }
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let den = norm(a) + norm(b);
    if den == 0.0 {
        0.0
    } else {
        norm(&diff) / den
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = 1e-5 * x[j].abs().max(1.0);
            xs[j] = x[j] + h;
            let up = f(&xs);
            xs[j] = x[j] - h;
            let down = f(&xs);
            xs[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Random instances

/// Random right-censored data. With `ties`, times come from a coarse grid.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, p: usize, ties: bool, with_group: bool) -> SurvivalDataset {
    let features: Vec<f64> = (0..n * p).map(|_| rng.gen()).collect();
    let times: Vec<f64> = (0..n)
        .map(|_| {
            if ties {
                0.5 * rng.gen_range(1..=6) as f64
            } else {
                rng.gen_range(0.05..4.0)
            }
        })
        .collect();
    let events: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.7))).collect();
    let group = with_group.then(|| {
        let mut g: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        g[0] = 1;
        g[n - 1] = 0;
        g
    });
    SurvivalDataset::new(features, p, times, events, group, None).unwrap()
}

pub fn random_knots(rng: &mut ChaCha8Rng) -> KnotSet {
    let k_min = rng.gen_range(-1.5..-0.5);
    let k_max = rng.gen_range(0.8..1.8);
    let m = rng.gen_range(0..=3);
    let mut internal: Vec<f64> = (0..m).map(|_| rng.gen_range(k_min + 0.1..k_max - 0.1)).collect();
    internal.sort_by(f64::total_cmp);
    internal.dedup_by(|a, b| (*a - *b).abs() < 0.05);
    KnotSet::new(k_min, k_max, internal).unwrap()
}

pub fn random_spec(rng: &mut ChaCha8Rng, family: Family) -> LeafModelSpec {
    if family.is_spline() {
        LeafModelSpec::spline(family, random_knots(rng))
    } else {
        LeafModelSpec::parametric(family)
    }
}

/// Leaf vector in a moderate range. Spline vectors keep `ds/dy ≥ 0.1` at
/// every time in `check`.
pub fn random_beta(rng: &mut ChaCha8Rng, spec: &LeafModelSpec, p: usize, check: &[f64]) -> Vec<f64> {
    match &spec.knots {
        None => {
            let n = if spec.family == Family::Exp { p + 1 } else { p + 2 };
            let mut b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if n == p + 2 {
                b[p + 1] = rng.gen_range(-0.7..0.7);
            }
            b
        }
        Some(ks) => loop {
            let mut b: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            b.push(rng.gen_range(-1.0..1.0));
            b.push(rng.gen_range(0.5..2.0));
            b.extend((0..ks.internal.len()).map(|_| rng.gen_range(-0.05..0.05)));
            if check.iter().all(|&t| spline_d(ks, &b[p..], t.ln()) >= 0.1) {
                return b;
            }
        },
    }
}

pub fn random_params(
    rng: &mut ChaCha8Rng,
    depth: u32,
    spec: &LeafModelSpec,
    p: usize,
    check: &[f64],
    scale: f64,
) -> TreeParams {
    let topo = TreeTopology::new(depth).unwrap();
    let omega = (0..topo.n_branch())
        .map(|_| (0..=p).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect();
    let beta = (0..topo.n_leaves()).map(|_| random_beta(rng, spec, p, check)).collect();
    TreeParams::new(topo, omega, beta).unwrap()
}

// ---------------------------------------------------------------------------
// Leaf distributions

fn cube_plus(v: f64) -> f64 {
    v.max(0.0).powi(3)
}

pub fn spline_s(ks: &KnotSet, eta: &[f64], y: f64) -> f64 {
    let range = ks.k_max - ks.k_min;
    let mut s = eta[0] + eta[1] * y;
    for (j, &k) in ks.internal.iter().enumerate() {
        let lam = (ks.k_max - k) / range;
        let v = cube_plus(y - k) - lam * cube_plus(y - ks.k_min) - (1.0 - lam) * cube_plus(y - ks.k_max);
        s += eta[j + 2] * v;
    }
    s
}

pub fn spline_d(ks: &KnotSet, eta: &[f64], y: f64) -> f64 {
    let range = ks.k_max - ks.k_min;
    let sq = |v: f64| v.max(0.0).powi(2);
    let mut d = eta[1];
    for (j, &k) in ks.internal.iter().enumerate() {
        let lam = (ks.k_max - k) / range;
        d += eta[j + 2] * 3.0 * (sq(y - k) - lam * sq(y - ks.k_min) - (1.0 - lam) * sq(y - ks.k_max));
    }
    d
}

/// `(log h(t), H(t))`; the log-hazard is `None` when a spline baseline is
/// not increasing at `t`.
pub fn log_hazard_cumhaz(spec: &LeafModelSpec, beta: &[f64], x: &[f64], t: f64) -> (Option<f64>, f64) {
    let p = x.len();
    let lin = |b: &[f64]| b.iter().zip(x).map(|(g, v)| g * v).sum::<f64>();
    match spec.family {
        Family::Exp => {
            let rate = (beta[0] + lin(&beta[1..=p])).exp();
            (Some(rate.ln()), rate * t)
        }
        Family::Weibull | Family::Llog => {
            let mu = (beta[0] + lin(&beta[1..=p])).exp();
            let alpha = beta[p + 1].exp();
            let r = t / mu;
            let ra = r.powf(alpha);
            let log_h = alpha.ln() - mu.ln() + (alpha - 1.0) * r.ln();
            if spec.family == Family::Weibull {
                (Some(log_h), ra)
            } else {
                (Some(log_h - (1.0 + ra).ln()), (1.0 + ra).ln())
            }
        }
        Family::SplinePo | Family::SplinePh => {
            let ks = spec.knots.as_ref().unwrap();
            let eta = &beta[p..];
            let y = t.ln();
            let d = spline_d(ks, eta, y);
            let z = spline_s(ks, eta, y) + lin(&beta[..p]);
            let (h_scale, big_h) = if spec.family == Family::SplinePo {
                (z.exp() / (1.0 + z.exp()), (1.0 + z.exp()).ln())
            } else {
                (z.exp(), z.exp())
            };
            ((d > 0.0).then(|| (d / t * h_scale).ln()), big_h)
        }
    }
}

/// `−c log h(t) + H(t)`; `None` for an excluded event term.
pub fn nll(spec: &LeafModelSpec, beta: &[f64], x: &[f64], t: f64, c: u8) -> Option<f64> {
    let (log_h, big_h) = log_hazard_cumhaz(spec, beta, x, t);
    if c == 1 {
        log_h.map(|lh| big_h - lh)
    } else {
        Some(big_h)
    }
}

pub fn survival(spec: &LeafModelSpec, beta: &[f64], x: &[f64], t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    (-log_hazard_cumhaz(spec, beta, x, t).1).exp()
}

// ---------------------------------------------------------------------------
// Tree routing

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn go_left(params: &TreeParams, n: usize, x: &[f64]) -> f64 {
    let w = &params.omega[n - 1];
    sig(w[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - w[0])
}

/// Probability of reaching `node` from `from` (an ancestor or itself).
pub fn path_prob(params: &TreeParams, from: usize, node: usize, x: &[f64]) -> f64 {
    let mut prob = 1.0;
    let mut n = node;
    while n > from {
        let parent = n / 2;
        let pl = go_left(params, parent, x);
        prob *= if n % 2 == 0 { pl } else { 1.0 - pl };
        n = parent;
    }
    prob
}

pub fn leaves(depth: u32) -> std::ops::Range<usize> {
    (1 << depth)..(1 << (depth + 1))
}

pub fn is_below(s: usize, mut node: usize) -> bool {
    while node > s {
        node /= 2;
    }
    node == s
}

/// The leaf whose every ancestor edge is the ≥ 0.5 side.
pub fn hbp(params: &TreeParams, x: &[f64]) -> usize {
    let depth = params.topology.depth();
    let found: Vec<usize> = leaves(depth)
        .filter(|&leaf| {
            let mut n = leaf;
            while n > 1 {
                let pl = go_left(params, n / 2, x);
                let ok = if n % 2 == 0 { pl >= 0.5 } else { pl < 0.5 };
                if !ok {
                    return false;
                }
                n /= 2;
            }
            true
        })
        .collect();
    assert_eq!(found.len(), 1);
    found[0]
}

fn leaf_beta(params: &TreeParams, leaf: usize) -> &[f64] {
    &params.beta[leaf - (1 << params.topology.depth())]
}

// ---------------------------------------------------------------------------
// Objective

pub fn tree_error(ds: &SurvivalDataset, spec: &LeafModelSpec, params: &TreeParams, lambda: f64) -> f64 {
    let depth = params.topology.depth();
    let mut total = 0.0;
    for i in 0..ds.n() {
        let x = ds.row(i);
        for leaf in leaves(depth) {
            let prob = path_prob(params, 1, leaf, x);
            if prob == 0.0 {
                continue;
            }
            if let Some(l) = nll(spec, leaf_beta(params, leaf), x, ds.times()[i], ds.events()[i]) {
                total += prob * l;
            }
        }
    }
    let ridge: f64 = params.beta.iter().flatten().map(|b| b * b).sum();
    total / ds.n() as f64 + 0.5 * lambda * ridge
}

pub fn subtree_error(ds: &SurvivalDataset, spec: &LeafModelSpec, params: &TreeParams, s: usize) -> Option<f64> {
    let depth = params.topology.depth();
    let members: Vec<usize> = (0..ds.n()).filter(|&i| is_below(s, hbp(params, ds.row(i)))).collect();
    if members.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in &members {
        let x = ds.row(i);
        for leaf in leaves(depth).filter(|&l| is_below(s, l)) {
            let prob = path_prob(params, s, leaf, x);
            if prob == 0.0 {
                continue;
            }
            if let Some(l) = nll(spec, leaf_beta(params, leaf), x, ds.times()[i], ds.events()[i]) {
                total += prob * l;
            }
        }
    }
    Some(total / members.len() as f64)
}

pub fn fairness_penalty(ds: &SurvivalDataset, spec: &LeafModelSpec, params: &TreeParams) -> f64 {
    let mut grid = ds.times().to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let g = ds.group().unwrap();
    let curve = |i: usize, t: f64| {
        let x = ds.row(i);
        survival(spec, leaf_beta(params, hbp(params, x)), x, t)
    };
    let mut total = 0.0;
    for i in (0..ds.n()).filter(|&i| g[i] == 1) {
        for j in (0..ds.n()).filter(|&j| g[j] == 0) {
            for &t in &grid {
                let d = curve(i, t) - curve(j, t);
                total += d * d;
            }
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Metrics

/// Product-limit estimate at `t`, counting events (`flag = 1`) or
/// censorings (`flag = 0`), including or excluding a jump at `t`.
pub fn product_limit(times: &[f64], events: &[u8], flag: u8, t: f64, inclusive: bool) -> f64 {
    let mut distinct: Vec<f64> = times.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut s = 1.0;
    for &u in &distinct {
        if u > t || (!inclusive && u == t) {
            break;
        }
        let at_risk = times.iter().filter(|&&v| v >= u).count() as f64;
        let d = times.iter().zip(events).filter(|(&v, &c)| v == u && c == flag).count() as f64;
        s *= 1.0 - d / at_risk;
    }
    s
}

pub fn km(times: &[f64], events: &[u8], t: f64) -> f64 {
    product_limit(times, events, 1, t, true)
}

fn g_left(times: &[f64], events: &[u8], t: f64) -> f64 {
    product_limit(times, events, 0, t, false)
}

fn g_at(times: &[f64], events: &[u8], t: f64) -> f64 {
    product_limit(times, events, 0, t, true)
}

fn score(si: f64, sj: f64) -> f64 {
    if si < sj {
        1.0
    } else if si == sj {
        0.5
    } else {
        0.0
    }
}

fn concordance(
    s: &dyn Fn(usize, f64) -> f64,
    times: &[f64],
    events: &[u8],
    weight: &dyn Fn(usize) -> f64,
) -> Option<f64> {
    let n = times.len();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if events[i] == 1 && times[i] < times[j] {
                let w = weight(i);
                if w.is_finite() {
                    num += w * score(s(i, times[i]), s(j, times[i]));
                    den += w;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn c_harrell(s: &dyn Fn(usize, f64) -> f64, times: &[f64], events: &[u8]) -> Option<f64> {
    concordance(s, times, events, &|_| 1.0)
}

pub fn c_uno(s: &dyn Fn(usize, f64) -> f64, times: &[f64], events: &[u8]) -> Option<f64> {
    concordance(s, times, events, &|i| g_left(times, events, times[i]).powi(-2))
}

pub fn auc_at(s: &dyn Fn(usize, f64) -> f64, times: &[f64], events: &[u8], t: f64) -> Option<f64> {
    let n = times.len();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        if !(events[i] == 1 && times[i] <= t) {
            continue;
        }
        let g = g_left(times, events, times[i]);
        if g == 0.0 {
            continue;
        }
        for j in 0..n {
            if times[j] > t {
                num += score(s(i, t), s(j, t)) / g;
                den += 1.0 / g;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn cd_auc(s: &dyn Fn(usize, f64) -> f64, times: &[f64], events: &[u8]) -> Option<f64> {
    let t_min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let t_max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut taus: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &c)| c == 1)
        .map(|(&t, _)| t)
        .collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let (mut num, mut den) = (0.0, 0.0);
    for tau in taus {
        if tau <= t_min || tau > t_max {
            continue;
        }
        let w = product_limit(times, events, 1, tau, false) - km(times, events, tau);
        if w <= 0.0 {
            continue;
        }
        if let Some(a) = auc_at(s, times, events, tau) {
            num += w * a;
            den += w;
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn brier_at(s: &dyn Fn(usize, f64) -> f64, times: &[f64], events: &[u8], t: f64) -> f64 {
    let n = times.len();
    let mut total = 0.0;
    for i in 0..n {
        let v = s(i, t);
        if times[i] <= t && events[i] == 1 {
            let g = g_left(times, events, times[i]);
            if g > 0.0 {
                total += v * v / g;
            }
        } else if times[i] > t {
            let g = g_at(times, events, t);
            if g > 0.0 {
                total += (1.0 - v) * (1.0 - v) / g;
            }
        }
    }
    total / n as f64
}

pub fn ibs(s: &dyn Fn(usize, f64) -> f64, times: &[f64], events: &[u8]) -> f64 {
    let mut grid = vec![0.0];
    let mut ts = times.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    grid.extend(ts);
    let mut area = 0.0;
    for w in grid.windows(2) {
        area += 0.5 * (w[1] - w[0]) * (brier_at(s, times, events, w[0]) + brier_at(s, times, events, w[1]));
    }
    area / grid[grid.len() - 1]
}
