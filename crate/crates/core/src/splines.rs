//! Royston-Parmar spline leaves.
//!
//! The baseline is a natural cubic spline `s(y; η)` of log-time `y = log t`
//! with `m` internal knots. Covariates enter additively through
//! `z = s(y) + γᵀx`, which is the log cumulative odds (PO) or the log
//! cumulative hazard (PH). A spline leaf vector is laid out as `(γ_1..γ_p,
//! η_0..η_{m+1})`.

use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::leaf::LeafError;
use crate::numeric::{dot, exp_clamped, sigmoid, softplus, EXP_CLAMP};

/// Boundary and internal knots on the log-time axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    pub k_min: f64,
    pub k_max: f64,
    pub internal: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplineLink {
    ProportionalOdds,
    ProportionalHazards,
}

/// Structured view of a spline leaf vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafParamsSpline {
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
}

impl LeafParamsSpline {
    pub fn from_beta(ks: &KnotSet, p: usize, beta: &[f64]) -> Self {
        assert_eq!(beta.len(), p + ks.n_eta());
        Self {
            gamma: beta[..p].to_vec(),
            eta: beta[p..].to_vec(),
        }
    }

    pub fn to_beta(&self) -> Vec<f64> {
        let mut b = self.gamma.clone();
        b.extend_from_slice(&self.eta);
        b
    }
}

impl KnotSet {
    pub fn new(k_min: f64, k_max: f64, internal: Vec<f64>) -> Result<Self, LeafError> {
        let ks = Self {
            k_min,
            k_max,
            internal,
        };
        if ks.is_valid() {
            Ok(ks)
        } else {
            Err(LeafError::TooFewEvents)
        }
    }

    fn is_valid(&self) -> bool {
        let mut prev = self.k_min;
        for &k in self.internal.iter().chain(std::iter::once(&self.k_max)) {
            if !(k > prev) || !k.is_finite() {
                return false;
            }
            prev = k;
        }
        self.k_min.is_finite()
    }

    pub fn m(&self) -> usize {
        self.internal.len()
    }

    /// Number of spline coefficients, `m + 2`.
    pub fn n_eta(&self) -> usize {
        self.internal.len() + 2
    }

    pub fn lambda(&self, j: usize) -> f64 {
        (self.k_max - self.internal[j - 1]) / (self.k_max - self.k_min)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (1..=self.m()).map(|j| self.lambda(j)).collect()
    }
}

/// Knots from the uncensored log-times of a dataset.
pub fn place_knots(ds: &SurvivalDataset, m: usize) -> Result<KnotSet, LeafError> {
    let ys: Vec<f64> = ds
        .times()
        .iter()
        .zip(ds.events())
        .filter(|(_, &c)| c == 1)
        .map(|(t, _)| t.ln())
        .collect();
    knots_from_log_times(&ys, m)
}

/// Boundary knots at the extremes, internal knots at the `j/(m+1)`
/// percentiles (linear interpolation between order statistics).
pub fn knots_from_log_times(log_times: &[f64], m: usize) -> Result<KnotSet, LeafError> {
    let mut ys: Vec<f64> = log_times.to_vec();
    ys.sort_by(f64::total_cmp);
    let mut distinct = ys.clone();
    distinct.dedup();
    if distinct.len() < m + 2 {
        return Err(LeafError::TooFewEvents);
    }
    let n = ys.len();
    let internal = (1..=m)
        .map(|j| {
            let h = (n - 1) as f64 * j as f64 / (m + 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            ys[lo] + (h - lo as f64) * (ys[hi] - ys[lo])
        })
        .collect();
    KnotSet::new(ys[0], ys[n - 1], internal)
}

#[inline]
fn cube_plus(v: f64) -> f64 {
    if v > 0.0 {
        v * v * v
    } else {
        0.0
    }
}

#[inline]
fn square_plus(v: f64) -> f64 {
    if v > 0.0 {
        v * v
    } else {
        0.0
    }
}

/// `v_j(y)` for `j` in `1..=m`.
pub fn basis(ks: &KnotSet, j: usize, y: f64) -> f64 {
    let l = ks.lambda(j);
    cube_plus(y - ks.internal[j - 1]) - l * cube_plus(y - ks.k_min) - (1.0 - l) * cube_plus(y - ks.k_max)
}

pub fn basis_deriv(ks: &KnotSet, j: usize, y: f64) -> f64 {
    let l = ks.lambda(j);
    3.0 * (square_plus(y - ks.internal[j - 1])
        - l * square_plus(y - ks.k_min)
        - (1.0 - l) * square_plus(y - ks.k_max))
}

pub fn spline_eval(ks: &KnotSet, eta: &[f64], y: f64) -> f64 {
    eta[0] + eta[1] * y + (1..=ks.m()).map(|j| eta[j + 1] * basis(ks, j, y)).sum::<f64>()
}

pub fn spline_deriv(ks: &KnotSet, eta: &[f64], y: f64) -> f64 {
    eta[1] + (1..=ks.m()).map(|j| eta[j + 1] * basis_deriv(ks, j, y)).sum::<f64>()
}

struct Design {
    /// `∂s/∂η` at `y`: `(1, y, v_1, ..., v_m)`.
    ds: Vec<f64>,
    /// `∂s'/∂η` at `y`: `(0, 1, v_1', ..., v_m')`.
    dd: Vec<f64>,
}

fn design(ks: &KnotSet, y: f64) -> Design {
    let m = ks.m();
    let mut ds = Vec::with_capacity(m + 2);
    let mut dd = Vec::with_capacity(m + 2);
    ds.extend([1.0, y]);
    dd.extend([0.0, 1.0]);
    for j in 1..=m {
        ds.push(basis(ks, j, y));
        dd.push(basis_deriv(ks, j, y));
    }
    Design { ds, dd }
}

fn check_time(t: f64) -> Result<(), LeafError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(LeafError::NonPositiveTime(t))
    }
}

/// Value, `∂/∂z` and `∂/∂s'` of the per-point NLL.
fn nll_parts(link: SplineLink, z: f64, d: f64, log_t: f64, event: bool) -> (f64, f64, f64) {
    let z = z.clamp(-EXP_CLAMP, EXP_CLAMP);
    match (link, event) {
        (SplineLink::ProportionalOdds, true) => (
            log_t - d.ln() - z + 2.0 * softplus(z),
            -1.0 + 2.0 * sigmoid(z),
            -1.0 / d,
        ),
        (SplineLink::ProportionalOdds, false) => (softplus(z), sigmoid(z), 0.0),
        (SplineLink::ProportionalHazards, true) => {
            let e = z.exp();
            (log_t - d.ln() - z + e, e - 1.0, -1.0 / d)
        }
        (SplineLink::ProportionalHazards, false) => {
            let e = z.exp();
            (e, e, 0.0)
        }
    }
}

/// Adds `weight · ∇nll` into `grad` and returns the NLL value.
///
/// Events where `ds/dy <= 0` yield [`LeafError::NonPositiveDerivative`] and
/// leave `grad` untouched.
#[allow(clippy::too_many_arguments)]
pub fn nll_grad_acc(
    link: SplineLink,
    ks: &KnotSet,
    beta: &[f64],
    x: &[f64],
    t: f64,
    c: u8,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64, LeafError> {
    check_time(t)?;
    let p = x.len();
    let (gamma, eta) = beta.split_at(p);
    let y = t.ln();
    let dsg = design(ks, y);
    let z = dot(eta, &dsg.ds) + dot(gamma, x);
    let event = c == 1;
    let d = if event { dot(eta, &dsg.dd) } else { 1.0 };
    if event && !(d > 0.0) {
        return Err(LeafError::NonPositiveDerivative);
    }
    let (v, dz, dd) = nll_parts(link, z, d, y, event);
    let (g_gamma, g_eta) = grad.split_at_mut(p);
    for (g, xj) in g_gamma.iter_mut().zip(x) {
        *g += weight * dz * xj;
    }
    for ((g, a), b) in g_eta.iter_mut().zip(&dsg.ds).zip(&dsg.dd) {
        *g += weight * (dz * a + dd * b);
    }
    Ok(v)
}

pub fn nll(
    link: SplineLink,
    ks: &KnotSet,
    beta: &[f64],
    x: &[f64],
    t: f64,
    c: u8,
) -> Result<f64, LeafError> {
    let mut scratch = vec![0.0; beta.len()];
    nll_grad_acc(link, ks, beta, x, t, c, 0.0, &mut scratch)
}

/// Proportional-odds NLL and gradient with respect to `(γ, η)`.
pub fn nll_po(ks: &KnotSet, beta: &[f64], x: &[f64], t: f64, c: u8) -> Result<(f64, Vec<f64>), LeafError> {
    let mut g = vec![0.0; beta.len()];
    let v = nll_grad_acc(SplineLink::ProportionalOdds, ks, beta, x, t, c, 1.0, &mut g)?;
    Ok((v, g))
}

/// Proportional-hazards NLL and gradient with respect to `(γ, η)`.
pub fn nll_ph(ks: &KnotSet, beta: &[f64], x: &[f64], t: f64, c: u8) -> Result<(f64, Vec<f64>), LeafError> {
    let mut g = vec![0.0; beta.len()];
    let v = nll_grad_acc(SplineLink::ProportionalHazards, ks, beta, x, t, c, 1.0, &mut g)?;
    Ok((v, g))
}

fn link_survival(link: SplineLink, z: f64) -> f64 {
    match link {
        SplineLink::ProportionalOdds => sigmoid(-z),
        SplineLink::ProportionalHazards => (-exp_clamped(z)).exp(),
    }
}

/// `S(t)`; 1 at `t <= 0`.
pub fn survival(link: SplineLink, ks: &KnotSet, beta: &[f64], x: &[f64], t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let p = x.len();
    let z = spline_eval(ks, &beta[p..], t.ln()) + dot(&beta[..p], x);
    link_survival(link, z)
}

/// `S(t)` and its gradient with respect to the leaf vector.
pub fn survival_grad(
    link: SplineLink,
    ks: &KnotSet,
    beta: &[f64],
    x: &[f64],
    t: f64,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    if t <= 0.0 {
        return 1.0;
    }
    let p = x.len();
    let dsg = design(ks, t.ln());
    let z = (dot(&beta[p..], &dsg.ds) + dot(&beta[..p], x)).clamp(-EXP_CLAMP, EXP_CLAMP);
    let s = link_survival(link, z);
    let ds_dz = match link {
        SplineLink::ProportionalOdds => -s * (1.0 - s),
        SplineLink::ProportionalHazards => -s * z.exp(),
    };
    for (g, xj) in grad[..p].iter_mut().zip(x) {
        *g = ds_dz * xj;
    }
    for (g, a) in grad[p..].iter_mut().zip(&dsg.ds) {
        *g = ds_dz * a;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ks_half() -> KnotSet {
        KnotSet::new(0.0, 1.0, vec![0.5]).unwrap()
    }

    #[test]
    fn knots_without_internal() {
        let ks = knots_from_log_times(&[0.0, 1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!((ks.k_min, ks.k_max), (0.0, 3.0));
        assert!(ks.internal.is_empty());
    }

    #[test]
    fn knots_on_uniform_grid() {
        let ys: Vec<f64> = (0..100).map(f64::from).collect();
        let ks = knots_from_log_times(&ys, 2).unwrap();
        assert!((ks.internal[0] - 33.0).abs() < 1e-9);
        assert!((ks.internal[1] - 66.0).abs() < 1e-9);
        let l = ks.lambdas();
        assert!(l.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn colliding_knots_are_rejected() {
        let ys = [0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0];
        assert_eq!(knots_from_log_times(&ys, 2), Err(LeafError::TooFewEvents));
        assert_eq!(knots_from_log_times(&[1.0, 1.0], 0), Err(LeafError::TooFewEvents));
    }

    #[test]
    fn basis_values() {
        let ks = ks_half();
        assert_eq!(basis(&ks, 1, -0.3), 0.0);
        assert_eq!(basis_deriv(&ks, 1, 0.0), 0.0);
        assert!((basis(&ks, 1, 0.75) - (-0.1953125)).abs() < 1e-15);
    }

    #[test]
    fn basis_is_linear_beyond_boundaries() {
        let ks = KnotSet::new(-1.0, 2.0, vec![0.1, 1.3]).unwrap();
        let h = 1e-2;
        for j in 1..=2 {
            for y in [2.5, 3.0, 7.0] {
                let second = basis(&ks, j, y + h) - 2.0 * basis(&ks, j, y) + basis(&ks, j, y - h);
                assert!(second.abs() < 1e-8, "j={j} y={y} {second}");
            }
        }
    }

    #[test]
    fn linear_spline_and_lower_boundary() {
        let ks = ks_half();
        let eta = [0.4, 1.7, 0.0];
        for y in [-2.0, 0.3, 4.0] {
            assert_eq!(spline_deriv(&ks, &eta, y), 1.7);
        }
        let eta = [0.4, 1.7, -2.5];
        assert_eq!(spline_eval(&ks, &eta, ks.k_min), 0.4 + 1.7 * ks.k_min);
    }

    #[test]
    fn po_and_ph_hand_values() {
        let ks = ks_half();
        let beta = [0.0, 0.0, 1.0, 0.0];
        let (v, _) = nll_po(&ks, &beta, &[0.0], 1.0, 0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!((v + survival(SplineLink::ProportionalOdds, &ks, &beta, &[0.0], 1.0).ln()).abs() < 1e-12);
        let (v, _) = nll_ph(&ks, &beta, &[0.0], 1.0, 0).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_derivative_is_reported() {
        let ks = ks_half();
        let beta = [0.0, 0.0, -1.0, 0.0];
        assert_eq!(
            nll_po(&ks, &beta, &[0.0], 2.0, 1).unwrap_err(),
            LeafError::NonPositiveDerivative
        );
        assert!(nll_ph(&ks, &beta, &[0.0], 2.0, 0).is_ok());
    }

    #[test]
    fn spline_view_round_trips() {
        let ks = ks_half();
        let b = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let lp = LeafParamsSpline::from_beta(&ks, 2, &b);
        assert_eq!(lp.eta, vec![0.3, 0.4, 0.5]);
        assert_eq!(lp.to_beta(), b);
    }
}
