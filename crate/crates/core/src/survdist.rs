//! Parametric leaf survival models with a log-linked primary parameter.
//!
//! A leaf parameter vector is laid out as `(γ0, γ_1..γ_p, a)` where
//! `log μ(x) = γ0 + γᵀx` and, for Weibull and log-logistic leaves, the shape
//! is `α = e^a`. The exponential family uses μ as a rate; Weibull and
//! log-logistic use μ as a scale, so a larger `γᵀx` means longer survival
//! there and shorter survival for the exponential.
//!
//! | family       | h(t)                               | H(t)                |
//! |--------------|------------------------------------|---------------------|
//! | exponential  | μ                                  | μt                  |
//! | Weibull      | (α/μ)(t/μ)^(α−1)                   | (t/μ)^α             |
//! | log-logistic | (α/μ)(t/μ)^(α−1) / (1 + (t/μ)^α)   | log(1 + (t/μ)^α)    |

use serde::{Deserialize, Serialize};

use crate::leaf::LeafError;
use crate::numeric::{dot, exp_clamped, sigmoid, softplus, EXP_CLAMP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParametricFamily {
    Exponential,
    Weibull,
    LogLogistic,
}

impl ParametricFamily {
    /// Number of ancillary (log-shape) parameters.
    pub fn n_ancillary(self) -> usize {
        match self {
            ParametricFamily::Exponential => 0,
            ParametricFamily::Weibull | ParametricFamily::LogLogistic => 1,
        }
    }

    pub fn n_params(self, p: usize) -> usize {
        p + 1 + self.n_ancillary()
    }
}

/// Structured view of a parametric leaf vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafParamsParametric {
    pub gamma0: f64,
    pub gamma: Vec<f64>,
    /// Log-ancillary parameters (`a` with `α = e^a`).
    pub anc: Vec<f64>,
}

impl LeafParamsParametric {
    pub fn from_beta(family: ParametricFamily, p: usize, beta: &[f64]) -> Self {
        assert_eq!(beta.len(), family.n_params(p));
        Self {
            gamma0: beta[0],
            gamma: beta[1..=p].to_vec(),
            anc: beta[p + 1..].to_vec(),
        }
    }

    pub fn to_beta(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(1 + self.gamma.len() + self.anc.len());
        b.push(self.gamma0);
        b.extend_from_slice(&self.gamma);
        b.extend_from_slice(&self.anc);
        b
    }

    pub fn mu(&self, x: &[f64]) -> f64 {
        exp_clamped(self.gamma0 + dot(&self.gamma, x))
    }
}

/// Linear predictor `γ0 + γᵀx`, clamped to the safe exponent range.
#[inline]
fn log_mu(beta: &[f64], x: &[f64]) -> f64 {
    (beta[0] + dot(&beta[1..=x.len()], x)).clamp(-EXP_CLAMP, EXP_CLAMP)
}

#[inline]
fn log_shape(beta: &[f64], p: usize) -> f64 {
    beta[p + 1].clamp(-EXP_CLAMP, EXP_CLAMP)
}

fn check_time(t: f64) -> Result<(), LeafError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(LeafError::NonPositiveTime(t))
    }
}

/// Scaled log-time `w = α (log t − log μ)` for the shape families. `w` is
/// only kept finite; callers clamp it before exponentiating.
#[inline]
fn scaled_log_time(beta: &[f64], x: &[f64], t: f64) -> (f64, f64, f64, f64) {
    let eta = log_mu(beta, x);
    let a = log_shape(beta, x.len());
    let alpha = a.exp();
    let u = t.ln() - eta;
    let w = (alpha * u).clamp(-f64::MAX / 4.0, f64::MAX / 4.0);
    (eta, a, u, w)
}

pub fn hazard(family: ParametricFamily, beta: &[f64], x: &[f64], t: f64) -> Result<f64, LeafError> {
    check_time(t)?;
    Ok(match family {
        ParametricFamily::Exponential => log_mu(beta, x).exp(),
        ParametricFamily::Weibull => {
            let (eta, a, u, _) = scaled_log_time(beta, x, t);
            exp_clamped(a - eta + (a.exp() - 1.0) * u)
        }
        ParametricFamily::LogLogistic => {
            let (eta, a, u, w) = scaled_log_time(beta, x, t);
            exp_clamped(a - eta + (a.exp() - 1.0) * u - softplus(w))
        }
    })
}

pub fn cumhaz(family: ParametricFamily, beta: &[f64], x: &[f64], t: f64) -> Result<f64, LeafError> {
    check_time(t)?;
    Ok(match family {
        ParametricFamily::Exponential => log_mu(beta, x).exp() * t,
        ParametricFamily::Weibull => exp_clamped(scaled_log_time(beta, x, t).3),
        ParametricFamily::LogLogistic => softplus(scaled_log_time(beta, x, t).3),
    })
}

/// Closed-form survival; `S(t) = 1` for `t <= 0`.
pub fn survival(family: ParametricFamily, beta: &[f64], x: &[f64], t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    match family {
        ParametricFamily::Exponential => (-log_mu(beta, x).exp() * t).exp(),
        ParametricFamily::Weibull => (-exp_clamped(scaled_log_time(beta, x, t).3)).exp(),
        ParametricFamily::LogLogistic => sigmoid(-scaled_log_time(beta, x, t).3),
    }
}

/// Value plus derivatives with respect to `log μ` and `a`.
fn nll_parts(
    family: ParametricFamily,
    beta: &[f64],
    x: &[f64],
    t: f64,
    event: bool,
) -> (f64, f64, f64) {
    match family {
        ParametricFamily::Exponential => {
            let eta = log_mu(beta, x);
            let big_h = eta.exp() * t;
            if event {
                (big_h - eta, big_h - 1.0, 0.0)
            } else {
                (big_h, big_h, 0.0)
            }
        }
        ParametricFamily::Weibull => {
            let (_, a, _, w) = scaled_log_time(beta, x, t);
            let alpha = a.exp();
            let big_h = exp_clamped(w);
            if event {
                (
                    -a + t.ln() - w + big_h,
                    alpha * (1.0 - big_h),
                    -1.0 - w + w * big_h,
                )
            } else {
                (big_h, -alpha * big_h, w * big_h)
            }
        }
        ParametricFamily::LogLogistic => {
            let (_, a, _, w) = scaled_log_time(beta, x, t);
            let alpha = a.exp();
            let sp = softplus(w);
            let sg = sigmoid(w);
            if event {
                (
                    -a + t.ln() - w + 2.0 * sp,
                    alpha * (1.0 - 2.0 * sg),
                    -1.0 - w + 2.0 * sg * w,
                )
            } else {
                (sp, -alpha * sg, sg * w)
            }
        }
    }
}

/// Censored negative log-likelihood: `−log h + H` for events, `H` otherwise.
pub fn nll(family: ParametricFamily, beta: &[f64], x: &[f64], t: f64, c: u8) -> Result<f64, LeafError> {
    check_time(t)?;
    Ok(nll_parts(family, beta, x, t, c == 1).0)
}

/// Adds `weight · ∇nll` into `grad` and returns the NLL value.
pub fn nll_grad_acc(
    family: ParametricFamily,
    beta: &[f64],
    x: &[f64],
    t: f64,
    c: u8,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64, LeafError> {
    check_time(t)?;
    let (v, d_eta, d_a) = nll_parts(family, beta, x, t, c == 1);
    let g = weight * d_eta;
    grad[0] += g;
    for (gj, xj) in grad[1..=x.len()].iter_mut().zip(x) {
        *gj += g * xj;
    }
    if family.n_ancillary() == 1 {
        grad[x.len() + 1] += weight * d_a;
    }
    Ok(v)
}

/// NLL and its exact gradient with respect to `(γ0, γ, a)`.
pub fn nll_grad(
    family: ParametricFamily,
    beta: &[f64],
    x: &[f64],
    t: f64,
    c: u8,
) -> Result<(f64, Vec<f64>), LeafError> {
    let mut g = vec![0.0; beta.len()];
    let v = nll_grad_acc(family, beta, x, t, c, 1.0, &mut g)?;
    Ok((v, g))
}

/// Survival value and its gradient with respect to the leaf vector.
pub fn survival_grad(
    family: ParametricFamily,
    beta: &[f64],
    x: &[f64],
    t: f64,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    if t <= 0.0 {
        return 1.0;
    }
    let (s, d_eta, d_a) = match family {
        ParametricFamily::Exponential => {
            let big_h = log_mu(beta, x).exp() * t;
            let s = (-big_h).exp();
            (s, -s * big_h, 0.0)
        }
        ParametricFamily::Weibull => {
            let (_, a, _, w) = scaled_log_time(beta, x, t);
            let big_h = exp_clamped(w);
            let s = (-big_h).exp();
            (s, s * a.exp() * big_h, -s * w * big_h)
        }
        ParametricFamily::LogLogistic => {
            let (_, a, _, w) = scaled_log_time(beta, x, t);
            let s = sigmoid(-w);
            let ds_dw = -s * (1.0 - s);
            (s, -a.exp() * ds_dw, ds_dw * w)
        }
    };
    grad[0] = d_eta;
    for (gj, xj) in grad[1..=x.len()].iter_mut().zip(x) {
        *gj = d_eta * xj;
    }
    if family.n_ancillary() == 1 {
        grad[x.len() + 1] = d_a;
    }
    s
}
