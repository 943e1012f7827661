//! Leaf-family dispatch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SurvivalDataset;
use crate::splines::{self, KnotSet, SplineLink};
use crate::survdist::{self, ParametricFamily};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LeafError {
    #[error("non-positive time {0}")]
    NonPositiveTime(f64),
    #[error("spline derivative ds/dy is not positive at an event time")]
    NonPositiveDerivative,
    #[error("too few distinct uncensored times to place spline knots")]
    TooFewEvents,
    #[error("spline family requires a knot set")]
    MissingKnots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Exp,
    Weibull,
    Llog,
    SplinePo,
    SplinePh,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Exp,
        Family::Weibull,
        Family::Llog,
        Family::SplinePo,
        Family::SplinePh,
    ];

    pub fn is_spline(self) -> bool {
        matches!(self, Family::SplinePo | Family::SplinePh)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Exp => "exp",
            Family::Weibull => "weibull",
            Family::Llog => "llog",
            Family::SplinePo => "spline-po",
            Family::SplinePh => "spline-ph",
        }
    }

    pub fn parametric(self) -> Option<ParametricFamily> {
        match self {
            Family::Exp => Some(ParametricFamily::Exponential),
            Family::Weibull => Some(ParametricFamily::Weibull),
            Family::Llog => Some(ParametricFamily::LogLogistic),
            _ => None,
        }
    }

    pub fn spline_link(self) -> Option<SplineLink> {
        match self {
            Family::SplinePo => Some(SplineLink::ProportionalOdds),
            Family::SplinePh => Some(SplineLink::ProportionalHazards),
            _ => None,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown family '{s}'"))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Leaf family plus its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafModelSpec {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knots: Option<KnotSet>,
}

impl LeafModelSpec {
    pub fn parametric(family: Family) -> Self {
        assert!(!family.is_spline(), "spline families need knots");
        Self { family, knots: None }
    }

    pub fn spline(family: Family, knots: KnotSet) -> Self {
        assert!(family.is_spline());
        Self {
            family,
            knots: Some(knots),
        }
    }

    /// Spec for `family`, placing `m` spline knots on the uncensored
    /// log-times of `ds` when needed.
    pub fn fit(family: Family, ds: &SurvivalDataset, m: usize) -> Result<Self, LeafError> {
        if family.is_spline() {
            Ok(Self::spline(family, splines::place_knots(ds, m)?))
        } else {
            Ok(Self::parametric(family))
        }
    }

    pub fn validate(&self) -> Result<(), LeafError> {
        if self.family.is_spline() && self.knots.is_none() {
            Err(LeafError::MissingKnots)
        } else {
            Ok(())
        }
    }

    fn knots(&self) -> &KnotSet {
        self.knots.as_ref().expect("spline leaf without knots")
    }

    /// Length of a leaf parameter vector for `p` features.
    pub fn n_params(&self, p: usize) -> usize {
        match self.family.parametric() {
            Some(pf) => pf.n_params(p),
            None => p + self.knots().n_eta(),
        }
    }

    pub fn nll(&self, beta: &[f64], x: &[f64], t: f64, c: u8) -> Result<f64, LeafError> {
        match (self.family.parametric(), self.family.spline_link()) {
            (Some(pf), _) => survdist::nll(pf, beta, x, t, c),
            (_, Some(link)) => splines::nll(link, self.knots(), beta, x, t, c),
            _ => unreachable!(),
        }
    }

    /// Adds `weight · ∇nll` into `grad`, returning the NLL value.
    #[allow(clippy::too_many_arguments)]
    pub fn nll_grad_acc(
        &self,
        beta: &[f64],
        x: &[f64],
        t: f64,
        c: u8,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64, LeafError> {
        match (self.family.parametric(), self.family.spline_link()) {
            (Some(pf), _) => survdist::nll_grad_acc(pf, beta, x, t, c, weight, grad),
            (_, Some(link)) => splines::nll_grad_acc(link, self.knots(), beta, x, t, c, weight, grad),
            _ => unreachable!(),
        }
    }

    pub fn survival(&self, beta: &[f64], x: &[f64], t: f64) -> f64 {
        match (self.family.parametric(), self.family.spline_link()) {
            (Some(pf), _) => survdist::survival(pf, beta, x, t),
            (_, Some(link)) => splines::survival(link, self.knots(), beta, x, t),
            _ => unreachable!(),
        }
    }

    /// Survival value; `grad` is overwritten with `∂S/∂β`.
    pub fn survival_grad(&self, beta: &[f64], x: &[f64], t: f64, grad: &mut [f64]) -> f64 {
        match (self.family.parametric(), self.family.spline_link()) {
            (Some(pf), _) => survdist::survival_grad(pf, beta, x, t, grad),
            (_, Some(link)) => splines::survival_grad(link, self.knots(), beta, x, t, grad),
            _ => unreachable!(),
        }
    }

    /// `ds/dy` at `t` for spline leaves, `None` for parametric ones.
    pub fn spline_slope(&self, beta: &[f64], p: usize, t: f64) -> Option<f64> {
        self.family
            .spline_link()
            .map(|_| splines::spline_deriv(self.knots(), &beta[p..], t.ln()))
    }
}
