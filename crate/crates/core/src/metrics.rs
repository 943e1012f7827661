//! Survival performance measures.
//!
//! Inverse-probability-of-censoring weights use the Kaplan-Meier estimate
//! `Ĝ` of the censoring distribution. Events are weighted with the left
//! limit `Ĝ(t_i⁻)`, and terms where the weight would be `1/0` are excluded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("AUC undefined at time {0}")]
    UndefinedAtTime(f64),
    #[error("Kaplan-Meier curve has no drop over the observed range")]
    DegenerateKM,
    #[error("censoring distribution is zero at every evaluation point")]
    DegenerateCensoring,
    #[error("missing group column")]
    MissingGroupColumn,
}

/// Right-continuous step function starting at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    /// Value at `t` (includes a jump at `t`).
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    /// Left limit at `t` (excludes a jump at `t`).
    pub fn eval_left(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }
}

/// Product-limit estimator; jumps only at times with at least one event.
pub fn kaplan_meier(times: &[f64], events: &[u8]) -> StepFunction {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len() as f64;
    let mut s = 1.0;
    let mut out = StepFunction {
        times: Vec::new(),
        values: Vec::new(),
    };
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut d = 0.0;
        let mut m = 0.0;
        while k < order.len() && times[order[k]] == t {
            d += f64::from(events[order[k]]);
            m += 1.0;
            k += 1;
        }
        if d > 0.0 {
            s *= 1.0 - d / at_risk;
            out.times.push(t);
            out.values.push(s);
        }
        at_risk -= m;
    }
    out
}

/// Kaplan-Meier estimate of the censoring distribution.
pub fn censoring_km(times: &[f64], events: &[u8]) -> StepFunction {
    let flipped: Vec<u8> = events.iter().map(|&c| 1 - c).collect();
    kaplan_meier(times, &flipped)
}

/// Per-point predicted survival curves.
pub trait SurvivalCurves {
    fn survival(&self, i: usize, t: f64) -> f64;
}

impl<F: Fn(usize, f64) -> f64> SurvivalCurves for F {
    fn survival(&self, i: usize, t: f64) -> f64 {
        self(i, t)
    }
}

#[inline]
fn concordance(si: f64, sj: f64) -> f64 {
    if si < sj {
        1.0
    } else if si == sj {
        0.5
    } else {
        0.0
    }
}

fn weighted_concordance<P: SurvivalCurves + ?Sized>(
    preds: &P,
    times: &[f64],
    events: &[u8],
    weight: impl Fn(usize) -> Option<f64>,
) -> Result<f64, MetricError> {
    let n = times.len();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        if events[i] != 1 {
            continue;
        }
        let Some(w) = weight(i) else { continue };
        let ti = times[i];
        let si = preds.survival(i, ti);
        for j in 0..n {
            if ti < times[j] {
                num += w * concordance(si, preds.survival(j, ti));
                den += w;
            }
        }
    }
    if den == 0.0 {
        Err(MetricError::NoComparablePairs)
    } else {
        Ok(num / den)
    }
}

/// Harrell's concordance index, comparing `S_i(t_i)` with `S_j(t_i)`.
pub fn c_harrell<P: SurvivalCurves + ?Sized>(preds: &P, times: &[f64], events: &[u8]) -> Result<f64, MetricError> {
    weighted_concordance(preds, times, events, |_| Some(1.0))
}

/// Uno's concordance index with pair weights `Ĝ(t_i⁻)^{-2}`.
pub fn c_uno<P: SurvivalCurves + ?Sized>(
    preds: &P,
    times: &[f64],
    events: &[u8],
    g_hat: &StepFunction,
) -> Result<f64, MetricError> {
    weighted_concordance(preds, times, events, |i| {
        let g = g_hat.eval_left(times[i]);
        (g > 0.0).then(|| 1.0 / (g * g))
    })
}

/// Cumulative/dynamic AUC at `t` with case weights `1/Ĝ(t_i⁻)`.
pub fn auc_at<P: SurvivalCurves + ?Sized>(
    preds: &P,
    times: &[f64],
    events: &[u8],
    g_hat: &StepFunction,
    t: f64,
) -> Result<f64, MetricError> {
    let n = times.len();
    let controls: Vec<usize> = (0..n).filter(|&j| times[j] > t).collect();
    let (mut num, mut den) = (0.0, 0.0);
    if !controls.is_empty() {
        let sc: Vec<f64> = controls.iter().map(|&j| preds.survival(j, t)).collect();
        for i in 0..n {
            if events[i] != 1 || times[i] > t {
                continue;
            }
            let g = g_hat.eval_left(times[i]);
            if g <= 0.0 {
                continue;
            }
            let w = 1.0 / g;
            let si = preds.survival(i, t);
            for &sj in &sc {
                num += w * concordance(si, sj);
            }
            den += w * controls.len() as f64;
        }
    }
    if den == 0.0 {
        Err(MetricError::UndefinedAtTime(t))
    } else {
        Ok(num / den)
    }
}

/// Mean AUC over the Kaplan-Meier jump times in `(t_min, t_max]`, each
/// weighted by the drop of `Ŝ` there and normalized by the total weight of
/// the times where the AUC is defined.
pub fn cd_auc<P: SurvivalCurves + ?Sized>(preds: &P, times: &[f64], events: &[u8]) -> Result<f64, MetricError> {
    let km = kaplan_meier(times, events);
    let g_hat = censoring_km(times, events);
    let t_min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let t_max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &tau) in km.times.iter().enumerate() {
        if tau <= t_min || tau > t_max {
            continue;
        }
        let prev = if k == 0 { 1.0 } else { km.values[k - 1] };
        let w = prev - km.values[k];
        if w <= 0.0 {
            continue;
        }
        if let Ok(a) = auc_at(preds, times, events, &g_hat, tau) {
            num += a * w;
            den += w;
        }
    }
    if den == 0.0 {
        Err(MetricError::DegenerateKM)
    } else {
        Ok(num / den)
    }
}

/// Brier score at `t` and the number of excluded terms.
pub fn brier_at_counted<P: SurvivalCurves + ?Sized>(
    preds: &P,
    times: &[f64],
    events: &[u8],
    g_hat: &StepFunction,
    t: f64,
) -> (f64, usize) {
    let n = times.len();
    let g_t = g_hat.eval(t);
    let mut total = 0.0;
    let mut excluded = 0;
    for i in 0..n {
        if times[i] <= t {
            if events[i] == 1 {
                let g = g_hat.eval_left(times[i]);
                if g > 0.0 {
                    let s = preds.survival(i, t);
                    total += s * s / g;
                } else {
                    excluded += 1;
                }
            }
        } else if g_t > 0.0 {
            let s = preds.survival(i, t);
            total += (1.0 - s) * (1.0 - s) / g_t;
        } else {
            excluded += 1;
        }
    }
    (total / n as f64, excluded)
}

/// IPCW Brier score at `t`.
pub fn brier_at<P: SurvivalCurves + ?Sized>(
    preds: &P,
    times: &[f64],
    events: &[u8],
    g_hat: &StepFunction,
    t: f64,
) -> f64 {
    brier_at_counted(preds, times, events, g_hat, t).0
}

/// Integrated Brier score and the number of excluded terms, by the
/// trapezoid rule over `{0} ∪ observed times`, divided by `t_max`.
pub fn ibs_counted<P: SurvivalCurves + ?Sized>(
    preds: &P,
    times: &[f64],
    events: &[u8],
) -> Result<(f64, usize), MetricError> {
    let g_hat = censoring_km(times, events);
    let mut grid = vec![0.0];
    let mut ts = times.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    grid.extend(ts);
    let t_max = *grid.last().unwrap();
    let mut excluded = 0;
    let mut bs = Vec::with_capacity(grid.len());
    for &t in &grid {
        let (b, e) = brier_at_counted(preds, times, events, &g_hat, t);
        excluded += e;
        bs.push(b);
    }
    if excluded > 0 && excluded == grid.len() * times.len() {
        return Err(MetricError::DegenerateCensoring);
    }
    let area: f64 = grid
        .windows(2)
        .zip(bs.windows(2))
        .map(|(t, b)| 0.5 * (t[1] - t[0]) * (b[0] + b[1]))
        .sum();
    Ok((area / t_max, excluded))
}

pub fn ibs<P: SurvivalCurves + ?Sized>(preds: &P, times: &[f64], events: &[u8]) -> Result<f64, MetricError> {
    Ok(ibs_counted(preds, times, events)?.0)
}

/// Normalized two-class Gini balance `4p(1−p)` per nonempty leaf, averaged
/// plainly and weighted by occupancy.
pub fn gini_leaf_balance(assign: &[usize], group: Option<&[u8]>) -> Result<(f64, f64), MetricError> {
    let group = group.ok_or(MetricError::MissingGroupColumn)?;
    let mut counts: std::collections::BTreeMap<usize, (f64, f64)> = Default::default();
    for (&leaf, &g) in assign.iter().zip(group) {
        let e = counts.entry(leaf).or_default();
        e.0 += 1.0;
        e.1 += f64::from(g);
    }
    let total: f64 = counts.values().map(|c| c.0).sum();
    let (mut simple, mut weighted) = (0.0, 0.0);
    for &(n, m) in counts.values() {
        let p = m / n;
        let gini = 4.0 * p * (1.0 - p);
        simple += gini;
        weighted += gini * n / total;
    }
    Ok((simple / counts.len() as f64, weighted))
}

/// Summary metrics for one split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub c_harrell: Option<f64>,
    pub c_uno: Option<f64>,
    pub cd_auc: Option<f64>,
    pub ibs: Option<f64>,
    pub fairness_penalty: Option<f64>,
    pub gini_simple: Option<f64>,
    pub gini_weighted: Option<f64>,
    /// IPCW terms dropped because `Ĝ = 0`.
    pub excluded_terms: usize,
}

impl MetricReport {
    /// Discrimination and calibration measures, with `Ĝ` estimated from the
    /// evaluated data.
    pub fn compute<P: SurvivalCurves + ?Sized>(preds: &P, times: &[f64], events: &[u8]) -> Self {
        let g_hat = censoring_km(times, events);
        let (ibs, excluded) = match ibs_counted(preds, times, events) {
            Ok((v, e)) => (Some(v), e),
            Err(_) => (None, 0),
        };
        Self {
            c_harrell: c_harrell(preds, times, events).ok(),
            c_uno: c_uno(preds, times, events, &g_hat).ok(),
            cd_auc: cd_auc(preds, times, events).ok(),
            ibs,
            excluded_terms: excluded,
            ..Self::default()
        }
    }

    pub const COLUMNS: [&'static str; 7] = [
        "c_harrell",
        "c_uno",
        "cd_auc",
        "ibs",
        "fairness_penalty",
        "gini_simple",
        "gini_weighted",
    ];

    /// Values in [`Self::COLUMNS`] order.
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.c_harrell,
            self.c_uno,
            self.cd_auc,
            self.ibs,
            self.fairness_penalty,
            self.gini_simple,
            self.gini_weighted,
        ]
    }
}
