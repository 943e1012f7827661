//! Fit/evaluate pipelines, cross-validation, the fairness sweep and the
//! synthetic datasets used by the tests and benchmarks.
//!
//! Features are imputed and min-max scaled with statistics from the training
//! split, and times are divided by the mean training time so that `β = 0`
//! describes a unit-scale baseline.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, FoldPlan, Scaler, SurvivalDataset};
use crate::derive_seed;
use crate::leaf::{Family, LeafError, LeafModelSpec};
use crate::metrics::{gini_leaf_balance, MetricReport};
use crate::model::{ModelError, SstModel};
use crate::nodec::{initialize, train, TrainConfig, TrainError, TrainHistory};
use crate::objective::{fairness_eval, fair_objective, ObjectiveContext, ObjectiveError};
use crate::tree::TreeParams;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Leaf(#[from] LeafError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("dataset has no group column")]
    MissingGroupColumn,
    #[error("both groups must be present in the training data")]
    SingleGroup,
}

/// Training split after preprocessing, ready for the trainer.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub ds: SurvivalDataset,
    pub scaler: Scaler,
    pub time_scale: f64,
    pub spec: LeafModelSpec,
}

impl Prepared {
    pub fn new(raw: &SurvivalDataset, family: Family, knots: usize) -> Result<Self, ExperimentError> {
        let scaler = Scaler::fit(raw, None)?;
        let time_scale = raw.times().iter().sum::<f64>() / raw.n() as f64;
        let ds = scaler.transform(raw)?.with_time_scale(time_scale);
        let spec = LeafModelSpec::fit(family, &ds, knots)?;
        Ok(Self {
            ds,
            scaler,
            time_scale,
            spec,
        })
    }

    /// Same preprocessing applied to held-out rows.
    pub fn transform(&self, raw: &SurvivalDataset) -> Result<SurvivalDataset, ExperimentError> {
        Ok(self.scaler.transform(raw)?.with_time_scale(self.time_scale))
    }

    pub fn objective(&self, cfg: &TrainConfig, params: &TreeParams) -> Result<f64, ExperimentError> {
        let ctx = ObjectiveContext::new(&self.ds, &self.spec, cfg.lambda(self.ds.n()), cfg.rho).with_grid(cfg.fair_grid(&self.ds));
        Ok(fair_objective(&ctx, params)?)
    }

    fn model(&self, params: TreeParams, cfg: &TrainConfig) -> SstModel {
        SstModel::new(
            self.spec.clone(),
            params,
            self.scaler.clone(),
            self.time_scale,
            self.ds.feature_names().to_vec(),
            cfg.clone(),
        )
    }
}

/// Seed of restart `restart` in fold `fold`.
pub fn run_seed(base: u64, fold: usize, restart: usize) -> u64 {
    derive_seed(base, &[fold as u64, restart as u64])
}

/// One trainer run from the initialization drawn with `seed`.
pub fn train_once(prep: &Prepared, cfg: &TrainConfig, seed: u64) -> Result<(TreeParams, TrainHistory), ExperimentError> {
    let init = initialize(&prep.ds, &prep.spec, cfg, seed)?;
    Ok(train(&prep.ds, &prep.spec, cfg, &init)?)
}

/// Metrics of `model` on raw rows, with the fairness penalty and Gini
/// balance when the data carry a group column.
pub fn evaluate(model: &SstModel, raw: &SurvivalDataset) -> Result<MetricReport, ExperimentError> {
    let ds = model.prepare(raw)?;
    let mut report = model.evaluate(&ds);
    if let Some(group) = ds.group() {
        let leaves = model.leaves(&ds);
        if let Ok((simple, weighted)) = gini_leaf_balance(&leaves, Some(group)) {
            report.gini_simple = Some(simple);
            report.gini_weighted = Some(weighted);
        }
        let scaled = ds.with_time_scale(model.time_scale);
        let grid = model.config.fair_grid(&scaled);
        report.fairness_penalty = fairness_eval(&scaled, &model.spec, &model.params, &leaves, &grid, false)
            .ok()
            .map(|(v, _)| v);
    }
    Ok(report)
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: SstModel,
    pub history: TrainHistory,
    pub restart: usize,
    pub seed: u64,
    /// Final objective of every restart, in restart order.
    pub objectives: Vec<f64>,
}

/// Trains `cfg.restarts` runs in parallel and keeps the one with the lowest
/// training objective (ties go to the earliest restart).
pub fn fit(raw: &SurvivalDataset, family: Family, cfg: &TrainConfig) -> Result<Fit, ExperimentError> {
    cfg.validate()?;
    let prep = Prepared::new(raw, family, cfg.knots)?;
    let runs: Vec<(TreeParams, TrainHistory, u64)> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = run_seed(cfg.seed, 0, r);
            train_once(&prep, cfg, seed).map(|(p, h)| (p, h, seed))
        })
        .collect::<Result<_, _>>()?;
    let objectives: Vec<f64> = runs.iter().map(|(_, h, _)| h.error_best()).collect();
    let restart = (0..runs.len())
        .min_by(|&a, &b| objectives[a].total_cmp(&objectives[b]).then(a.cmp(&b)))
        .expect("at least one restart");
    let (params, history, seed) = runs.into_iter().nth(restart).unwrap();
    let mut model = prep.model(params, cfg);
    model.train_metrics = Some(evaluate(&model, raw)?);
    Ok(Fit {
        model,
        history,
        restart,
        seed,
        objectives,
    })
}

/// Metrics of one cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: usize,
    pub restart: usize,
    pub seed: u64,
    pub objective: f64,
    pub train: MetricReport,
    pub test: MetricReport,
    pub seconds: f64,
}

fn cv_run(
    raw: &SurvivalDataset,
    plan: &FoldPlan,
    preps: &[Prepared],
    cfg: &TrainConfig,
    fold: usize,
    restart: usize,
) -> Result<RunRecord, ExperimentError> {
    let start = Instant::now();
    let (train_idx, test_idx) = plan.split(fold);
    let prep = &preps[fold];
    let seed = run_seed(cfg.seed, fold, restart);
    let (params, history) = train_once(prep, cfg, seed)?;
    let model = prep.model(params, cfg);
    let train = evaluate(&model, &raw.subset(&train_idx))?;
    let test = evaluate(&model, &raw.subset(&test_idx))?;
    Ok(RunRecord {
        fold,
        restart,
        seed,
        objective: history.error_best(),
        train,
        test,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Every (fold, restart) run, each trained from its own initialization and
/// evaluated on its fold. Records come back sorted by (fold, restart).
pub fn cross_validate(
    raw: &SurvivalDataset,
    family: Family,
    cfg: &TrainConfig,
    plan: &FoldPlan,
) -> Result<Vec<RunRecord>, ExperimentError> {
    cfg.validate()?;
    let preps: Vec<Prepared> = (0..plan.k)
        .map(|f| Prepared::new(&raw.subset(&plan.split(f).0), family, cfg.knots))
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..plan.k)
        .flat_map(|f| (0..cfg.restarts).map(move |r| (f, r)))
        .collect();
    jobs.into_par_iter()
        .map(|(f, r)| cv_run(raw, plan, &preps, cfg, f, r))
        .collect()
}

/// Mean and sample standard deviation per metric column, skipping runs
/// where the metric is undefined.
pub fn aggregate(reports: &[&MetricReport]) -> Vec<(Option<f64>, Option<f64>)> {
    (0..MetricReport::COLUMNS.len())
        .map(|j| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.values()[j]).collect();
            if vals.is_empty() {
                return (None, None);
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (Some(mean), Some(sd))
        })
        .collect()
}

/// `ρ` values `(1/(N_M N_F)) · [0, 1, 5, 10, 15, 20]`.
pub fn fairness_grid(n_m: usize, n_f: usize) -> [f64; 6] {
    let unit = 1.0 / (n_m as f64 * n_f as f64);
    [0.0, 1.0, 5.0, 10.0, 15.0, 20.0].map(|k| k * unit)
}

/// Group sizes `(|Ḡ|, |G|)` of a dataset.
pub fn group_sizes(ds: &SurvivalDataset) -> Result<(usize, usize), ExperimentError> {
    let g = ds.group().ok_or(ExperimentError::MissingGroupColumn)?;
    let in_g = g.iter().filter(|&&v| v == 1).count();
    Ok((g.len() - in_g, in_g))
}

/// One cross-validation per `ρ` of the fairness grid of the training data.
pub fn fairness_sweep(
    raw: &SurvivalDataset,
    family: Family,
    cfg: &TrainConfig,
    plan: &FoldPlan,
) -> Result<Vec<(f64, Vec<RunRecord>)>, ExperimentError> {
    let (n_m, n_f) = group_sizes(raw)?;
    if n_m == 0 || n_f == 0 {
        return Err(ExperimentError::SingleGroup);
    }
    fairness_grid(n_m, n_f)
        .into_iter()
        .map(|rho| {
            let cfg = TrainConfig { rho, ..cfg.clone() };
            cross_validate(raw, family, &cfg, plan).map(|runs| (rho, runs))
        })
        .collect()
}

/// Synthetic data with known structure.
pub mod synthetic {
    use super::*;

    fn exp_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        -u.ln() / rate
    }

    /// Marks a random `frac` of the rows censored at a uniform fraction of
    /// their event time.
    fn censor(rng: &mut ChaCha8Rng, times: &mut [f64], frac: f64) -> Vec<u8> {
        times
            .iter_mut()
            .map(|t| {
                if rng.gen_bool(frac) {
                    *t *= rng.gen_range(0.05..1.0);
                    0
                } else {
                    1
                }
            })
            .collect()
    }

    /// Two exponential populations: rate 1 when `x0 < 0.5`, rate 5 otherwise.
    /// `x1` is noise. A random 20% of rows are censored.
    pub fn two_population_exp(n: usize, seed: u64) -> SurvivalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(2 * n);
        let mut times = Vec::with_capacity(n);
        for _ in 0..n {
            let x0: f64 = rng.gen();
            let x1: f64 = rng.gen();
            features.extend([x0, x1]);
            times.push(exp_draw(&mut rng, if x0 < 0.5 { 1.0 } else { 5.0 }));
        }
        let events = censor(&mut rng, &mut times, 0.2);
        SurvivalDataset::new(features, 2, times, events, None, Some(vec!["x0".into(), "x1".into()]))
            .expect("valid synthetic data")
    }

    /// Two groups of equal expected size. Membership doubles the Weibull
    /// scale and shifts `x0`; `x1` raises the hazard independently of the
    /// group. A random 20% of rows are censored.
    pub fn two_group_weibull(n: usize, seed: u64) -> SurvivalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(2 * n);
        let mut times = Vec::with_capacity(n);
        let mut group = Vec::with_capacity(n);
        for _ in 0..n {
            let g = u8::from(rng.gen_bool(0.5));
            let x0 = 0.6 * f64::from(g) + 0.4 * rng.gen::<f64>();
            let x1: f64 = rng.gen();
            let scale = (1.0 - x1).exp() * if g == 1 { 2.0 } else { 1.0 };
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            times.push(scale * (-u.ln()).powf(1.0 / 1.5));
            features.extend([x0, x1]);
            group.push(g);
        }
        let events = censor(&mut rng, &mut times, 0.2);
        SurvivalDataset::new(
            features,
            2,
            times,
            events,
            Some(group),
            Some(vec!["x0".into(), "x1".into()]),
        )
        .expect("valid synthetic data")
    }
}
