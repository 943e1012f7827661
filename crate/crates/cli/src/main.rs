//! `sst`: train, evaluate and cross-validate soft survival trees.

mod manifest;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sst_core::data::{load_csv, preprocess, DataError, FoldPlan};
use sst_core::experiment::{
    self, aggregate, fairness_grid, group_sizes, run_seed, ExperimentError, Prepared, RunRecord,
};
use sst_core::model::ModelError;
use sst_core::nodec::{FairWeights, TrainError};
use sst_core::{Family, InitMode, MetricReport, SstModel, SurvivalDataset, TrainConfig};

use crate::manifest::{fingerprint, RunManifest};

#[derive(Parser)]
#[command(name = "sst", version, about = "Soft survival trees")]
struct Cli {
    /// Worker threads for restarts and folds (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a tree and write the model JSON and training history.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Survival probabilities of each row at the requested times.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics of a saved model on labelled data.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-fold cross-validation with several restarts per fold.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        folds: FoldArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validation over the fairness weight grid.
    FairnessSweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        folds: FoldArgs,
        #[arg(long)]
        out: PathBuf,
        /// Long-format survival curves (rho, point_id, leaf, t, S).
        #[arg(long)]
        curves: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "event")]
    event_col: String,
    #[arg(long)]
    group_col: Option<String>,
}

#[derive(Args, Clone)]
struct FoldArgs {
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Seed of the fold assignment (defaults to --seed).
    #[arg(long)]
    fold_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Clustering,
}

#[derive(Clone, Copy, ValueEnum)]
enum FairWeightsArg {
    Unit,
    Trapezoid,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, value_parser = parse_family)]
    family: Family,
    #[arg(long, default_value_t = 2)]
    depth: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "random")]
    init: InitArg,
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    /// Ridge weight on the mean NLL (default 4/N).
    #[arg(long)]
    lambda_beta: Option<f64>,
    #[arg(long, default_value_t = 2)]
    knots: usize,
    #[arg(long, default_value_t = 10)]
    max_it: usize,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    #[arg(long, default_value_t = 0.1)]
    eps1: f64,
    #[arg(long, default_value_t = 0.3)]
    eps2: f64,
    #[arg(long, default_value_t = 0.4)]
    eps3: f64,
    #[arg(long, default_value_t = 0.8)]
    theta: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol_rel: f64,
    #[arg(long, default_value_t = 5)]
    clustering_repeats: usize,
    #[arg(long, value_enum, default_value = "unit")]
    fair_weights: FairWeightsArg,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse()
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            depth: self.depth,
            max_it: self.max_it,
            eps1: self.eps1,
            eps2: self.eps2,
            eps3: self.eps3,
            theta: self.theta,
            lambda_beta: self.lambda_beta,
            rho: self.rho,
            restarts: self.restarts,
            seed: self.seed,
            tol_rel: self.tol_rel,
            init_mode: match self.init {
                InitArg::Random => InitMode::Random,
                InitArg::Clustering => InitMode::Clustering,
            },
            clustering_repeats: self.clustering_repeats,
            knots: self.knots,
            fair_weights: match self.fair_weights {
                FairWeightsArg::Unit => FairWeights::Unit,
                FairWeightsArg::Trapezoid => FairWeights::Trapezoid,
            },
            ..TrainConfig::default()
        }
    }
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }
}

impl From<io::Error> for Failure {
    fn from(error: io::Error) -> Self {
        Self {
            code: 3,
            error: error.into(),
        }
    }
}

impl From<DataError> for Failure {
    fn from(error: DataError) -> Self {
        Self::usage(error)
    }
}

impl From<ModelError> for Failure {
    fn from(error: ModelError) -> Self {
        let code = match error {
            ModelError::Io(_) => 3,
            _ => 2,
        };
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(error: ExperimentError) -> Self {
        let code = match &error {
            ExperimentError::Data(_)
            | ExperimentError::Leaf(_)
            | ExperimentError::MissingGroupColumn
            | ExperimentError::SingleGroup
            | ExperimentError::Train(TrainError::Config(_) | TrainError::TooFewPoints { .. } | TrainError::Leaf(_)) => 2,
            ExperimentError::Model(m) if !matches!(m, ModelError::Io(_)) => 2,
            _ => 3,
        };
        Self {
            code,
            error: error.into(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load(args: &DataArgs) -> Result<SurvivalDataset, Failure> {
    load_csv(&args.data, &args.time_col, &args.event_col, args.group_col.as_deref())
        .with_context(|| format!("reading {}", args.data.display()))
        .map_err(Failure::usage)
}

fn dataset_hash(raw: &SurvivalDataset) -> Result<String, Failure> {
    Ok(fingerprint(&preprocess(raw)?.0))
}

fn validate(cfg: &TrainConfig) -> Outcome {
    cfg.validate().map_err(Failure::usage)
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn config_json(cfg: &TrainConfig, family: Family, extra: &[(&str, serde_json::Value)]) -> serde_json::Value {
    let mut v = serde_json::json!({ "family": family, "train": cfg });
    for (k, x) in extra {
        v[*k] = x.clone();
    }
    v
}

fn cmd_train(data: &DataArgs, train: &TrainArgs, model_path: &Path, history: Option<&Path>) -> Outcome {
    let start = Instant::now();
    let cfg = train.config();
    validate(&cfg)?;
    let raw = load(data)?;
    let fit = experiment::fit(&raw, train.family, &cfg)?;
    fit.model.save(model_path)?;
    let seeds: Vec<u64> = (0..cfg.restarts).map(|r| run_seed(cfg.seed, 0, r)).collect();
    let manifest = RunManifest::new(
        "train",
        config_json(&cfg, train.family, &[("chosen_restart", fit.restart.into())]),
        dataset_hash(&raw)?,
        seeds,
        start.elapsed().as_secs_f64(),
    );
    manifest.write_for(model_path)?;
    if let Some(h) = history {
        fit.history
            .write_csv(File::create(h)?)
            .context("writing history")?;
        manifest.write_for(h)?;
    }
    log::info!("objective {} (restart {})", fit.history.error_best(), fit.restart);
    Ok(())
}

fn load_model_for(model: &Path, raw: &SurvivalDataset) -> Result<(SstModel, SurvivalDataset), Failure> {
    let m = SstModel::load(model)?;
    let ds = m.prepare(raw)?;
    Ok((m, ds))
}

fn cmd_predict(data: &DataArgs, model: &Path, times: &[f64], out: Option<&Path>) -> Outcome {
    let raw = load(data)?;
    let (m, ds) = load_model_for(model, &raw)?;
    let mut w = csv::Writer::from_writer(output(out)?);
    w.write_record(["point_id", "leaf", "t", "S"]).context("writing predictions")?;
    for i in 0..ds.n() {
        let x = ds.row(i);
        let leaf = m.leaf(x);
        for (t, s) in times.iter().zip(m.survival(x, times)) {
            w.write_record([i.to_string(), leaf.to_string(), t.to_string(), s.to_string()])
                .context("writing predictions")?;
        }
    }
    w.flush()?;
    Ok(())
}

fn metric_header() -> Vec<String> {
    let mut h: Vec<String> = MetricReport::COLUMNS.iter().map(|c| c.to_string()).collect();
    h.push("excluded_terms".into());
    h
}

fn cmd_evaluate(data: &DataArgs, model: &Path, out: Option<&Path>) -> Outcome {
    let raw = load(data)?;
    let m = SstModel::load(model)?;
    let report = experiment::evaluate(&m, &raw)?;
    let mut w = csv::Writer::from_writer(output(out)?);
    w.write_record(metric_header()).context("writing metrics")?;
    let mut row: Vec<String> = report.values().into_iter().map(fmt_opt).collect();
    row.push(report.excluded_terms.to_string());
    w.write_record(row).context("writing metrics")?;
    w.flush()?;
    Ok(())
}

fn split_columns() -> Vec<String> {
    ["train", "test"]
        .iter()
        .flat_map(|s| MetricReport::COLUMNS.iter().map(move |c| format!("{s}_{c}")))
        .collect()
}

/// Metric columns of the aggregate row: means, then standard deviations.
fn aggregate_cells(runs: &[RunRecord]) -> (Vec<String>, Vec<String>) {
    let train: Vec<&MetricReport> = runs.iter().map(|r| &r.train).collect();
    let test: Vec<&MetricReport> = runs.iter().map(|r| &r.test).collect();
    let (mut means, mut sds) = (Vec::new(), Vec::new());
    for agg in [aggregate(&train), aggregate(&test)] {
        for (m, s) in agg {
            means.push(fmt_opt(m));
            sds.push(fmt_opt(s));
        }
    }
    (means, sds)
}

fn fold_plan(raw: &SurvivalDataset, cfg: &TrainConfig, folds: &FoldArgs) -> Result<FoldPlan, Failure> {
    Ok(FoldPlan::new(raw.n(), folds.folds, folds.fold_seed.unwrap_or(cfg.seed))?)
}

fn cmd_cv(data: &DataArgs, train: &TrainArgs, folds: &FoldArgs, out: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = train.config();
    validate(&cfg)?;
    let raw = load(data)?;
    let plan = fold_plan(&raw, &cfg, folds)?;
    let runs = experiment::cross_validate(&raw, train.family, &cfg, &plan)?;
    let cols = split_columns();
    let mut w = csv::Writer::from_path(out).context("creating output")?;
    let mut header: Vec<String> = ["kind", "fold", "restart", "seed", "objective"].map(String::from).to_vec();
    header.extend(cols.iter().cloned());
    header.extend(cols.iter().map(|c| format!("{c}_sd")));
    w.write_record(&header).context("writing cv")?;
    for r in &runs {
        let mut row = vec![
            "run".to_string(),
            r.fold.to_string(),
            r.restart.to_string(),
            r.seed.to_string(),
            r.objective.to_string(),
        ];
        for rep in [&r.train, &r.test] {
            row.extend(rep.values().into_iter().map(fmt_opt));
        }
        row.extend(std::iter::repeat_n(String::new(), cols.len()));
        w.write_record(&row).context("writing cv")?;
    }
    let (means, sds) = aggregate_cells(&runs);
    let objs: Vec<f64> = runs.iter().map(|r| r.objective).collect();
    let mean_obj = objs.iter().sum::<f64>() / objs.len() as f64;
    let mut row = vec![
        "aggregate".to_string(),
        String::new(),
        String::new(),
        String::new(),
        mean_obj.to_string(),
    ];
    row.extend(means);
    row.extend(sds);
    w.write_record(&row).context("writing cv")?;
    w.flush()?;
    let seeds = runs.iter().map(|r| r.seed).collect();
    RunManifest::new(
        "cv",
        config_json(&cfg, train.family, &[("folds", serde_json::to_value(&plan).unwrap())]),
        dataset_hash(&raw)?,
        seeds,
        start.elapsed().as_secs_f64(),
    )
    .write_for(out)?;
    Ok(())
}

fn cmd_fairness_sweep(
    data: &DataArgs,
    train: &TrainArgs,
    folds: &FoldArgs,
    out: &Path,
    curves: Option<&Path>,
) -> Outcome {
    let start = Instant::now();
    if data.group_col.is_none() {
        return Err(Failure::usage(ExperimentError::MissingGroupColumn));
    }
    let cfg = train.config();
    validate(&cfg)?;
    let raw = load(data)?;
    let plan = fold_plan(&raw, &cfg, folds)?;
    let (n_m, n_f) = group_sizes(&raw)?;
    let sweep = experiment::fairness_sweep(&raw, train.family, &cfg, &plan)?;
    let cols = split_columns();
    let mut w = csv::Writer::from_path(out).context("creating output")?;
    let mut header = vec!["rho".to_string(), "rho_step".to_string()];
    header.extend(cols.iter().cloned());
    header.extend(cols.iter().map(|c| format!("{c}_sd")));
    w.write_record(&header).context("writing sweep")?;
    let unit = fairness_grid(n_m, n_f)[1];
    for (rho, runs) in &sweep {
        let (means, sds) = aggregate_cells(runs);
        let mut row = vec![rho.to_string(), (rho / unit).round().to_string()];
        row.extend(means);
        row.extend(sds);
        w.write_record(&row).context("writing sweep")?;
    }
    w.flush()?;
    let manifest = RunManifest::new(
        "fairness-sweep",
        config_json(
            &cfg,
            train.family,
            &[
                ("folds", serde_json::to_value(&plan).unwrap()),
                ("rho_grid", serde_json::to_value(fairness_grid(n_m, n_f)).unwrap()),
            ],
        ),
        dataset_hash(&raw)?,
        sweep[0].1.iter().map(|r| r.seed).collect(),
        start.elapsed().as_secs_f64(),
    );
    manifest.write_for(out)?;
    if let Some(path) = curves {
        write_curves(&raw, train.family, &cfg, &plan, &sweep, path)?;
        manifest.write_for(path)?;
    }
    Ok(())
}

/// Curves of the first fold's first restart for every grid value, on the
/// distinct observed times.
fn write_curves(
    raw: &SurvivalDataset,
    family: Family,
    cfg: &TrainConfig,
    plan: &FoldPlan,
    sweep: &[(f64, Vec<RunRecord>)],
    path: &Path,
) -> Outcome {
    let mut grid = raw.times().to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let prep = Prepared::new(&raw.subset(&plan.split(0).0), family, cfg.knots)?;
    let mut w = csv::Writer::from_path(path).context("creating curves")?;
    w.write_record(["rho", "point_id", "leaf", "t", "S"]).context("writing curves")?;
    for (rho, _) in sweep {
        let cfg = TrainConfig { rho: *rho, ..cfg.clone() };
        let (params, _) = experiment::train_once(&prep, &cfg, run_seed(cfg.seed, 0, 0))?;
        let model = SstModel::new(
            prep.spec.clone(),
            params,
            prep.scaler.clone(),
            prep.time_scale,
            prep.ds.feature_names().to_vec(),
            cfg.clone(),
        );
        let ds = model.prepare(raw)?;
        for i in 0..ds.n() {
            let x = ds.row(i);
            let leaf = model.leaf(x).to_string();
            for (t, s) in grid.iter().zip(model.survival(x, &grid)) {
                w.write_record([rho.to_string(), i.to_string(), leaf.clone(), t.to_string(), s.to_string()])
                    .context("writing curves")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::usage)?;
    }
    match &cli.command {
        Command::Train {
            data,
            train,
            model,
            history,
        } => cmd_train(data, train, model, history.as_deref()),
        Command::Predict { data, model, times, out } => cmd_predict(data, model, times, out.as_deref()),
        Command::Evaluate { data, model, out } => cmd_evaluate(data, model, out.as_deref()),
        Command::Cv { data, train, folds, out } => cmd_cv(data, train, folds, out),
        Command::FairnessSweep {
            data,
            train,
            folds,
            out,
            curves,
        } => cmd_fairness_sweep(data, train, folds, out, curves.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SST_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
