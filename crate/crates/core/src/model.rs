//! A fitted tree bundled with everything needed to predict on raw data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Scaler, SurvivalDataset};
use crate::leaf::LeafModelSpec;
use crate::metrics::MetricReport;
use crate::nodec::TrainConfig;
use crate::tree::{hbp_leaf, TreeParams, TreeView};

pub const FORMAT: &str = "sst-v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported model format `{0}`")]
    Format(String),
    #[error("feature columns do not match the model: expected {expected:?}, got {actual:?}")]
    SchemaMismatch {
        expected: Vec<String>,
        actual: Vec<String>,
    },
    #[error("model is inconsistent: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tree parameters trained on scaled features and times divided by
/// `time_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SstModel {
    pub format: String,
    pub spec: LeafModelSpec,
    pub params: TreeParams,
    pub scaler: Scaler,
    pub time_scale: f64,
    pub feature_names: Vec<String>,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_metrics: Option<MetricReport>,
}

impl SstModel {
    pub fn new(
        spec: LeafModelSpec,
        params: TreeParams,
        scaler: Scaler,
        time_scale: f64,
        feature_names: Vec<String>,
        config: TrainConfig,
    ) -> Self {
        Self {
            format: FORMAT.to_string(),
            spec,
            params,
            scaler,
            time_scale,
            feature_names,
            config,
            train_metrics: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.format != FORMAT {
            return Err(ModelError::Format(self.format.clone()));
        }
        let p = self.feature_names.len();
        let invalid = |m: &str| Err(ModelError::Invalid(m.to_string()));
        if self.params.p() != p || self.scaler.min.len() != p {
            return invalid("feature count differs between parts");
        }
        if self.spec.validate().is_err() {
            return invalid("spline family without knots");
        }
        if self.params.beta.iter().any(|b| b.len() != self.spec.n_params(p)) {
            return invalid("leaf vector length does not match the family");
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return invalid("time scale must be positive");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: SstModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Imputes and scales raw features with the stored statistics; times are
    /// left in original units.
    pub fn prepare(&self, raw: &SurvivalDataset) -> Result<SurvivalDataset, ModelError> {
        if raw.feature_names() != self.feature_names.as_slice() {
            return Err(ModelError::SchemaMismatch {
                expected: self.feature_names.clone(),
                actual: raw.feature_names().to_vec(),
            });
        }
        Ok(self.scaler.transform(raw)?)
    }

    /// HBP leaf of a prepared feature row.
    pub fn leaf(&self, x: &[f64]) -> usize {
        hbp_leaf(&self.params, x)
    }

    /// Survival of a prepared feature row at times in original units.
    pub fn survival(&self, x: &[f64], ts: &[f64]) -> Vec<f64> {
        let beta = self.params.beta(self.leaf(x));
        ts.iter()
            .map(|&t| self.spec.survival(beta, x, t / self.time_scale))
            .collect()
    }

    /// Per-row HBP leaves of a prepared dataset.
    pub fn leaves(&self, ds: &SurvivalDataset) -> Vec<usize> {
        (0..ds.n()).map(|i| self.leaf(ds.row(i))).collect()
    }

    /// `S_i(t)` closure over a prepared dataset, with leaves resolved once.
    pub fn curves<'a>(&'a self, ds: &'a SurvivalDataset) -> impl Fn(usize, f64) -> f64 + 'a {
        let leaves = self.leaves(ds);
        move |i, t| {
            let x = ds.row(i);
            self.spec
                .survival(self.params.beta(leaves[i]), x, t / self.time_scale)
        }
    }

    /// Discrimination and calibration metrics on a prepared dataset.
    pub fn evaluate(&self, ds: &SurvivalDataset) -> MetricReport {
        MetricReport::compute(&self.curves(ds), ds.times(), ds.events())
    }
}
