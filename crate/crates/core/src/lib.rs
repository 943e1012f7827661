//! Soft survival trees.
//!
//! A soft survival tree is a complete binary tree of fixed depth whose branch
//! nodes route a point left with a logistic probability and whose leaves carry
//! a survival model (parametric or Royston-Parmar spline). Prediction follows
//! the highest-branch-probability path to a single leaf. Training minimizes
//! the probability-weighted censored negative log-likelihood with a node-based
//! decomposition scheme.
//!
//! Module map:
//!
//! * [`data`]: CSV loading, min-max preprocessing and k-fold plans.
//! * [`tree`]: topology, routing probabilities and single-leaf prediction.
//! * [`survdist`]: exponential, Weibull and log-logistic leaves.
//! * [`splines`]: natural cubic spline PO/PH leaves.
//! * [`leaf`]: the leaf-family dispatch shared by the rest of the crate.
//! * [`objective`]: training error, restricted errors, gradients, fairness.
//! * [`optimizer`]: L-BFGS with a Nelder-Mead rescue.
//! * [`nodec`]: initialization and the decomposition trainer.
//! * [`metrics`]: Kaplan-Meier, concordance, AUC, Brier scores, Gini balance.
//! * [`model`]: fitted-model bundle and its JSON format.
//! * [`experiment`]: fit/evaluate pipelines, cross-validation, fairness sweep.

pub mod data;
pub mod experiment;
pub mod leaf;
pub mod metrics;
pub mod model;
pub mod nodec;
pub mod objective;
pub mod optimizer;
pub mod splines;
pub mod survdist;
pub mod tree;

mod numeric;

pub use data::{FoldPlan, Scaler, SurvivalDataset};
pub use leaf::{Family, LeafError, LeafModelSpec};
pub use metrics::MetricReport;
pub use model::SstModel;
pub use nodec::{InitMode, TrainConfig, TrainHistory};
pub use tree::{TreeParams, TreeTopology};

/// Deterministic per-run seed derivation (splitmix64 over the parts).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base;
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
