//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sst_core::experiment::{synthetic, Prepared};
use sst_core::nodec::initialize;
use sst_core::{Family, SurvivalDataset, TrainConfig, TreeParams};

/// A preprocessed synthetic training set with an initialized tree.
pub struct Fixture {
    pub raw: SurvivalDataset,
    pub prep: Prepared,
    pub cfg: TrainConfig,
    pub params: TreeParams,
}

pub fn fixture(n: usize, depth: u32, family: Family, seed: u64) -> Fixture {
    let raw = synthetic::two_group_weibull(n, seed);
    let cfg = TrainConfig {
        depth,
        restarts: 1,
        seed,
        ..TrainConfig::default()
    };
    let prep = Prepared::new(&raw, family, cfg.knots).expect("synthetic data preprocess");
    let params = initialize(&prep.ds, &prep.spec, &cfg, seed).expect("initialization");
    Fixture {
        raw,
        prep,
        cfg,
        params,
    }
}

/// Exponential survival curves with a random rate per point, plus
/// right-censored outcomes drawn from those rates.
pub struct RandomCurves {
    pub rates: Vec<f64>,
    pub times: Vec<f64>,
    pub events: Vec<u8>,
}

impl RandomCurves {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rates: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..5.0)).collect();
        let mut times = Vec::with_capacity(n);
        let mut events = Vec::with_capacity(n);
        for &r in &rates {
            let t = -rng.gen_range(f64::EPSILON..1.0f64).ln() / r;
            let c = rng.gen_range(0.0..2.0);
            times.push(t.min(c));
            events.push(u8::from(t <= c));
        }
        Self { rates, times, events }
    }

    pub fn survival(&self, i: usize, t: f64) -> f64 {
        (-self.rates[i] * t).exp()
    }
}
