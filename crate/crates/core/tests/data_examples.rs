use proptest::prelude::*;
use sst_core::data::{kfold, load_csv, preprocess};
use sst_core::{FoldPlan, SurvivalDataset};

fn dataset(name: &str) -> SurvivalDataset {
    let path = format!("{}/../../data/{name}.csv", env!("CARGO_MANIFEST_DIR"));
    load_csv(path, "time", "event", None).unwrap()
}

#[test]
fn bundled_datasets_have_published_shapes() {
    for (name, n, p) in [("veterans", 137, 6), ("whas500", 500, 14), ("gbsg2", 686, 8)] {
        let ds = dataset(name);
        assert_eq!((ds.n(), ds.p()), (n, p), "{name}");
    }
}

#[test]
fn veterans_preprocess_and_folds() {
    let raw = dataset("veterans");
    let (ds, _) = preprocess(&raw).unwrap();
    assert!(ds.features().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(ds.times(), raw.times());
    let plan = kfold(&ds, 5, 42).unwrap();
    let mut sizes = plan.fold_sizes();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![27, 27, 27, 28, 28]);
    assert_eq!(plan, kfold(&ds, 5, 42).unwrap());
    assert_ne!(plan, kfold(&ds, 5, 43).unwrap());
}

fn raw_strategy() -> impl Strategy<Value = SurvivalDataset> {
    (1usize..40, 1usize..4).prop_flat_map(|(n, p)| {
        (
            prop::collection::vec(prop::option::weighted(0.9, -1e3f64..1e3), n * p),
            prop::collection::vec(0.01f64..100.0, n),
            prop::collection::vec(0u8..=1, n),
        )
            .prop_filter_map("a column is fully missing", move |(cells, times, events)| {
                let observed = (0..p).all(|j| (0..n).any(|i| cells[i * p + j].is_some()));
                observed.then(|| {
                    let features = cells.into_iter().map(|c| c.unwrap_or(f64::NAN)).collect();
                    SurvivalDataset::new(features, p, times, events, None, None).unwrap()
                })
            })
    })
}

proptest! {
    #[test]
    fn preprocessing_lands_in_unit_box(raw in raw_strategy()) {
        let (ds, scaler) = preprocess(&raw).unwrap();
        prop_assert!(!ds.has_missing());
        prop_assert!(ds.features().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(scaler.transform(&raw).unwrap(), ds);
    }

    #[test]
    fn folds_partition_rows(n in 2usize..200, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let plan = FoldPlan::new(n, k, seed).unwrap();
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen = vec![0; n];
        for f in 0..k {
            let (train, test) = plan.split(f);
            prop_assert_eq!(train.len() + test.len(), n);
            for i in test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}
