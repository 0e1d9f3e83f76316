//! Synthetic generator moments and pool-partition properties.

use std::collections::BTreeSet;

use calico_core::data::{load_dataset, make_synthetic, save_archive, save_csv, split_pools, DatasetFormat, SyntheticSpec};
use proptest::prelude::*;

#[test]
fn class_means_sit_on_the_unit_circle() {
    let sigma = 0.2;
    let per_class = 200;
    let ds = make_synthetic(&SyntheticSpec::unit_circle(3, per_class, sigma, 42)).unwrap();
    assert_eq!(ds.len(), 600);
    assert_eq!(ds.class_counts(), vec![200, 200, 200]);
    let tol = 3.0 * sigma / (per_class as f64).sqrt();
    for k in 0..3 {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
        let target = [angle.cos(), angle.sin()];
        let ids: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == k).collect();
        for d in 0..2 {
            let mean = ids.iter().map(|&i| ds.sample(i)[d]).sum::<f64>() / ids.len() as f64;
            assert!((mean - target[d]).abs() < tol, "class {k} dim {d}: {mean}");
        }
    }
}

#[test]
fn both_formats_round_trip() {
    let ds = make_synthetic(&SyntheticSpec::unit_circle(4, 25, 0.3, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_archive(&ds, &dir.path().join("arch")).unwrap();
    let back = load_dataset(&dir.path().join("arch"), DatasetFormat::Archive).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.num_classes, 4);

    let csv = dir.path().join("d.csv");
    save_csv(&ds, &csv).unwrap();
    let back = load_dataset(&csv, DatasetFormat::Csv).unwrap();
    assert_eq!(back.labels, ds.labels);
    for (a, b) in back.features.iter().zip(&ds.features) {
        assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_pools_partition_the_dataset(
        per_class in 5usize..60,
        frac in 0.0f64..0.6,
        seed in 0u64..1000,
        initial_share in 0.0f64..1.0,
    ) {
        let ds = make_synthetic(&SyntheticSpec::unit_circle(3, per_class, 0.3, seed)).unwrap();
        let n = ds.len();
        let eval_size = (frac * n as f64).round() as usize;
        let initial = ((n - eval_size) as f64 * initial_share) as usize;
        let pools = split_pools(&ds, initial, frac, seed).unwrap();
        prop_assert_eq!(pools.eval.len(), eval_size);
        prop_assert_eq!(pools.labeled.len(), initial);
        prop_assert_eq!(pools.labeled.len() + pools.unlabeled.len() + pools.eval.len(), n);

        let mut all: BTreeSet<usize> = pools.eval.iter().copied().collect();
        for id in pools.training_ids() {
            prop_assert!(all.insert(id));
        }
        prop_assert_eq!(all.len(), n);
        for (&id, &y) in &pools.labeled {
            prop_assert_eq!(y, ds.label(id));
        }
        prop_assert_eq!(split_pools(&ds, initial, frac, seed).unwrap(), pools);
    }
}
