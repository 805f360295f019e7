use fierce_core::data::{coarsen_argmax, coarsen_threshold, load_csv_dataset, RegressionGenerator, UnmixingGenerator};
use fierce_core::experiment::{export_features, run_train, MetricsRow};
use fierce_core::{DatasetMode, RunConfig, Split, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn row_set(x: &Tensor) -> HashSet<Vec<u64>> {
    (0..x.rows()).map(|r| x.row(r).iter().map(|v| v.to_bits()).collect()).collect()
}

fn small(mode: &str, extra: &str) -> RunConfig {
    RunConfig::parse(&format!(
        "dataset.mode = {mode}
         dataset.n_train = 240
         dataset.n_test = 120
         model.hidden_dims = 12, 12
         train.epochs = 4
         train.batch_size = 40
         eval.interval = 2
         eval.transfer_epochs = 20
         {extra}"
    ))
    .unwrap()
}

fn assert_finite(rows: &[MetricsRow]) {
    for r in rows {
        let values = [Some(r.ce_loss), Some(r.accuracy), r.entropy_ref, Some(r.entropy_anchor), r.recovery_mse, r.raw_mse]
            .into_iter()
            .chain([Some(r.ece), Some(r.mce), Some(r.mi_proxy), Some(r.stability), r.transfer_mse])
            .flatten();
        for v in values {
            assert!(v.is_finite(), "{r:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn coarsening_is_idempotent(n in 1usize..40, m in 2usize..5, seed in any::<u64>(), t in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = coarsen_threshold(&z, t);
        prop_assert_eq!(&coarsen_argmax(&y).unwrap(), &y);
        let mut rows = Vec::new();
        for _ in 0..n {
            let g: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = g.iter().sum();
            rows.push(g.iter().map(|v| v / s).collect::<Vec<_>>());
        }
        let once = coarsen_argmax(&Tensor::from_rows(&rows).unwrap()).unwrap();
        prop_assert_eq!(&coarsen_argmax(&once).unwrap(), &once);
    }

    #[test]
    fn splits_are_reproducible_and_disjoint(seed in any::<u64>(), n in 2usize..60) {
        let g = RegressionGenerator::new(6, 4, 4.0, 0.1, seed).unwrap();
        let (train, test) = g.generate_split(n, n, seed).unwrap();
        let (train2, test2) = g.generate_split(n, n, seed).unwrap();
        prop_assert_eq!(&train.x, &train2.x);
        prop_assert_eq!(&test.x, &test2.x);
        prop_assert_eq!(test.threshold, train.threshold);
        prop_assert!(row_set(&train.x).is_disjoint(&row_set(&test.x)));

        let u = UnmixingGenerator::new(3, 8, 0.02, 0.8, seed).unwrap();
        let (a, b) = u.generate_split(n, n, seed).unwrap();
        prop_assert_eq!(&a.x, &u.generate(n, seed, Split::Train).unwrap().x);
        prop_assert!(row_set(&a.x).is_disjoint(&row_set(&b.x)));
    }
}

#[test]
fn exported_datasets_reload_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let reg = RegressionGenerator::new(5, 3, 4.0, 0.1, 9).unwrap().generate(50, 9, Split::Train, None).unwrap();
    let um = UnmixingGenerator::new(3, 7, 0.02, 0.8, 9).unwrap().generate(50, 9, Split::Train).unwrap();
    for (ds, mode) in [(reg, DatasetMode::Regression), (um, DatasetMode::Unmixing)] {
        let path = dir.path().join(format!("{}.csv", mode.as_str()));
        ds.export_csv(&path).unwrap();
        let back = load_csv_dataset(&path, mode, ds.threshold).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.fine, ds.fine);
    }
}

#[test]
fn training_is_deterministic_and_finite() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["regression", "unmixing"] {
        for kind in ["cross_entropy", "label_smoothing", "confidence_penalty", "fierce"] {
            let cfg = small(mode, &format!("criterion.kind = {kind}"));
            let a = run_train(&cfg, &dir.path().join(format!("{mode}_{kind}_a"))).unwrap();
            let b = run_train(&cfg, &dir.path().join(format!("{mode}_{kind}_b"))).unwrap();
            assert_finite(&a.metrics);
            assert_eq!(a.metrics.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 2, 4]);
            for file in ["metrics.csv", "checkpoint.csv", "features.csv"] {
                let read = |o: &fierce_core::experiment::RunOutput| std::fs::read(o.dir.join(file)).unwrap();
                assert_eq!(read(&a), read(&b), "{mode} {kind} {file}");
            }
        }
    }
}

#[test]
fn zero_lambda_follows_the_cross_entropy_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["regression", "unmixing"] {
        let ce = run_train(&small(mode, "criterion.kind = cross_entropy"), &dir.path().join(format!("{mode}_ce"))).unwrap();
        let f0 = run_train(
            &small(mode, "criterion.kind = fierce\ncriterion.lambda = 0"),
            &dir.path().join(format!("{mode}_f0")),
        )
        .unwrap();
        assert_eq!(ce.params, f0.params);
        for (a, b) in ce.metrics.iter().zip(&f0.metrics) {
            assert_eq!(a.ce_loss.to_bits(), b.ce_loss.to_bits());
            assert_eq!(a.headline_mse(), b.headline_mse());
            assert_eq!(a.entropy_anchor.to_bits(), b.entropy_anchor.to_bits());
        }
    }
}

#[test]
fn zero_epochs_record_only_the_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("regression", "");
    cfg.epochs = 0;
    let out = run_train(&cfg, dir.path()).unwrap();
    assert_eq!(out.metrics.len(), 1);
    assert_eq!(out.metrics[0].epoch, 0);
    let lines = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap().lines().count();
    assert_eq!(lines, 2);
}

#[test]
fn exported_features_match_the_run() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["regression", "unmixing"] {
        let run_dir = dir.path().join(mode);
        run_train(&small(mode, ""), &run_dir).unwrap();
        let out = dir.path().join(format!("{mode}_features.csv"));
        let rows = export_features(&run_dir.join("checkpoint.csv"), &run_dir.join("data_test.csv"), &out).unwrap();
        assert_eq!(rows, 120);
        // A reloaded regression file is coarsened at its own median, so only
        // the features and fine labels are compared there.
        let strip = |path: &std::path::Path| -> Vec<String> {
            let text = std::fs::read_to_string(path).unwrap();
            text.lines()
                .map(|l| if mode == "regression" { l.rsplit_once(',').unwrap().0.to_string() } else { l.to_string() })
                .collect()
        };
        assert_eq!(strip(&out), strip(&run_dir.join("features.csv")));
    }
}
