use fierce_core::autodiff::Tape;
use fierce_core::losses::{
    confidence_penalty, cross_entropy, label_smoothing_loss, smooth_labels, softmax_probs, SmoothingForm,
};
use fierce_core::nn::{forward, sgd_step, SgdState};
use fierce_core::{MlpConfig, ModelParams, SgdConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn one_hot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        y[r * cols + rng.random_range(0..cols)] = 1.0;
    }
    Tensor::matrix(rows, cols, y).unwrap()
}

fn probs(logits: &Tensor, tau: f64) -> Tensor {
    let mut t = Tape::new();
    let l = t.constant(logits.clone()).unwrap();
    let q = softmax_probs(&mut t, l, tau).unwrap();
    t.value(q).clone()
}

fn small_mlp(rng: &mut ChaCha8Rng) -> MlpConfig {
    MlpConfig {
        input_dim: rng.random_range(1..6),
        hidden_dims: vec![rng.random_range(1..8), rng.random_range(1..8)],
        feature_dim: rng.random_range(1..8),
        num_classes: rng.random_range(2..5),
        bottleneck_average: rng.random_bool(0.5),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_sum_to_one_and_keep_the_argmax(
        n in 1usize..10, c in 1usize..8, seed in any::<u64>(), tau in 0.05f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(n, c, 10.0, &mut rng);
        let q = probs(&logits, tau);
        let q1 = probs(&logits, 1.0);
        for r in 0..n {
            prop_assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        prop_assert_eq!(q.argmax_rows(), q1.argmax_rows());
        prop_assert_eq!(q.argmax_rows(), logits.argmax_rows());
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_zero_only_at_the_labels(
        n in 1usize..10, c in 2usize..6, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = one_hot(n, c, &mut rng);
        let q = probs(&random(n, c, 5.0, &mut rng), 1.0);
        let ce = |q: &Tensor| {
            let mut t = Tape::new();
            let (qv, yv) = (t.constant(q.clone()).unwrap(), t.constant(y.clone()).unwrap());
            let l = cross_entropy(&mut t, qv, yv).unwrap();
            t.value(l).item()
        };
        prop_assert!(ce(&q) > 0.0);
        prop_assert_eq!(ce(&y), 0.0);
    }

    #[test]
    fn unsmoothed_label_smoothing_is_cross_entropy(
        n in 1usize..10, c in 2usize..6, seed in any::<u64>(), add_uniform in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = one_hot(n, c, &mut rng);
        let q = probs(&random(n, c, 5.0, &mut rng), 1.0);
        let form = if add_uniform { SmoothingForm::AddUniform } else { SmoothingForm::SpreadOthers };
        let t0 = smooth_labels(&y, 0.0, form).unwrap().targets;
        let mut t = Tape::new();
        let (qv, yv, tv) = (
            t.constant(q).unwrap(),
            t.constant(y).unwrap(),
            t.constant(t0).unwrap(),
        );
        let ce = cross_entropy(&mut t, qv, yv).unwrap();
        let ls = label_smoothing_loss(&mut t, qv, tv).unwrap();
        prop_assert_eq!(t.value(ce).item().to_bits(), t.value(ls).item().to_bits());
    }

    #[test]
    fn confidence_penalty_is_within_bounds(n in 1usize..10, c in 1usize..8, seed in any::<u64>(), scale in 0.0f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = probs(&random(n, c, scale, &mut rng), 1.0);
        let mut t = Tape::new();
        let qv = t.constant(q).unwrap();
        let cp = confidence_penalty(&mut t, qv).unwrap();
        let v = t.value(cp).item();
        prop_assert!(v <= 1e-15 && v >= -(c as f64).ln() - 1e-12, "{}", v);
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = small_mlp(&mut rng);
        let params = ModelParams::init(&mlp, rng.random()).unwrap();
        let x = random(n, mlp.input_dim, 2.0, &mut rng);
        let a = params.forward_values(&mlp, &x).unwrap();
        let b = params.forward_values(&mlp, &x).unwrap();
        prop_assert_eq!(&a.logits, &b.logits);
        prop_assert_eq!(&a.features, &b.features);
        prop_assert_eq!(a.features.cols(), mlp.effective_feature_dim());
        if mlp.bottleneck_average {
            prop_assert_eq!(a.features.cols(), 1);
        }
    }

    #[test]
    fn a_vanishing_learning_rate_leaves_parameters_in_place(seed in any::<u64>(), momentum in 0.0f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = small_mlp(&mut rng);
        let mut params = ModelParams::init(&mlp, rng.random()).unwrap();
        let before = params.clone();
        let x = random(8, mlp.input_dim, 2.0, &mut rng);
        let y = one_hot(8, mlp.num_classes, &mut rng);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape).unwrap();
        let xv = tape.constant(x).unwrap();
        let out = forward(&mut tape, &mlp, &vars, xv).unwrap();
        let q = softmax_probs(&mut tape, out.logits, 1.0).unwrap();
        let yv = tape.constant(y).unwrap();
        let loss = cross_entropy(&mut tape, q, yv).unwrap();
        let grads = tape.backward(loss).unwrap();
        let cfg = SgdConfig { learning_rate: 1e-300, momentum, weight_decay: 0.0 };
        sgd_step(&mut params, &vars, &grads, &cfg, &mut SgdState::default()).unwrap();
        for ((_, a), (_, b)) in params.iter().zip(before.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
        }
    }
}
