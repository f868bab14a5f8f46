use glam_core::assignment::{hungarian, sinkhorn_normalize, Permutation};
use glam_core::diffcore::Tensor;
use glam_core::synthdata::{generate_dataset, make_template, Dataset, GenConfig};
use glam_core::training::weighted_bce_loss;
use proptest::prelude::*;

fn square(max_n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(lo..hi, n * n).prop_map(move |v| Tensor::matrix(n, n, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sinkhorn_rows_sum_to_one(m in square(8, 1e-3, 10.0), iters in 0usize..8) {
        let s = sinkhorn_normalize(&m, iters).unwrap();
        for i in 0..s.rows() {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(s.values().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn hungarian_beats_every_sampled_permutation(m in square(7, -5.0, 5.0), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let n = m.rows();
        let best = hungarian(&m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..20 {
            order.shuffle(&mut rng);
            let other = Permutation::new(order.clone()).unwrap();
            prop_assert!(best.total(&m) >= other.total(&m) - 1e-12);
        }
    }

    #[test]
    fn hungarian_recovers_planted_permutation(seed in any::<u64>(), n in 1usize..9) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let m = Tensor::from_fn(n, n, |i, j| if order[i] == j { 1.0 } else { rng.gen_range(-1.0..0.5) });
        let got = hungarian(&m).unwrap();
        prop_assert_eq!(got.as_slice(), order.as_slice());
    }

    #[test]
    fn loss_is_non_negative(x in square(6, 0.0, 1.0), w in 0.1f64..10.0, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::from_fn(x.rows(), x.cols(), |_, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        prop_assert!(weighted_bce_loss(&x, &g, None, w).unwrap() >= 0.0);
        prop_assert_eq!(weighted_bce_loss(&g, &g, None, w).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_text_round_trips(
        seed in any::<u64>(),
        n in 2usize..7,
        d in 3usize..7,
        dropout in 0.0f64..0.5,
        noise in 0.0f64..2.0,
    ) {
        let templates = vec![make_template(n, d, seed).unwrap(), make_template(n, d, seed ^ 1).unwrap()];
        let cfg = GenConfig {
            seed,
            dropout_prob: dropout,
            feature_noise_sigma: noise,
            pairs_per_category: 3,
            ..GenConfig::default()
        };
        let data = generate_dataset(&templates, &cfg).unwrap();
        let back = Dataset::from_text(&data.to_text(), "mem").unwrap();
        prop_assert_eq!(back, data);
    }
}
