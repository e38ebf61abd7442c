mod common;

use common::*;
use d2h_core::metrics::{auroc, LabeledScoreSet};
use d2h_core::score::{normalize_scores, raw_scores, DriftConfig, Normalization};
use d2h_core::Trace;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn trace_from(seed: u64, ties: bool) -> (Trace<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = random_trace(&mut rng, &ORACLE_SHAPE, ties);
    (t, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translation_leaves_scores_unchanged(seed in any::<u64>()) {
        let (t, mut rng) = trace_from(seed, true);
        let c: Vec<f64> = (0..t.meta.hidden_dim).map(|_| 10.0 * gauss(&mut rng)).collect();
        let cfg = DriftConfig::default();
        let (d0, r0) = raw_scores(&t, &cfg).unwrap();
        let (d1, r1) = raw_scores(&translate(&t, &c), &cfg).unwrap();
        prop_assert!(close(d0, d1), "{} {}", d0, d1);
        prop_assert!(close(r0, r1), "{} {}", r0, r1);
    }

    #[test]
    fn orthogonal_maps_leave_scores_unchanged(seed in any::<u64>()) {
        let (t, mut rng) = trace_from(seed, true);
        let q = random_orthogonal(&mut rng, t.meta.hidden_dim);
        let cfg = DriftConfig::default();
        let (d0, r0) = raw_scores(&t, &cfg).unwrap();
        let (d1, r1) = raw_scores(&rotate(&t, &q), &cfg).unwrap();
        prop_assert!(close(d0, d1));
        prop_assert!(close(r0, r1));
    }

    #[test]
    fn scaling_scales_scores(seed in any::<u64>(), alpha in 0.01f64..100.0) {
        let (t, _) = trace_from(seed, true);
        let cfg = DriftConfig::default();
        let (d0, r0) = raw_scores(&t, &cfg).unwrap();
        let (d1, r1) = raw_scores(&scale(&t, alpha), &cfg).unwrap();
        prop_assert!(close(alpha * d0, d1));
        prop_assert!(close(alpha * r0, r1));
    }

    #[test]
    fn token_permutation_leaves_scores_unchanged(seed in any::<u64>()) {
        let (t, mut rng) = trace_from(seed, false);
        let mut perm: Vec<usize> = (0..t.meta.t_gen).collect();
        perm.shuffle(&mut rng);
        let cfg = DriftConfig::with_k(rng.random_range(1..=10) as f64 / 10.0);
        let (d0, r0) = raw_scores(&t, &cfg).unwrap();
        let (d1, r1) = raw_scores(&permute_tokens(&t, &perm), &cfg).unwrap();
        prop_assert!(close(d0, d1));
        prop_assert!(close(r0, r1));
    }

    #[test]
    fn full_key_set_reduces_to_centroid_drift(seed in any::<u64>()) {
        let (t, _) = trace_from(seed, true);
        let (_, r) = raw_scores(&t, &DriftConfig::with_k(1.0)).unwrap();
        prop_assert!(close(r, centroid_drift(&t)));
    }

    #[test]
    fn auroc_is_rank_invariant(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = random_labeled(&mut rng, 60);
        let mapped: Vec<(f64, bool)> = entries.iter().map(|&(s, y)| ((a * s + b).exp(), y)).collect();
        let x = auroc(&LabeledScoreSet::new("x", entries)).unwrap();
        let y = auroc(&LabeledScoreSet::new("y", mapped)).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn minmax_preserves_order_and_range(values in prop::collection::vec(-1e6f64..1e6, 1..50)) {
        let n = normalize_scores(&values, Normalization::MinMax);
        for (i, v) in n.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(v));
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(n[i] <= n[j]);
                }
            }
        }
    }

    #[test]
    fn zscore_has_zero_mean(values in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let n = normalize_scores(&values, Normalization::ZScore);
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }
}
